#ifndef STAGEKD_LOSSES_HPP
#define STAGEKD_LOSSES_HPP

#include <string>
#include <utility>
#include <vector>

#include "stagekd/tensor.hpp"

namespace stagekd {

// Unnormalized class scores, length C >= 2.
using LogitVector = std::vector<double>;

// Softmax output tagged with the temperature it was produced at.
struct SoftDistribution {
  std::vector<double> probs;
  double temperature = 1.0;
};

// One tapped activation block, C×H×W.
struct FeatureMap {
  Tensor data;
  std::string layer_name;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// Gram-style inner-product matrix between an input and an output tap,
// shape C_in × C_out, normalized by the spatial size.
struct FspMatrix {
  Tensor data;
  std::pair<std::string, std::string> layer_pair;
};

// Hard class index or soft label vector.
struct Target {
  int index = -1;
  std::vector<double> soft;

  bool is_soft() const { return !soft.empty(); }
  static Target of(int cls) { return Target{cls, {}}; }
  static Target of_soft(std::vector<double> p) { return Target{-1, std::move(p)}; }
};

// All distillation hyperparameters. `lambda_` balances the response KL,
// `alpha`/`beta` the AT/DF feature terms, `gamma` the FSP term, and
// `eta`/`xi`/`tau_w` the combination-stage totals. `tau_w` is kept separate
// from `temperature` on purpose: the two play different roles even though
// some formulations reuse the same symbol.
struct LossWeights {
  double lambda_ = 0.9;
  double alpha = 200.0;
  double beta = 300.0;
  double gamma = 0.9;
  double eta = 0.9;
  double xi = 1.0;
  double tau_w = 0.9;
  double temperature = 4.0;
  int k_channels = 16;
  // Scale the KL term by T^2 so its gradient magnitude does not shrink as the
  // temperature grows. Exposed because some formulations omit it.
  bool scale_kl_by_t2 = true;
};

// probs_i = exp(logit_i / T) / sum_j exp(logit_j / T), max-subtracted.
SoftDistribution soften(const LogitVector& logits, double temperature);

// H(target, softmax(logits)) with natural log. Optional gradient w.r.t.
// logits (softmax - target).
double cross_entropy(const LogitVector& logits, const Target& target,
                     LogitVector* grad_logits = nullptr);
double cross_entropy(const LogitVector& logits, int label,
                     LogitVector* grad_logits = nullptr);

// sum_i p_t[i] * log(p_t[i] / p_s[i]); probabilities clamped at 1e-12
// before the log. Zero teacher entries contribute nothing (0*log 0 := 0).
double kl_divergence(const SoftDistribution& teacher, const SoftDistribution& student);

// cross_entropy + lambda * [T^2] * KL(soften(teacher,T) || soften(student,T)).
double response_loss(const LogitVector& student_logits, const LogitVector& teacher_logits,
                     const Target& target, const LossWeights& w,
                     LogitVector* grad_student = nullptr);

// Channel-reduced attention: out[h,w] = sum_j f[j,h,w]^2.
Tensor attention_map(const FeatureMap& f);

// L2 distance between the L2-normalized vectorized attention maps.
double at_distance(const FeatureMap& teacher, const FeatureMap& student,
                   Tensor* grad_student = nullptr);

// Indices of the k channels with the largest per-channel L2 norm, sorted
// descending by norm; ties broken by lowest index.
std::vector<int> df_topk_select(const FeatureMap& f, int k);

// Teacher's top-k channels paired with the student channels at the same
// indices; per pair the squared per-channel maps are L2-normalized and the
// distances summed. Requires matching channel counts (project the student
// through a ChannelAdapter first when they differ).
double df_distance(const FeatureMap& teacher, const FeatureMap& student, int k,
                   Tensor* grad_student = nullptr);

// cross_entropy + sum over tap pairs of (alpha * AT + beta * DF(k)).
// grad_student_maps, when given, is resized to one C×H×W gradient per pair.
double feature_loss(const std::vector<std::pair<FeatureMap, FeatureMap>>& tap_pairs,
                    const LogitVector& student_logits, const Target& target,
                    const LossWeights& w, LogitVector* grad_logits = nullptr,
                    std::vector<Tensor>* grad_student_maps = nullptr);

// G[m,n] = sum_{h,w} f_in[m,h,w] * f_out[n,h,w] / (H*W).
FspMatrix fsp_matrix(const FeatureMap& f_in, const FeatureMap& f_out);

// Chain rule through fsp_matrix: given dL/dG, accumulate dL/df_in, dL/df_out.
void fsp_matrix_backward(const FeatureMap& f_in, const FeatureMap& f_out,
                         const Tensor& grad_fsp, Tensor* grad_in, Tensor* grad_out);

// cross_entropy + gamma * sum over pairs of mean squared FSP difference.
// Optional gradient w.r.t. each student FSP matrix.
double relation_loss(const std::vector<FspMatrix>& teacher_fsp,
                     const std::vector<FspMatrix>& student_fsp,
                     const LogitVector& student_logits, const Target& target,
                     const LossWeights& w, LogitVector* grad_logits = nullptr,
                     std::vector<Tensor>* grad_student_fsp = nullptr);

// Same loss, computed from raw tap pairs; gradients flow back to the student
// feature maps. Each element of teacher_pairs/student_pairs is (f_in, f_out).
double relation_loss_from_taps(
    const std::vector<std::pair<FeatureMap, FeatureMap>>& teacher_pairs,
    const std::vector<std::pair<FeatureMap, FeatureMap>>& student_pairs,
    const LogitVector& student_logits, const Target& target, const LossWeights& w,
    LogitVector* grad_logits = nullptr,
    std::vector<std::pair<Tensor, Tensor>>* grad_student_maps = nullptr);

// ce + eta * response_term + xi * feature_term + tau_w * relation_term.
// The branch terms are the distillation-only components; their top-level
// balance weights (lambda, gamma) are replaced by eta/tau_w here so nothing
// is double-counted.
double rskd_total_loss(double ce, double response_term, double feature_term,
                       double relation_term, const LossWeights& w);

// Bilinear resize of one C×H×W map; used when two taps disagree spatially
// and resizing is enabled.
Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);
// Adjoint of resize_bilinear: scatters grad_out back onto an in_h×in_w grid.
void resize_bilinear_backward(const Tensor& grad_out, int in_h, int in_w, Tensor* grad_in);

// Trainable 1×1 channel projection aligning student channels to teacher
// channels for DF/FSP distillation across widths.
struct ChannelAdapter {
  Tensor weight;  // C_out × C_in
  Tensor bias;    // C_out

  static ChannelAdapter init(int c_in, int c_out, Rng& rng);

  FeatureMap apply(const FeatureMap& f) const;
  // Accumulates into the provided gradients (allocate-if-empty semantics).
  void backward(const FeatureMap& input, const Tensor& grad_output,
                Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) const;
  std::int64_t param_count() const { return weight.size() + bias.size(); }
};

}  // namespace stagekd

#endif
