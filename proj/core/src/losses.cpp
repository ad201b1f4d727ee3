#include "stagekd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stagekd/errors.hpp"

namespace stagekd {

namespace {

constexpr double kProbEps = 1e-12;
constexpr double kNormEps = 1e-12;

void check_logits(const LogitVector& logits, const char* who) {
  if (logits.size() < 2) throw InputError(std::string(who) + ": needs at least 2 classes");
  for (double v : logits)
    if (!std::isfinite(v)) throw InputError(std::string(who) + ": non-finite logit");
}

void check_map(const FeatureMap& f, const char* who) {
  if (f.data.ndim() != 3) throw InputError(std::string(who) + ": feature map must be C×H×W");
  if (f.data.dim(0) < 1 || f.data.dim(1) < 1 || f.data.dim(2) < 1)
    throw InputError(std::string(who) + ": empty feature map dimension");
  if (!f.data.all_finite()) throw InputError(std::string(who) + ": non-finite feature entry");
}

void check_target(const Target& t, std::size_t classes, const char* who) {
  if (t.is_soft()) {
    if (t.soft.size() != classes) throw InputError(std::string(who) + ": soft label length mismatch");
    double sum = 0.0;
    for (double p : t.soft) {
      if (!std::isfinite(p) || p < -1e-9) throw InputError(std::string(who) + ": invalid soft label entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InputError(std::string(who) + ": soft label does not sum to 1");
  } else {
    if (t.index < 0 || t.index >= static_cast<int>(classes))
      throw InputError(std::string(who) + ": label index out of range");
  }
}

std::vector<double> stable_softmax(const LogitVector& logits, double temperature) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

// Distance between a/||a|| and b/||b|| for flattened non-negative maps, plus
// the partial derivative w.r.t. the student map entries (chain rule up to the
// squared activations is done by the callers).
struct NormalizedDistance {
  double value = 0.0;
  // d distance / d a_student[q]
  std::vector<double> d_by_da;
};

NormalizedDistance normalized_l2_distance(const std::vector<double>& a_teacher,
                                          const std::vector<double>& a_student,
                                          bool want_grad) {
  const std::size_t n = a_teacher.size();
  double nt = 0.0, ns = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    nt += a_teacher[i] * a_teacher[i];
    ns += a_student[i] * a_student[i];
  }
  nt = std::max(std::sqrt(nt), kNormEps);
  ns = std::max(std::sqrt(ns), kNormEps);

  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double diff = a_teacher[i] / nt - a_student[i] / ns;
    d2 += diff * diff;
  }
  NormalizedDistance res;
  res.value = std::sqrt(d2);
  if (!want_grad) return res;

  res.d_by_da.assign(n, 0.0);
  if (res.value <= 0.0) return res;  // identical maps: flat point, zero grad

  // w = (v - u)/D, grad_a = (w - v (v.w)) / ns with v = a_s/ns, u = a_t/nt
  double vdotw = 0.0;
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = a_student[i] / ns;
    double u = a_teacher[i] / nt;
    w[i] = (v - u) / res.value;
    vdotw += v * w[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    double v = a_student[i] / ns;
    res.d_by_da[i] = (w[i] - v * vdotw) / ns;
  }
  return res;
}

}  // namespace

SoftDistribution soften(const LogitVector& logits, double temperature) {
  check_logits(logits, "soften");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ParameterError("soften: temperature must be positive");
  return SoftDistribution{stable_softmax(logits, temperature), temperature};
}

double cross_entropy(const LogitVector& logits, const Target& target, LogitVector* grad_logits) {
  check_logits(logits, "cross_entropy");
  check_target(target, logits.size(), "cross_entropy");
  std::vector<double> p = stable_softmax(logits, 1.0);
  double loss = 0.0;
  if (target.is_soft()) {
    for (std::size_t i = 0; i < p.size(); ++i)
      if (target.soft[i] > 0.0) loss -= target.soft[i] * std::log(std::max(p[i], kProbEps));
  } else {
    loss = -std::log(std::max(p[static_cast<std::size_t>(target.index)], kProbEps));
  }
  if (grad_logits) {
    grad_logits->assign(p.begin(), p.end());
    if (target.is_soft()) {
      for (std::size_t i = 0; i < p.size(); ++i) (*grad_logits)[i] -= target.soft[i];
    } else {
      (*grad_logits)[static_cast<std::size_t>(target.index)] -= 1.0;
    }
  }
  return loss;
}

double cross_entropy(const LogitVector& logits, int label, LogitVector* grad_logits) {
  return cross_entropy(logits, Target::of(label), grad_logits);
}

double kl_divergence(const SoftDistribution& teacher, const SoftDistribution& student) {
  if (teacher.probs.size() != student.probs.size())
    throw InputError("kl_divergence: class count mismatch");
  if (teacher.probs.size() < 2) throw InputError("kl_divergence: needs at least 2 classes");
  if (teacher.temperature != student.temperature)
    throw InputError("kl_divergence: distributions were softened at different temperatures");
  double kl = 0.0;
  for (std::size_t i = 0; i < teacher.probs.size(); ++i) {
    double pt = teacher.probs[i];
    if (pt <= 0.0) continue;  // 0 * log 0 := 0
    double ps = std::max(student.probs[i], kProbEps);
    kl += pt * std::log(std::max(pt, kProbEps) / ps);
  }
  return std::max(kl, 0.0);
}

double response_loss(const LogitVector& student_logits, const LogitVector& teacher_logits,
                     const Target& target, const LossWeights& w, LogitVector* grad_student) {
  check_logits(student_logits, "response_loss(student)");
  check_logits(teacher_logits, "response_loss(teacher)");
  if (student_logits.size() != teacher_logits.size())
    throw InputError("response_loss: logit length mismatch");

  double ce = cross_entropy(student_logits, target, grad_student);
  const double T = w.temperature;
  SoftDistribution pt = soften(teacher_logits, T);
  SoftDistribution ps = soften(student_logits, T);
  double kl = kl_divergence(pt, ps);
  double scale = w.scale_kl_by_t2 ? T * T : 1.0;
  if (grad_student) {
    // d(scale*KL)/ds_j = scale/T * (ps_j - pt_j)
    double g = w.lambda_ * scale / T;
    for (std::size_t i = 0; i < student_logits.size(); ++i)
      (*grad_student)[i] += g * (ps.probs[i] - pt.probs[i]);
  }
  return ce + w.lambda_ * scale * kl;
}

Tensor attention_map(const FeatureMap& f) {
  check_map(f, "attention_map");
  const int C = f.channels(), H = f.height(), W = f.width();
  Tensor out({H, W});
  const double* src = f.data.data();
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p) out[p] += src[c * H * W + p] * src[c * H * W + p];
  return out;
}

double at_distance(const FeatureMap& teacher, const FeatureMap& student, Tensor* grad_student) {
  check_map(teacher, "at_distance(teacher)");
  check_map(student, "at_distance(student)");
  if (teacher.height() != student.height() || teacher.width() != student.width())
    throw InputError("at_distance: spatial size mismatch (resize the smaller tap first)");

  Tensor at = attention_map(teacher);
  Tensor as = attention_map(student);
  NormalizedDistance nd =
      normalized_l2_distance(at.values(), as.values(), grad_student != nullptr);
  if (grad_student) {
    const int C = student.channels(), HW = student.height() * student.width();
    *grad_student = Tensor(student.data.shape());
    const double* src = student.data.data();
    double* dst = grad_student->data();
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < HW; ++p)
        dst[c * HW + p] = nd.d_by_da[static_cast<std::size_t>(p)] * 2.0 * src[c * HW + p];
  }
  return nd.value;
}

std::vector<int> df_topk_select(const FeatureMap& f, int k) {
  check_map(f, "df_topk_select");
  const int C = f.channels(), HW = f.height() * f.width();
  if (k < 1 || k > C) throw ParameterError("df_topk_select: k out of range");
  std::vector<double> norms(static_cast<std::size_t>(C), 0.0);
  const double* src = f.data.data();
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int p = 0; p < HW; ++p) s += src[c * HW + p] * src[c * HW + p];
    norms[static_cast<std::size_t>(c)] = std::sqrt(s);
  }
  std::vector<int> idx(static_cast<std::size_t>(C));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (norms[static_cast<std::size_t>(a)] != norms[static_cast<std::size_t>(b)])
      return norms[static_cast<std::size_t>(a)] > norms[static_cast<std::size_t>(b)];
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

double df_distance(const FeatureMap& teacher, const FeatureMap& student, int k,
                   Tensor* grad_student) {
  check_map(teacher, "df_distance(teacher)");
  check_map(student, "df_distance(student)");
  if (teacher.height() != student.height() || teacher.width() != student.width())
    throw InputError("df_distance: spatial size mismatch (resize the smaller tap first)");
  if (teacher.channels() != student.channels())
    throw InputError("df_distance: channel count mismatch (project the student through an adapter)");
  if (k < 1 || k > teacher.channels()) throw ParameterError("df_distance: k out of range");

  const int HW = teacher.height() * teacher.width();
  std::vector<int> selected = df_topk_select(teacher, k);

  if (grad_student) {
    *grad_student = Tensor(student.data.shape());
  }
  const double* tsrc = teacher.data.data();
  const double* ssrc = student.data.data();
  double total = 0.0;
  std::vector<double> at(static_cast<std::size_t>(HW)), as(static_cast<std::size_t>(HW));
  for (int c : selected) {
    for (int p = 0; p < HW; ++p) {
      at[static_cast<std::size_t>(p)] = tsrc[c * HW + p] * tsrc[c * HW + p];
      as[static_cast<std::size_t>(p)] = ssrc[c * HW + p] * ssrc[c * HW + p];
    }
    NormalizedDistance nd = normalized_l2_distance(at, as, grad_student != nullptr);
    total += nd.value;
    if (grad_student) {
      double* dst = grad_student->data();
      for (int p = 0; p < HW; ++p)
        dst[c * HW + p] += nd.d_by_da[static_cast<std::size_t>(p)] * 2.0 * ssrc[c * HW + p];
    }
  }
  return total;
}

double feature_loss(const std::vector<std::pair<FeatureMap, FeatureMap>>& tap_pairs,
                    const LogitVector& student_logits, const Target& target,
                    const LossWeights& w, LogitVector* grad_logits,
                    std::vector<Tensor>* grad_student_maps) {
  if (tap_pairs.empty()) throw InputError("feature_loss: no tap pairs");
  double loss = cross_entropy(student_logits, target, grad_logits);
  if (grad_student_maps) grad_student_maps->assign(tap_pairs.size(), Tensor());
  for (std::size_t i = 0; i < tap_pairs.size(); ++i) {
    const FeatureMap& ft = tap_pairs[i].first;
    const FeatureMap& fs = tap_pairs[i].second;
    Tensor g_at, g_df;
    Tensor* g_at_p = grad_student_maps ? &g_at : nullptr;
    Tensor* g_df_p = grad_student_maps ? &g_df : nullptr;
    loss += w.alpha * at_distance(ft, fs, g_at_p);
    loss += w.beta * df_distance(ft, fs, w.k_channels, g_df_p);
    if (grad_student_maps) {
      Tensor g(fs.data.shape());
      for (std::int64_t j = 0; j < g.size(); ++j)
        g[j] = w.alpha * g_at[j] + w.beta * g_df[j];
      (*grad_student_maps)[i] = std::move(g);
    }
  }
  return loss;
}

FspMatrix fsp_matrix(const FeatureMap& f_in, const FeatureMap& f_out) {
  check_map(f_in, "fsp_matrix(in)");
  check_map(f_out, "fsp_matrix(out)");
  if (f_in.height() != f_out.height() || f_in.width() != f_out.width())
    throw InputError("fsp_matrix: spatial size mismatch (resize the smaller tap first)");
  const int Ci = f_in.channels(), Co = f_out.channels();
  const int HW = f_in.height() * f_in.width();
  FspMatrix g;
  g.layer_pair = {f_in.layer_name, f_out.layer_name};
  g.data = Tensor({Ci, Co});
  const double inv = 1.0 / static_cast<double>(HW);
  const double* a = f_in.data.data();
  const double* b = f_out.data.data();
  for (int m = 0; m < Ci; ++m)
    for (int n = 0; n < Co; ++n) {
      double s = 0.0;
      for (int p = 0; p < HW; ++p) s += a[m * HW + p] * b[n * HW + p];
      g.data.at(m, n) = s * inv;
    }
  return g;
}

void fsp_matrix_backward(const FeatureMap& f_in, const FeatureMap& f_out,
                         const Tensor& grad_fsp, Tensor* grad_in, Tensor* grad_out) {
  const int Ci = f_in.channels(), Co = f_out.channels();
  const int HW = f_in.height() * f_in.width();
  const double inv = 1.0 / static_cast<double>(HW);
  if (grad_in && grad_in->empty()) *grad_in = Tensor(f_in.data.shape());
  if (grad_out && grad_out->empty()) *grad_out = Tensor(f_out.data.shape());
  const double* a = f_in.data.data();
  const double* b = f_out.data.data();
  for (int m = 0; m < Ci; ++m)
    for (int n = 0; n < Co; ++n) {
      double g = grad_fsp.at(m, n) * inv;
      if (g == 0.0) continue;
      if (grad_in)
        for (int p = 0; p < HW; ++p) grad_in->data()[m * HW + p] += g * b[n * HW + p];
      if (grad_out)
        for (int p = 0; p < HW; ++p) grad_out->data()[n * HW + p] += g * a[m * HW + p];
    }
}

double relation_loss(const std::vector<FspMatrix>& teacher_fsp,
                     const std::vector<FspMatrix>& student_fsp,
                     const LogitVector& student_logits, const Target& target,
                     const LossWeights& w, LogitVector* grad_logits,
                     std::vector<Tensor>* grad_student_fsp) {
  if (teacher_fsp.size() != student_fsp.size())
    throw InputError("relation_loss: pair count mismatch");
  double loss = cross_entropy(student_logits, target, grad_logits);
  if (grad_student_fsp) grad_student_fsp->assign(student_fsp.size(), Tensor());
  for (std::size_t i = 0; i < teacher_fsp.size(); ++i) {
    const Tensor& gt = teacher_fsp[i].data;
    const Tensor& gs = student_fsp[i].data;
    if (!gt.same_shape(gs)) throw InputError("relation_loss: FSP shape mismatch");
    const double inv = 1.0 / static_cast<double>(gt.size());
    double mse = 0.0;
    for (std::int64_t j = 0; j < gt.size(); ++j) {
      double d = gt[j] - gs[j];
      mse += d * d;
    }
    mse *= inv;
    loss += w.gamma * mse;
    if (grad_student_fsp) {
      Tensor g(gs.shape());
      for (std::int64_t j = 0; j < gs.size(); ++j)
        g[j] = w.gamma * 2.0 * (gs[j] - gt[j]) * inv;
      (*grad_student_fsp)[i] = std::move(g);
    }
  }
  return loss;
}

double relation_loss_from_taps(
    const std::vector<std::pair<FeatureMap, FeatureMap>>& teacher_pairs,
    const std::vector<std::pair<FeatureMap, FeatureMap>>& student_pairs,
    const LogitVector& student_logits, const Target& target, const LossWeights& w,
    LogitVector* grad_logits, std::vector<std::pair<Tensor, Tensor>>* grad_student_maps) {
  if (teacher_pairs.size() != student_pairs.size())
    throw InputError("relation_loss_from_taps: pair count mismatch");
  std::vector<FspMatrix> gt, gs;
  gt.reserve(teacher_pairs.size());
  gs.reserve(student_pairs.size());
  for (std::size_t i = 0; i < teacher_pairs.size(); ++i) {
    gt.push_back(fsp_matrix(teacher_pairs[i].first, teacher_pairs[i].second));
    gs.push_back(fsp_matrix(student_pairs[i].first, student_pairs[i].second));
  }
  std::vector<Tensor> grad_fsp;
  double loss = relation_loss(gt, gs, student_logits, target, w, grad_logits,
                              grad_student_maps ? &grad_fsp : nullptr);
  if (grad_student_maps) {
    grad_student_maps->assign(student_pairs.size(), {});
    for (std::size_t i = 0; i < student_pairs.size(); ++i) {
      Tensor din, dout;
      fsp_matrix_backward(student_pairs[i].first, student_pairs[i].second, grad_fsp[i],
                          &din, &dout);
      (*grad_student_maps)[i] = {std::move(din), std::move(dout)};
    }
  }
  return loss;
}

double rskd_total_loss(double ce, double response_term, double feature_term,
                       double relation_term, const LossWeights& w) {
  return ce + w.eta * response_term + w.xi * feature_term + w.tau_w * relation_term;
}

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
  if (chw.ndim() != 3) throw InputError("resize_bilinear: expected C×H×W");
  const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  if (out_h < 1 || out_w < 1) throw ParameterError("resize_bilinear: bad output size");
  Tensor out({C, out_h, out_w});
  const double sy = out_h > 1 ? static_cast<double>(H - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(W - 1) / (out_w - 1) : 0.0;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < out_h; ++y) {
      double fy = y * sy;
      int y0 = static_cast<int>(fy);
      int y1 = std::min(y0 + 1, H - 1);
      double wy = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        double fx = x * sx;
        int x0 = static_cast<int>(fx);
        int x1 = std::min(x0 + 1, W - 1);
        double wx = fx - x0;
        double v00 = chw.at(c, y0, x0), v01 = chw.at(c, y0, x1);
        double v10 = chw.at(c, y1, x0), v11 = chw.at(c, y1, x1);
        out.at(c, y, x) = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  return out;
}

void resize_bilinear_backward(const Tensor& grad_out, int in_h, int in_w, Tensor* grad_in) {
  if (grad_out.ndim() != 3) throw InputError("resize_bilinear_backward: expected C×H×W");
  const int C = grad_out.dim(0), Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  if (grad_in->empty()) *grad_in = Tensor({C, in_h, in_w});
  const double sy = Ho > 1 ? static_cast<double>(in_h - 1) / (Ho - 1) : 0.0;
  const double sx = Wo > 1 ? static_cast<double>(in_w - 1) / (Wo - 1) : 0.0;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y) {
      double fy = y * sy;
      int y0 = static_cast<int>(fy);
      int y1 = std::min(y0 + 1, in_h - 1);
      double wy = fy - y0;
      for (int x = 0; x < Wo; ++x) {
        double fx = x * sx;
        int x0 = static_cast<int>(fx);
        int x1 = std::min(x0 + 1, in_w - 1);
        double wx = fx - x0;
        double g = grad_out.at(c, y, x);
        grad_in->at(c, y0, x0) += (1 - wy) * (1 - wx) * g;
        grad_in->at(c, y0, x1) += (1 - wy) * wx * g;
        grad_in->at(c, y1, x0) += wy * (1 - wx) * g;
        grad_in->at(c, y1, x1) += wy * wx * g;
      }
    }
}

ChannelAdapter ChannelAdapter::init(int c_in, int c_out, Rng& rng) {
  if (c_in < 1 || c_out < 1) throw ParameterError("ChannelAdapter: bad channel counts");
  ChannelAdapter a;
  a.weight = Tensor({c_out, c_in});
  a.bias = Tensor({c_out});
  double stddev = std::sqrt(2.0 / static_cast<double>(c_in));
  for (std::int64_t i = 0; i < a.weight.size(); ++i) a.weight[i] = rng.normal(0.0, stddev);
  return a;
}

FeatureMap ChannelAdapter::apply(const FeatureMap& f) const {
  const int Ci = weight.dim(1), Co = weight.dim(0);
  if (f.channels() != Ci) throw InputError("ChannelAdapter: input channel mismatch");
  const int HW = f.height() * f.width();
  FeatureMap out;
  out.layer_name = f.layer_name;
  out.data = Tensor({Co, f.height(), f.width()});
  const double* src = f.data.data();
  double* dst = out.data.data();
  for (int o = 0; o < Co; ++o) {
    for (int p = 0; p < HW; ++p) dst[o * HW + p] = bias[o];
    for (int i = 0; i < Ci; ++i) {
      double wv = weight.at(o, i);
      if (wv == 0.0) continue;
      for (int p = 0; p < HW; ++p) dst[o * HW + p] += wv * src[i * HW + p];
    }
  }
  return out;
}

void ChannelAdapter::backward(const FeatureMap& input, const Tensor& grad_output,
                              Tensor* grad_input, Tensor* grad_weight,
                              Tensor* grad_bias) const {
  const int Ci = weight.dim(1), Co = weight.dim(0);
  const int HW = input.height() * input.width();
  if (grad_input && grad_input->empty()) *grad_input = Tensor(input.data.shape());
  if (grad_weight && grad_weight->empty()) *grad_weight = Tensor(weight.shape());
  if (grad_bias && grad_bias->empty()) *grad_bias = Tensor(bias.shape());
  const double* x = input.data.data();
  const double* gy = grad_output.data();
  for (int o = 0; o < Co; ++o) {
    double gb = 0.0;
    for (int p = 0; p < HW; ++p) gb += gy[o * HW + p];
    if (grad_bias) (*grad_bias)[o] += gb;
    for (int i = 0; i < Ci; ++i) {
      double gw = 0.0;
      for (int p = 0; p < HW; ++p) gw += gy[o * HW + p] * x[i * HW + p];
      if (grad_weight) grad_weight->at(o, i) += gw;
      if (grad_input) {
        double wv = weight.at(o, i);
        for (int p = 0; p < HW; ++p) grad_input->data()[i * HW + p] += wv * gy[o * HW + p];
      }
    }
  }
}

}  // namespace stagekd
