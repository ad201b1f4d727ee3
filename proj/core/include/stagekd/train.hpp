#ifndef STAGEKD_TRAIN_HPP
#define STAGEKD_TRAIN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "stagekd/data.hpp"
#include "stagekd/metrics.hpp"
#include "stagekd/model.hpp"

namespace stagekd {

enum class OptimizerKind { sgd_momentum, adam };
const char* optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& name);

struct TrainingSchedule {
  int epochs = 30;
  int batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double lr = 0.05;
  double momentum = 0.9;
  double lr_decay = 0.1;                 // multiplicative factor at decay epochs
  std::vector<int> decay_epochs;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  bool augment = false;
  int augment_pad = 2;

  void validate() const;
  double lr_at(int epoch) const;  // lr * decay^(#decay_epochs <= epoch)
};

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double response = 0.0;  // distillation-only KL term
  double feature = 0.0;   // alpha*AT + beta*DF over taps
  double relation = 0.0;  // FSP MSE sum over pairs
};

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

// Per-batch loss/gradient provider; distillation objectives add the teacher
// and any adapters behind this interface.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual const char* name() const = 0;
  // Batch-mean loss over x/targets; when backprop is set, gradients are
  // accumulated into the network (and extra params). sample_ids index the
  // originating dataset rows, letting objectives reuse cached teacher runs.
  virtual LossBreakdown compute(Network& net, const Tensor& x,
                                const std::vector<int>& sample_ids,
                                const std::vector<Target>& targets, bool backprop) = 0;
  virtual std::vector<ParamRef> extra_params() { return {}; }
  virtual std::int64_t extra_param_count() const { return 0; }
};

// Plain supervised cross entropy (teacher pre-training).
class SupervisedObjective final : public Objective {
 public:
  const char* name() const override { return "supervised"; }
  LossBreakdown compute(Network& net, const Tensor& x, const std::vector<int>& sample_ids,
                        const std::vector<Target>& targets, bool backprop) override;
};

struct EvalReport {
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent
  int n_samples = 0;
  std::vector<double> per_class_accuracy;
};

struct TrainResult {
  TrainedWeights final_weights;
  TrainedWeights best_weights;     // highest validation top-1
  double best_val_top1 = 0.0;
  std::vector<MetricRecord> log;   // also appended to run_dir/metrics.jsonl
  double mean_batch_ms = 0.0;
  int completed_epochs = 0;
};

// Minibatch training under the schedule. Per-epoch train/val metrics are
// logged; per-step loss components go to run_dir/steps.jsonl when a run
// directory is given. A non-finite loss aborts with TrainingError after
// writing the last completed epoch's weights to run_dir/checkpoint.
TrainResult train_network(Network& net, Objective& objective, const Dataset& train_data,
                          const Dataset& val_data, const TrainingSchedule& schedule,
                          const std::string& run_dir = "");

// Top-k counting on a precomputed N×C logit matrix; a sample is correct at k
// when the true class is among the k largest logits, ties resolved toward
// the lowest class index.
EvalReport evaluate_logits(const Tensor& logits, const std::vector<int>& labels);

EvalReport evaluate(Network& net, const Dataset& data, int batch_size = 64);
EvalReport evaluate(const NetworkSpec& spec, const TrainedWeights& weights,
                    const Dataset& data, int batch_size = 64);

// Mean softened logits across several students (prediction-level merge).
EvalReport ensemble_evaluate(const std::vector<NetworkSpec>& specs,
                             const std::vector<TrainedWeights>& weights,
                             const Dataset& data, int batch_size = 64);

struct CorrelationReport {
  Tensor teacher_corr;  // C×C Pearson over class-logit columns
  Tensor student_corr;
  Tensor diff;          // teacher_corr - student_corr
  double diff_frobenius = 0.0;
  std::vector<int> zero_variance_classes;  // rows/cols zeroed (diag kept at 1)
};

CorrelationReport correlation_report(const NetworkSpec& teacher_spec,
                                     const TrainedWeights& teacher_weights,
                                     const NetworkSpec& student_spec,
                                     const TrainedWeights& student_weights,
                                     const Dataset& data, int batch_size = 64);

// All logits over the dataset as an N×C matrix (eval mode).
Tensor logits_matrix(Network& net, const Dataset& data, int batch_size = 64);

// Pearson correlation between columns; zero-variance columns produce zeroed
// rows/cols with unit diagonal and are reported through zero_var.
Tensor pearson_correlation(const Tensor& columns, std::vector<int>* zero_var = nullptr);

void write_matrix_csv(const std::string& path, const Tensor& m);
// Diverging blue-white-red heatmap over [-1, 1].
void write_heatmap_ppm(const std::string& path, const Tensor& m);

}  // namespace stagekd

#endif
