#ifndef STAGEKD_DISTILL_HPP
#define STAGEKD_DISTILL_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stagekd/data.hpp"
#include "stagekd/model.hpp"
#include "stagekd/train.hpp"

namespace stagekd {

enum class SubstageKind { response, feature, relation };
const char* substage_name(SubstageKind k);
SubstageKind substage_from_name(const std::string& name);

// Combination-stage branch recipe: a backbone substage plus parallel
// auxiliary substages of other types.
struct CsRecipe {
  SubstageKind backbone = SubstageKind::response;
  std::vector<SubstageKind> auxiliaries;
};

struct Recipe {
  bool combination = false;
  SubstageKind kind = SubstageKind::response;  // single-substage mode
  CsRecipe cs;                                 // combination mode

  static Recipe single(SubstageKind k);
  static Recipe combination_stage(CsRecipe cs);
  bool uses(SubstageKind k) const;
  std::string label() const;  // "response" / "rp_cs" / ...
};

// Teacher -> assistants -> final student; parameter capacity must be
// monotone non-increasing along the rungs.
struct CascadeLadder {
  std::vector<NetworkSpec> rungs;
  int cascade_n() const { return static_cast<int>(rungs.size()) - 2; }
  void validate() const;
};

// assistant_mode "reinit": every assistant is a re-initialized copy of the
// student spec; "interp": widths interpolate geometrically (depths linearly)
// between teacher and student to bridge large gaps.
CascadeLadder make_ladder(const NetworkSpec& teacher, const NetworkSpec& student,
                          int cascade_n, const std::string& assistant_mode = "reinit");

struct DistillOptions {
  LossWeights weights;
  std::vector<std::string> feature_taps = {"s1.out", "s2.out", "s3.out"};
  std::vector<std::pair<std::string, std::string>> fsp_pairs = {
      {"s1.in", "s1.out"}, {"s2.in", "s2.out"}, {"s3.in", "s3.out"}};
  bool resize_spatial_mismatch = false;
  bool cache_teacher = true;       // bypassed automatically when augmenting
  std::string integration = "average";  // average | ensemble (evaluator choice)
  std::string assistant_mode = "reinit";
};

// Distillation loss provider: runs the frozen teacher (cached over the
// training set when possible), owns the 1×1 channel adapters, and assembles
// the recipe's per-batch loss plus all student-side gradients.
class DistillObjective final : public Objective {
 public:
  DistillObjective(const NetworkSpec& teacher_spec, const TrainedWeights& teacher_weights,
                   const NetworkSpec& student_spec, Recipe recipe,
                   const DistillOptions& opts, const Dataset* cache_source,
                   std::uint64_t adapter_seed);
  ~DistillObjective() override;

  const char* name() const override;
  LossBreakdown compute(Network& net, const Tensor& x, const std::vector<int>& sample_ids,
                        const std::vector<Target>& targets, bool backprop) override;
  std::vector<ParamRef> extra_params() override;
  std::int64_t extra_param_count() const override;
  // tap name -> clamped top-K actually used (differs from k_channels when a
  // teacher tap is narrower)
  std::map<std::string, int> effective_k() const;
  const std::string& teacher_weights_hash() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One teacher -> student run. Artifacts written under run_dir:
// checkpoint (final weights), checkpoint-best, metrics.jsonl, steps.jsonl,
// config-snapshot. Returns the trained (final-epoch) weights.
TrainedWeights distill_once(const NetworkSpec& teacher_spec,
                            const TrainedWeights& teacher_weights,
                            const NetworkSpec& student_spec, const Recipe& recipe,
                            const DistillOptions& opts, const Dataset& train_data,
                            const Dataset& val_data, const TrainingSchedule& schedule,
                            const std::string& run_dir, std::uint64_t student_init_seed,
                            TrainResult* out_result = nullptr);

// Sequential rung-by-rung hand-off; rung i's output becomes rung i+1's
// teacher. Writes branch_dir/rung-<i>/ artifacts for every rung.
TrainedWeights cascade(const CascadeLadder& ladder, const TrainedWeights& teacher_weights,
                       const Recipe& recipe, const DistillOptions& opts,
                       const Dataset& train_data, const Dataset& val_data,
                       const TrainingSchedule& schedule, const std::string& branch_dir,
                       std::uint64_t seed);

// Elementwise mean of same-fingerprint weight sets.
TrainedWeights integrate_weights(const std::vector<TrainedWeights>& branches);

struct BranchResult {
  std::string kind;
  TrainedWeights student;
  double val_top1 = 0.0;
};

struct StagedResult {
  TrainedWeights integrated;            // parameter average (Stage 3)
  std::vector<BranchResult> branches;
  EvalReport average_eval;              // integrated weights on val data
  EvalReport ensemble_eval;             // logit-ensemble evaluator
  std::string selected_integration;     // which one the config picked
};

struct DistillJob {
  NetworkSpec teacher_spec;
  TrainedWeights teacher_weights;
  NetworkSpec student_spec;
  int cascade_n = 0;
  DistillOptions options;
  TrainingSchedule schedule;
  std::uint64_t seed = 1;  // shared student init seed (branches stay averageable)
  // CS recipes per branch for rskd_train; empty -> defaults
  // rp_cs: response backbone + {feature, relation}
  // fe_cs: response backbone + {feature}
  // re_cs: response backbone + {relation}
  std::vector<std::pair<std::string, Recipe>> cs_branches;
};

std::vector<std::pair<std::string, Recipe>> default_cs_branches();

// Three independent substage branch cascades (response/feature/relation),
// merged by parameter averaging; the logit ensemble is evaluated alongside.
StagedResult skd_train(const DistillJob& job, const Dataset& train_data,
                       const Dataset& val_data, const std::string& run_dir);

// Three combination-stage branch cascades followed by the total-stage merge.
StagedResult rskd_train(const DistillJob& job, const Dataset& train_data,
                        const Dataset& val_data, const std::string& run_dir);

struct OverheadReport {
  std::int64_t extra_params = 0;  // all auxiliary (adapter) params in the run
  double time_per_batch_ms = 0.0;
  std::map<std::string, std::int64_t> branch_extra_params;
  std::map<std::string, double> branch_time_per_batch_ms;
};

// Aggregates adapter parameter counts and mean wall-clock per training batch
// from a finished run directory (single run or branch tree).
OverheadReport overhead_report(const std::string& run_dir);

}  // namespace stagekd

#endif
