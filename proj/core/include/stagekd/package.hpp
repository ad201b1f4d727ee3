#ifndef STAGEKD_PACKAGE_HPP
#define STAGEKD_PACKAGE_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stagekd/data.hpp"
#include "stagekd/model.hpp"

namespace stagekd {

// Soft classifier output plus its normalized entropy in [0, 1].
struct SoftLabel {
  std::vector<double> probs;
  double uncertainty = 0.0;
};

double normalized_entropy(const std::vector<double>& probs);

struct PerturbParams {
  double magnitude = 0.3;     // perturbation strength in [0, 1]
  double anomaly_rate = 0.0;  // chance a frame is replaced by unrelated noise
};

// Pluggable frame source. The default bounded stochastic perturbations
// (photometric jitter, crop-resize, noise) stand in for a learned generator;
// an external one can be plugged through `external_fn`.
struct FrameGenerator {
  enum class Kind { stochastic_perturbation, external };
  Kind kind = Kind::stochastic_perturbation;
  PerturbParams params;
  std::function<Tensor(const Tensor& image, std::uint64_t frame_seed)> external_fn;
};

// Simulated video clip: frames with per-frame soft labels and weights, plus
// the weighted-aggregate package label.
struct LabelPackage {
  std::string source_id;
  std::vector<Tensor> frames;
  std::vector<SoftLabel> labels;
  std::vector<double> weights;  // >= 0, sum to 1
  SoftLabel aggregated;
};

enum class WeightScheme { uniform, confidence };
const char* weight_scheme_name(WeightScheme s);
WeightScheme weight_scheme_from_name(const std::string& name);

// Softmax (T=1) of the pretrained model's logits plus normalized entropy.
SoftLabel original_label(const Tensor& image, Network& pretrained);
SoftLabel original_label(const Tensor& image, const NetworkSpec& spec,
                         const TrainedWeights& pretrained);

// Frame 0 is the unmodified source; later frames are perturbed copies.
// Deterministic per (image, seed).
std::vector<Tensor> generate_frames(const Tensor& image, int count,
                                    const FrameGenerator& gen, std::uint64_t seed);

// Labels with uncertainty <= threshold, order preserved; never empty (the
// minimum-uncertainty label is retained as a floor).
std::vector<SoftLabel> select_reliable(const std::vector<SoftLabel>& labels,
                                       double threshold);
std::vector<int> select_reliable_indices(const std::vector<SoftLabel>& labels,
                                         double threshold);

LabelPackage aggregate_package(const std::vector<Tensor>& frames,
                               const std::vector<SoftLabel>& labels, WeightScheme scheme);

// One package-store record. Frames are not stored; they are regenerated from
// (source_index, seed, params) on load.
struct PackageRecord {
  std::string source_id;
  int source_index = 0;
  int true_label = 0;
  std::uint64_t seed = 0;
  int frame_count = 0;
  std::string scheme;
  PerturbParams params;
  std::vector<int> kept;  // frame indices kept by the reliability filter
  std::vector<SoftLabel> labels;  // per kept frame
  std::vector<double> weights;
  SoftLabel aggregated;
};

// store layout: <dir>/packages.jsonl plus <dir>/packages.idx
void write_package_store(const std::string& dir, const std::vector<PackageRecord>& records);
std::vector<PackageRecord> read_package_store(const std::string& dir);

struct PackagerConfig {
  int count = 8;
  double threshold = 0.7;
  WeightScheme scheme = WeightScheme::confidence;
  FrameGenerator generator;
};

// Full pipeline over a dataset: frames -> per-frame labels -> reliability
// selection -> weighted aggregation.
std::vector<PackageRecord> build_packages(const Dataset& data, const NetworkSpec& spec,
                                          const TrainedWeights& pretrained,
                                          const PackagerConfig& cfg, std::uint64_t seed);

// Training view of a package store: source images with the aggregated soft
// labels as targets.
Dataset packages_to_dataset(const Dataset& source, const std::vector<PackageRecord>& records);

}  // namespace stagekd

#endif
