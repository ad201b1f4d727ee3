#ifndef STAGEKD_MODEL_HPP
#define STAGEKD_MODEL_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stagekd/losses.hpp"
#include "stagekd/tensor.hpp"

namespace stagekd {

enum class Family { plain_cnn, residual_cnn };

const char* family_name(Family f);
Family family_from_name(const std::string& name);

// Desk-scale CNN families with three stages at strides 1/2/2 and base
// channel widths {16, 32, 64} scaled by `width`. Each stage exposes two
// taps: "sN.in" after the stage's first unit and "sN.out" at the stage end,
// so relation pairs stay spatially matched without resizing.
struct NetworkSpec {
  Family family = Family::residual_cnn;
  int depth = 8;           // plain: 2 + 3b convs, residual: 2 + 6b convs
  double width = 1.0;      // channel multiplier
  int num_classes = 8;
  int in_channels = 3;
  std::vector<std::string> tap_names;  // empty -> default six stage taps

  void finalize();  // fills default tap_names, validates
  int blocks_per_stage() const;
  std::vector<int> stage_channels() const;
};

std::string spec_fingerprint(const NetworkSpec& spec);

// Flat named parameter collection; the unit of cascade hand-off, averaging
// and checkpointing.
struct TrainedWeights {
  std::map<std::string, Tensor> entries;
  std::string spec_fingerprint;
};

std::int64_t param_count(const TrainedWeights& w);
// Content hash over all tensors in name order; used for hand-off audits.
std::string weights_hash(const TrainedWeights& w);

// Deterministically He-initialized weights for the spec.
TrainedWeights build(const NetworkSpec& spec, std::uint64_t seed);

struct TapOutput {
  LogitVector logits;
  std::vector<FeatureMap> features;  // ordered as spec.tap_names
};

// Stateful runner: owns the parameter tensors plus the activation caches a
// backward pass needs. Exporting/importing TrainedWeights keeps the
// functional hand-off surface.
class Network {
 public:
  explicit Network(NetworkSpec spec);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;

  const NetworkSpec& spec() const;
  const std::string& fingerprint() const;

  void init(std::uint64_t seed);
  void load(const TrainedWeights& w);  // throws InputError on fingerprint mismatch
  TrainedWeights snapshot() const;

  struct BatchOut {
    Tensor logits;             // N × classes
    std::vector<Tensor> taps;  // per tap name: N × C × H × W
  };
  // cache=true retains activations for a following backward().
  BatchOut forward(const Tensor& batch, bool cache);

  void zero_grad();
  // dlogits is N × classes; tap_grads maps tap name -> N × C × H × W.
  void backward(const Tensor& dlogits, const std::map<std::string, Tensor>& tap_grads);

  std::map<std::string, Tensor*> params();
  std::map<std::string, Tensor*> grads();
  std::int64_t param_count() const;
  int tap_channels(const std::string& tap_name) const;
  const std::vector<std::string>& tap_names() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Eval-mode forward returning one TapOutput per sample.
std::vector<TapOutput> forward(const NetworkSpec& spec, const TrainedWeights& weights,
                               const Tensor& batch);

// Versioned named-tensor checkpoint with the spec and its fingerprint in the
// header. Writes are atomic (temp file + rename).
void save_checkpoint(const std::string& path, const NetworkSpec& spec,
                     const TrainedWeights& weights);
struct Checkpoint {
  NetworkSpec spec;
  TrainedWeights weights;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace stagekd

#endif
