#ifndef STAGEKD_TENSOR_HPP
#define STAGEKD_TENSOR_HPP

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace stagekd {

// Dense row-major tensor of doubles. Small helper type shared by every
// module; heavy matrix products go through Eigen maps over the flat buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::initializer_list<int> shape);

  static Tensor full(std::vector<int> shape, double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values);

  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Indexed access for up to 4 dims; callers keep the hot loops flat.
  double& at(int i);
  double& at(int i, int j);
  double& at(int i, int j, int k);
  double& at(int i, int j, int k, int l);
  double at(int i) const;
  double at(int i, int j) const;
  double at(int i, int j, int k) const;
  double at(int i, int j, int k, int l) const;

  void fill(double v);
  void zero() { fill(0.0); }
  bool all_finite() const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double s);

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// Deterministic RNG: std::mt19937_64 (whose output sequence is fixed by the
// standard) plus explicit uniform/Box-Muller transforms, so sampled weights
// are bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  int uniform_int(int lo, int hi);       // inclusive bounds
  double normal();                       // standard normal
  double normal(double mean, double stddev);

  // Derive an independent stream, e.g. one per branch or per sample.
  Rng fork(std::uint64_t salt) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over a byte string; used for spec fingerprints.
std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace stagekd

#endif
