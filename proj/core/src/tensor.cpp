#include "stagekd/tensor.hpp"

#include <cmath>
#include <numeric>

#include "stagekd/errors.hpp"

namespace stagekd {

namespace {
std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = shape.empty() ? 0 : 1;
  for (int d : shape) {
    if (d < 0) throw InputError("tensor dimension must be non-negative");
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_size(shape_)), 0.0);
}

Tensor::Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (shape_size(t.shape_) != static_cast<std::int64_t>(values.size()))
    throw InputError("tensor data length does not match shape");
  t.data_ = std::move(values);
  return t;
}

double& Tensor::at(int i) { return data_[static_cast<std::size_t>(i)]; }
double& Tensor::at(int i, int j) {
  return data_[static_cast<std::size_t>(i) * shape_[1] + j];
}
double& Tensor::at(int i, int j, int k) {
  return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
}
double& Tensor::at(int i, int j, int k, int l) {
  return data_[((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
double Tensor::at(int i) const { return data_[static_cast<std::size_t>(i)]; }
double Tensor::at(int i, int j) const {
  return data_[static_cast<std::size_t>(i) * shape_[1] + j];
}
double Tensor::at(int i, int j, int k) const {
  return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(int i, int j, int k, int l) const {
  return data_[((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) throw InputError("tensor shape mismatch in +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (!same_shape(other)) throw InputError("tensor shape mismatch in -=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  // 53 significant bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw ParameterError("uniform_int: empty range");
  std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

Rng Rng::fork(std::uint64_t salt) const {
  std::uint64_t mixed = seed_ ^ (salt * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull);
  return Rng(fnv1a(&mixed, sizeof(mixed)));
}

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace stagekd
