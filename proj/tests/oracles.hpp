// Naive-loop reference implementations used only by the tests. These are
// written directly from the loss definitions, independent of the library
// code paths they check.
#ifndef STAGEKD_TESTS_ORACLES_HPP
#define STAGEKD_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "stagekd/losses.hpp"
#include "stagekd/tensor.hpp"

namespace oracle {

inline std::vector<double> softmax(const std::vector<double>& logits, double T) {
  std::vector<double> out(logits.size());
  double denom = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) denom += std::exp(logits[j] / T);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = std::exp(logits[i] / T) / denom;
  return out;
}

inline double cross_entropy_hard(const std::vector<double>& logits, int label) {
  std::vector<double> p = softmax(logits, 1.0);
  return -std::log(p[static_cast<std::size_t>(label)]);
}

inline double cross_entropy_soft(const std::vector<double>& logits,
                                 const std::vector<double>& q) {
  std::vector<double> p = softmax(logits, 1.0);
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (q[i] > 0.0) h -= q[i] * std::log(p[i]);
  return h;
}

inline double kl(const std::vector<double>& pt, const std::vector<double>& ps) {
  double s = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    if (pt[i] <= 0.0) continue;
    s += pt[i] * std::log(pt[i] / std::max(ps[i], 1e-12));
  }
  return s;
}

inline double response(const std::vector<double>& s, const std::vector<double>& t,
                       int label, double lambda, double T, bool t2) {
  double ce = cross_entropy_hard(s, label);
  double k = kl(softmax(t, T), softmax(s, T));
  return ce + lambda * (t2 ? T * T : 1.0) * k;
}

// attention map via explicit triple loop
inline std::vector<double> attention(const stagekd::Tensor& f) {
  int C = f.dim(0), H = f.dim(1), W = f.dim(2);
  std::vector<double> a(static_cast<std::size_t>(H) * W, 0.0);
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        a[static_cast<std::size_t>(h) * W + w] += f.at(c, h, w) * f.at(c, h, w);
  return a;
}

inline double normalized_dist(std::vector<double> a, std::vector<double> b) {
  double na = 0.0, nb = 0.0;
  for (double v : a) na += v * v;
  for (double v : b) nb += v * v;
  na = std::max(std::sqrt(na), 1e-12);
  nb = std::max(std::sqrt(nb), 1e-12);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = a[i] / na - b[i] / nb;
    d += diff * diff;
  }
  return std::sqrt(d);
}

inline double at_dist(const stagekd::Tensor& ft, const stagekd::Tensor& fs) {
  return normalized_dist(attention(ft), attention(fs));
}

inline std::vector<int> topk(const stagekd::Tensor& f, int k) {
  int C = f.dim(0), H = f.dim(1), W = f.dim(2);
  std::vector<std::pair<double, int>> norms;
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) s += f.at(c, h, w) * f.at(c, h, w);
    norms.push_back({std::sqrt(s), c});
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(norms[static_cast<std::size_t>(i)].second);
  return out;
}

inline double df_dist(const stagekd::Tensor& ft, const stagekd::Tensor& fs, int k) {
  int H = ft.dim(1), W = ft.dim(2);
  std::vector<int> sel = topk(ft, k);
  double total = 0.0;
  for (int c : sel) {
    std::vector<double> at, as;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        at.push_back(ft.at(c, h, w) * ft.at(c, h, w));
        as.push_back(fs.at(c, h, w) * fs.at(c, h, w));
      }
    total += normalized_dist(at, as);
  }
  return total;
}

// FSP via quadruple loop
inline stagekd::Tensor fsp(const stagekd::Tensor& fin, const stagekd::Tensor& fout) {
  int Ci = fin.dim(0), Co = fout.dim(0), H = fin.dim(1), W = fin.dim(2);
  stagekd::Tensor g({Ci, Co});
  for (int m = 0; m < Ci; ++m)
    for (int n = 0; n < Co; ++n) {
      double s = 0.0;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) s += fin.at(m, h, w) * fout.at(n, h, w);
      g.at(m, n) = s / (H * W);
    }
  return g;
}

inline double fsp_mse(const stagekd::Tensor& gt, const stagekd::Tensor& gs) {
  double s = 0.0;
  for (std::int64_t i = 0; i < gt.size(); ++i) {
    double d = gt[i] - gs[i];
    s += d * d;
  }
  return s / static_cast<double>(gt.size());
}

inline double rskd_total(double ce, double rp, double fe, double re, double eta,
                         double xi, double tau_w) {
  return ce + eta * rp + xi * fe + tau_w * re;
}

// random helpers for instance generation
inline stagekd::Tensor random_map(stagekd::Rng& rng, int c, int h, int w, double lo = -1.5,
                                  double hi = 1.5) {
  stagekd::Tensor t({c, h, w});
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline std::vector<double> random_logits(stagekd::Rng& rng, int c, double span = 3.0) {
  std::vector<double> v(static_cast<std::size_t>(c));
  for (double& x : v) x = rng.uniform(-span, span);
  return v;
}

inline std::vector<double> random_distribution(stagekd::Rng& rng, int c) {
  std::vector<double> v(static_cast<std::size_t>(c));
  double s = 0.0;
  for (double& x : v) {
    x = rng.uniform(0.05, 1.0);
    s += x;
  }
  for (double& x : v) x /= s;
  return v;
}

}  // namespace oracle

#endif
