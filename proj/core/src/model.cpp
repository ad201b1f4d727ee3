#include "stagekd/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "stagekd/errors.hpp"

namespace stagekd {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr int kStages = 3;
const int kBaseChannels[kStages] = {16, 32, 64};

int round_channels(double base, double width) {
  return std::max(1, static_cast<int>(std::lround(base * width)));
}
}  // namespace

const char* family_name(Family f) {
  return f == Family::plain_cnn ? "plain_cnn" : "residual_cnn";
}

Family family_from_name(const std::string& name) {
  if (name == "plain_cnn") return Family::plain_cnn;
  if (name == "residual_cnn") return Family::residual_cnn;
  throw ConfigError("unknown network family: " + name);
}

int NetworkSpec::blocks_per_stage() const {
  int per = family == Family::plain_cnn ? 3 : 6;
  return std::max(1, static_cast<int>(std::lround((depth - 2) / static_cast<double>(per))));
}

std::vector<int> NetworkSpec::stage_channels() const {
  std::vector<int> c(kStages);
  for (int s = 0; s < kStages; ++s) c[s] = round_channels(kBaseChannels[s], width);
  return c;
}

void NetworkSpec::finalize() {
  if (depth < 2) throw ConfigError("network depth must be >= 2");
  if (width <= 0.0) throw ConfigError("network width must be positive");
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  if (in_channels < 1) throw ConfigError("need at least 1 input channel");
  if (tap_names.empty()) {
    for (int s = 1; s <= kStages; ++s) {
      tap_names.push_back("s" + std::to_string(s) + ".in");
      tap_names.push_back("s" + std::to_string(s) + ".out");
    }
  }
  for (std::size_t i = 0; i < tap_names.size(); ++i)
    for (std::size_t j = i + 1; j < tap_names.size(); ++j)
      if (tap_names[i] == tap_names[j]) throw ConfigError("duplicate tap name: " + tap_names[i]);
}

std::string spec_fingerprint(const NetworkSpec& spec) {
  char buf[64];
  std::string s = family_name(spec.family);
  s += "|d=" + std::to_string(spec.depth);
  std::snprintf(buf, sizeof(buf), "|w=%.17g", spec.width);
  s += buf;
  s += "|c=" + std::to_string(spec.num_classes);
  s += "|i=" + std::to_string(spec.in_channels);
  s += "|taps=";
  for (const auto& t : spec.tap_names) {
    s += t;
    s += ',';
  }
  std::uint64_t h = fnv1a(s.data(), s.size());
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::int64_t param_count(const TrainedWeights& w) {
  std::int64_t n = 0;
  for (const auto& [name, t] : w.entries) n += t.size();
  return n;
}

std::string weights_hash(const TrainedWeights& w) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : w.entries) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.data(), static_cast<std::size_t>(t.size()) * sizeof(double), h);
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Graph construction: a flat list of primitive nodes over activation slots.

struct Network::Impl {
  enum class Kind { conv, relu, add, gap, fc };

  struct Node {
    Kind kind;
    int in0 = -1, in1 = -1, out = -1;
    // conv/fc only
    std::string pname;
    int cin = 0, cout = 0, k = 0, stride = 1, pad = 0;
  };

  NetworkSpec spec;
  std::string fingerprint;
  std::vector<Node> nodes;
  int num_slots = 0;
  std::vector<std::pair<std::string, int>> taps;  // (tap name, slot), in tap order
  std::map<std::string, int> tap_channel_count;

  std::vector<std::string> param_order;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> grads;

  // forward caches
  std::vector<Tensor> slots;
  bool cached = false;

  int new_slot() { return num_slots++; }

  void add_conv(const std::string& pname, int cin, int cout, int k, int stride, int pad,
                int in_slot, int* out_slot) {
    Node n;
    n.kind = Kind::conv;
    n.pname = pname;
    n.cin = cin;
    n.cout = cout;
    n.k = k;
    n.stride = stride;
    n.pad = pad;
    n.in0 = in_slot;
    n.out = new_slot();
    *out_slot = n.out;
    nodes.push_back(n);
    params[pname + ".w"] = Tensor({cout, cin, k, k});
    params[pname + ".b"] = Tensor({cout});
    param_order.push_back(pname + ".w");
    param_order.push_back(pname + ".b");
  }

  void add_relu(int in_slot, int* out_slot) {
    Node n;
    n.kind = Kind::relu;
    n.in0 = in_slot;
    n.out = new_slot();
    *out_slot = n.out;
    nodes.push_back(n);
  }

  void add_add(int a, int b, int* out_slot) {
    Node n;
    n.kind = Kind::add;
    n.in0 = a;
    n.in1 = b;
    n.out = new_slot();
    *out_slot = n.out;
    nodes.push_back(n);
  }

  void build() {
    const auto ch = spec.stage_channels();
    const int b = spec.blocks_per_stage();
    int cur = new_slot();  // slot 0: network input

    int prev_c = spec.in_channels;
    add_conv("stem", prev_c, ch[0], 3, 1, 1, cur, &cur);
    add_relu(cur, &cur);
    prev_c = ch[0];

    std::map<std::string, int> tap_slots;
    for (int s = 0; s < kStages; ++s) {
      int first_stride = (s == 0) ? 1 : 2;
      std::string sname = "s" + std::to_string(s + 1);
      for (int j = 0; j < b; ++j) {
        int stride = (j == 0) ? first_stride : 1;
        std::string base = sname + ".u" + std::to_string(j);
        if (spec.family == Family::plain_cnn) {
          add_conv(base, prev_c, ch[s], 3, stride, 1, cur, &cur);
          add_relu(cur, &cur);
        } else {
          int block_in = cur;
          int mid;
          add_conv(base + ".c1", prev_c, ch[s], 3, stride, 1, block_in, &mid);
          add_relu(mid, &mid);
          int main_out;
          add_conv(base + ".c2", ch[s], ch[s], 3, 1, 1, mid, &main_out);
          int skip = block_in;
          if (stride != 1 || prev_c != ch[s])
            add_conv(base + ".proj", prev_c, ch[s], 1, stride, 0, block_in, &skip);
          add_add(main_out, skip, &cur);
          add_relu(cur, &cur);
        }
        prev_c = ch[s];
        if (j == 0) tap_slots[sname + ".in"] = cur;
        if (j == b - 1) tap_slots[sname + ".out"] = cur;
      }
      tap_channel_count[sname + ".in"] = ch[s];
      tap_channel_count[sname + ".out"] = ch[s];
    }

    for (const auto& name : spec.tap_names) {
      auto it = tap_slots.find(name);
      if (it == tap_slots.end()) throw ConfigError("unknown tap name in spec: " + name);
      taps.push_back({name, it->second});
    }

    // head: GAP then linear classifier
    Node g;
    g.kind = Kind::gap;
    g.in0 = cur;
    g.out = new_slot();
    nodes.push_back(g);
    cur = g.out;

    Node f;
    f.kind = Kind::fc;
    f.pname = "fc";
    f.cin = prev_c;
    f.cout = spec.num_classes;
    f.in0 = cur;
    f.out = new_slot();
    nodes.push_back(f);
    params["fc.w"] = Tensor({spec.num_classes, prev_c});
    params["fc.b"] = Tensor({spec.num_classes});
    param_order.push_back("fc.w");
    param_order.push_back("fc.b");
  }

  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (const auto& name : param_order) {
      Tensor& t = params[name];
      if (name.size() > 2 && name.substr(name.size() - 2) == ".b") {
        t.zero();
      } else {
        // He fan-in scaling; fan_in = product of dims past the first
        std::int64_t fan_in = 1;
        for (int d = 1; d < t.ndim(); ++d) fan_in *= t.dim(d);
        double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
      }
    }
  }

  static void im2col(const double* x, int C, int H, int W, int k, int stride, int pad,
                     int Ho, int Wo, double* cols) {
    // cols is (C*k*k) x (Ho*Wo), row-major
    const int HoWo = Ho * Wo;
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double* row = cols + (static_cast<std::int64_t>(c) * k * k + ky * k + kx) * HoWo;
          for (int oy = 0; oy < Ho; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) {
              for (int ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = 0.0;
              continue;
            }
            const double* xrow = x + (static_cast<std::int64_t>(c) * H + iy) * W;
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride + kx - pad;
              row[oy * Wo + ox] = (ix >= 0 && ix < W) ? xrow[ix] : 0.0;
            }
          }
        }
  }

  static void col2im(const double* cols, int C, int H, int W, int k, int stride, int pad,
                     int Ho, int Wo, double* dx) {
    const int HoWo = Ho * Wo;
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double* row = cols + (static_cast<std::int64_t>(c) * k * k + ky * k + kx) * HoWo;
          for (int oy = 0; oy < Ho; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            double* xrow = dx + (static_cast<std::int64_t>(c) * H + iy) * W;
            for (int ox = 0; ox < Wo; ++ox) {
              int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < W) xrow[ix] += row[oy * Wo + ox];
            }
          }
        }
  }

  static int out_size(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
  }

  void forward(const Tensor& x, bool keep) {
    if (x.ndim() != 4) throw InputError("forward: batch must be N×C×H×W");
    if (x.dim(1) != spec.in_channels) throw InputError("forward: input channel mismatch");
    const int N = x.dim(0);
    slots.assign(static_cast<std::size_t>(num_slots), Tensor());
    slots[0] = x;

    for (const Node& n : nodes) {
      const Tensor& in = slots[static_cast<std::size_t>(n.in0)];
      switch (n.kind) {
        case Kind::conv: {
          const int H = in.dim(2), W = in.dim(3);
          const int Ho = out_size(H, n.k, n.stride, n.pad);
          const int Wo = out_size(W, n.k, n.stride, n.pad);
          Tensor out({N, n.cout, Ho, Wo});
          const Tensor& wt = params[n.pname + ".w"];
          const Tensor& bt = params[n.pname + ".b"];
          const int ckk = n.cin * n.k * n.k;
          const int howo = Ho * Wo;
          std::vector<double> cols(static_cast<std::size_t>(ckk) * howo);
          Eigen::Map<const RowMat> W_mat(wt.data(), n.cout, ckk);
          for (int i = 0; i < N; ++i) {
            im2col(in.data() + static_cast<std::int64_t>(i) * n.cin * H * W, n.cin, H, W,
                   n.k, n.stride, n.pad, Ho, Wo, cols.data());
            Eigen::Map<const RowMat> C_mat(cols.data(), ckk, howo);
            Eigen::Map<RowMat> Y(out.data() + static_cast<std::int64_t>(i) * n.cout * howo,
                                 n.cout, howo);
            Y.noalias() = W_mat * C_mat;
            for (int c = 0; c < n.cout; ++c)
              Y.row(c).array() += bt[c];
          }
          slots[static_cast<std::size_t>(n.out)] = std::move(out);
          break;
        }
        case Kind::relu: {
          Tensor out = in;
          for (std::int64_t i = 0; i < out.size(); ++i)
            if (out[i] < 0.0) out[i] = 0.0;
          slots[static_cast<std::size_t>(n.out)] = std::move(out);
          break;
        }
        case Kind::add: {
          Tensor out = in;
          out += slots[static_cast<std::size_t>(n.in1)];
          slots[static_cast<std::size_t>(n.out)] = std::move(out);
          break;
        }
        case Kind::gap: {
          const int C = in.dim(1), HW = in.dim(2) * in.dim(3);
          Tensor out({N, C});
          for (int i = 0; i < N; ++i)
            for (int c = 0; c < C; ++c) {
              const double* p = in.data() + (static_cast<std::int64_t>(i) * C + c) * HW;
              double s = 0.0;
              for (int j = 0; j < HW; ++j) s += p[j];
              out.at(i, c) = s / HW;
            }
          slots[static_cast<std::size_t>(n.out)] = std::move(out);
          break;
        }
        case Kind::fc: {
          const Tensor& wt = params["fc.w"];
          const Tensor& bt = params["fc.b"];
          Tensor out({N, n.cout});
          Eigen::Map<const RowMat> W_mat(wt.data(), n.cout, n.cin);
          Eigen::Map<const RowMat> X(in.data(), N, n.cin);
          Eigen::Map<RowMat> Y(out.data(), N, n.cout);
          Y.noalias() = X * W_mat.transpose();
          for (int i = 0; i < N; ++i)
            for (int c = 0; c < n.cout; ++c) out.at(i, c) += bt[c];
          slots[static_cast<std::size_t>(n.out)] = std::move(out);
          break;
        }
      }
    }
    cached = keep;
  }

  void backward(const Tensor& dlogits, const std::map<std::string, Tensor>& tap_grads) {
    if (!cached) throw TrainingError("backward called without a cached forward pass");
    std::vector<Tensor> dslots(static_cast<std::size_t>(num_slots));
    auto grad_of = [&](int slot) -> Tensor& {
      Tensor& g = dslots[static_cast<std::size_t>(slot)];
      if (g.empty()) g = Tensor(slots[static_cast<std::size_t>(slot)].shape());
      return g;
    };

    grad_of(nodes.back().out) += dlogits;
    for (const auto& [name, g] : tap_grads) {
      int slot = -1;
      for (const auto& [tname, tslot] : taps)
        if (tname == name) slot = tslot;
      if (slot < 0) throw InputError("backward: unknown tap name " + name);
      grad_of(slot) += g;
    }

    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
      const Node& n = *it;
      Tensor& dy = dslots[static_cast<std::size_t>(n.out)];
      if (dy.empty()) continue;  // nothing flowed into this node
      const Tensor& in = slots[static_cast<std::size_t>(n.in0)];
      switch (n.kind) {
        case Kind::conv: {
          const int N = in.dim(0), H = in.dim(2), W = in.dim(3);
          const int Ho = dy.dim(2), Wo = dy.dim(3);
          const int ckk = n.cin * n.k * n.k;
          const int howo = Ho * Wo;
          Tensor& dw = grads[n.pname + ".w"];
          Tensor& db = grads[n.pname + ".b"];
          Tensor& dx = grad_of(n.in0);
          const Tensor& wt = params[n.pname + ".w"];
          std::vector<double> cols(static_cast<std::size_t>(ckk) * howo);
          std::vector<double> dcols(static_cast<std::size_t>(ckk) * howo);
          Eigen::Map<const RowMat> W_mat(wt.data(), n.cout, ckk);
          Eigen::Map<RowMat> dW(dw.data(), n.cout, ckk);
          for (int i = 0; i < N; ++i) {
            const double* xin = in.data() + static_cast<std::int64_t>(i) * n.cin * H * W;
            im2col(xin, n.cin, H, W, n.k, n.stride, n.pad, Ho, Wo, cols.data());
            Eigen::Map<const RowMat> C_mat(cols.data(), ckk, howo);
            Eigen::Map<const RowMat> dY(dy.data() + static_cast<std::int64_t>(i) * n.cout * howo,
                                        n.cout, howo);
            dW.noalias() += dY * C_mat.transpose();
            for (int c = 0; c < n.cout; ++c) db[c] += dY.row(c).sum();
            Eigen::Map<RowMat> dC(dcols.data(), ckk, howo);
            dC.noalias() = W_mat.transpose() * dY;
            col2im(dcols.data(), n.cin, H, W, n.k, n.stride, n.pad, Ho, Wo,
                   dx.data() + static_cast<std::int64_t>(i) * n.cin * H * W);
          }
          break;
        }
        case Kind::relu: {
          const Tensor& out = slots[static_cast<std::size_t>(n.out)];
          Tensor& dx = grad_of(n.in0);
          for (std::int64_t i = 0; i < out.size(); ++i)
            if (out[i] > 0.0) dx[i] += dy[i];
          break;
        }
        case Kind::add: {
          grad_of(n.in0) += dy;
          grad_of(n.in1) += dy;
          break;
        }
        case Kind::gap: {
          const int N = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
          Tensor& dx = grad_of(n.in0);
          for (int i = 0; i < N; ++i)
            for (int c = 0; c < C; ++c) {
              double g = dy.at(i, c) / HW;
              double* p = dx.data() + (static_cast<std::int64_t>(i) * C + c) * HW;
              for (int j = 0; j < HW; ++j) p[j] += g;
            }
          break;
        }
        case Kind::fc: {
          const int N = in.dim(0);
          Tensor& dw = grads["fc.w"];
          Tensor& db = grads["fc.b"];
          Tensor& dx = grad_of(n.in0);
          const Tensor& wt = params["fc.w"];
          Eigen::Map<const RowMat> X(in.data(), N, n.cin);
          Eigen::Map<const RowMat> dY(dy.data(), N, n.cout);
          Eigen::Map<RowMat> dW(dw.data(), n.cout, n.cin);
          Eigen::Map<RowMat> dX(dx.data(), N, n.cin);
          Eigen::Map<const RowMat> W_mat(wt.data(), n.cout, n.cin);
          dW.noalias() += dY.transpose() * X;
          for (int c = 0; c < n.cout; ++c) db[c] += dY.col(c).sum();
          dX.noalias() += dY * W_mat;
          break;
        }
      }
    }
  }
};

Network::Network(NetworkSpec spec) : impl_(std::make_unique<Impl>()) {
  spec.finalize();
  impl_->spec = spec;
  impl_->fingerprint = stagekd::spec_fingerprint(spec);
  impl_->build();
  for (const auto& [name, t] : impl_->params) impl_->grads[name] = Tensor(t.shape());
}

Network::~Network() = default;
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;

const NetworkSpec& Network::spec() const { return impl_->spec; }
const std::string& Network::fingerprint() const { return impl_->fingerprint; }

void Network::init(std::uint64_t seed) { impl_->init(seed); }

void Network::load(const TrainedWeights& w) {
  if (w.spec_fingerprint != impl_->fingerprint)
    throw InputError("weights fingerprint does not match network spec");
  for (auto& [name, t] : impl_->params) {
    auto it = w.entries.find(name);
    if (it == w.entries.end()) throw InputError("missing parameter in weights: " + name);
    if (!it->second.same_shape(t)) throw InputError("parameter shape mismatch: " + name);
    t = it->second;
  }
  if (w.entries.size() != impl_->params.size())
    throw InputError("weights carry unknown extra parameters");
}

TrainedWeights Network::snapshot() const {
  TrainedWeights w;
  w.spec_fingerprint = impl_->fingerprint;
  w.entries = impl_->params;
  return w;
}

Network::BatchOut Network::forward(const Tensor& batch, bool cache) {
  impl_->forward(batch, cache);
  BatchOut out;
  out.logits = impl_->slots[static_cast<std::size_t>(impl_->nodes.back().out)];
  out.taps.reserve(impl_->taps.size());
  for (const auto& [name, slot] : impl_->taps)
    out.taps.push_back(impl_->slots[static_cast<std::size_t>(slot)]);
  if (!cache) {
    impl_->slots.clear();
    impl_->cached = false;
  }
  return out;
}

void Network::zero_grad() {
  for (auto& [name, g] : impl_->grads) g.zero();
}

void Network::backward(const Tensor& dlogits, const std::map<std::string, Tensor>& tap_grads) {
  impl_->backward(dlogits, tap_grads);
}

std::map<std::string, Tensor*> Network::params() {
  std::map<std::string, Tensor*> out;
  for (auto& [name, t] : impl_->params) out[name] = &t;
  return out;
}

std::map<std::string, Tensor*> Network::grads() {
  std::map<std::string, Tensor*> out;
  for (auto& [name, t] : impl_->grads) out[name] = &t;
  return out;
}

std::int64_t Network::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : impl_->params) n += t.size();
  return n;
}

int Network::tap_channels(const std::string& tap_name) const {
  auto it = impl_->tap_channel_count.find(tap_name);
  if (it == impl_->tap_channel_count.end())
    throw InputError("unknown tap name: " + tap_name);
  return it->second;
}

const std::vector<std::string>& Network::tap_names() const { return impl_->spec.tap_names; }

TrainedWeights build(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkSpec s = spec;
  s.finalize();
  Network net(s);
  net.init(seed);
  return net.snapshot();
}

std::vector<TapOutput> forward(const NetworkSpec& spec, const TrainedWeights& weights,
                               const Tensor& batch) {
  NetworkSpec s = spec;
  s.finalize();
  Network net(s);
  net.load(weights);
  Network::BatchOut out = net.forward(batch, false);
  const int N = batch.dim(0);
  std::vector<TapOutput> result(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    TapOutput& to = result[static_cast<std::size_t>(i)];
    to.logits.resize(static_cast<std::size_t>(s.num_classes));
    for (int c = 0; c < s.num_classes; ++c) to.logits[static_cast<std::size_t>(c)] = out.logits.at(i, c);
    for (std::size_t t = 0; t < out.taps.size(); ++t) {
      const Tensor& tap = out.taps[t];
      const int C = tap.dim(1), H = tap.dim(2), W = tap.dim(3);
      FeatureMap fm;
      fm.layer_name = s.tap_names[t];
      fm.data = Tensor({C, H, W});
      const double* src = tap.data() + static_cast<std::int64_t>(i) * C * H * W;
      std::copy(src, src + static_cast<std::int64_t>(C) * H * W, fm.data.data());
      to.features.push_back(std::move(fm));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint IO. Layout (little endian):
//   "SKDW" | u32 version | spec fields | fingerprint | tensor table

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::int32_t read_i32(std::istream& is) {
  std::int32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::string read_str(std::istream& is) {
  std::uint64_t n = read_u64(is);
  if (n > (1ull << 20)) throw IoError("checkpoint string field too large");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}
}  // namespace

void save_checkpoint(const std::string& path, const NetworkSpec& spec,
                     const TrainedWeights& weights) {
  NetworkSpec s = spec;
  s.finalize();
  if (weights.spec_fingerprint != stagekd::spec_fingerprint(s))
    throw InputError("save_checkpoint: weights do not belong to this spec");

  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";

  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write("SKDW", 4);
    write_u32(os, kCheckpointVersion);
    write_str(os, family_name(s.family));
    write_i32(os, s.depth);
    write_f64(os, s.width);
    write_i32(os, s.num_classes);
    write_i32(os, s.in_channels);
    write_u64(os, s.tap_names.size());
    for (const auto& t : s.tap_names) write_str(os, t);
    write_str(os, weights.spec_fingerprint);
    write_u64(os, weights.entries.size());
    for (const auto& [name, t] : weights.entries) {
      write_str(os, name);
      write_u32(os, static_cast<std::uint32_t>(t.ndim()));
      for (int d = 0; d < t.ndim(); ++d) write_i32(os, t.dim(d));
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * static_cast<std::int64_t>(sizeof(double))));
    }
    if (!os) throw IoError("short write while saving checkpoint: " + path);
  }
  fs::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SKDW", 4) != 0)
    throw IoError("not a stagekd checkpoint: " + path);
  std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  ck.spec.family = family_from_name(read_str(is));
  ck.spec.depth = read_i32(is);
  ck.spec.width = read_f64(is);
  ck.spec.num_classes = read_i32(is);
  ck.spec.in_channels = read_i32(is);
  std::uint64_t ntaps = read_u64(is);
  for (std::uint64_t i = 0; i < ntaps; ++i) ck.spec.tap_names.push_back(read_str(is));
  ck.spec.finalize();

  ck.weights.spec_fingerprint = read_str(is);
  if (ck.weights.spec_fingerprint != stagekd::spec_fingerprint(ck.spec))
    throw IoError("checkpoint fingerprint does not match its own spec header");

  std::uint64_t ntensors = read_u64(is);
  for (std::uint64_t i = 0; i < ntensors; ++i) {
    std::string name = read_str(is);
    std::uint32_t nd = read_u32(is);
    if (nd > 8) throw IoError("corrupt tensor rank in checkpoint");
    std::vector<int> shape(nd);
    for (auto& d : shape) d = read_i32(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * static_cast<std::int64_t>(sizeof(double))));
    ck.weights.entries[name] = std::move(t);
  }
  if (!is) throw IoError("truncated checkpoint: " + path);
  return ck;
}

}  // namespace stagekd
