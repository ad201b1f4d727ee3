#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "stagekd/errors.hpp"
#include "stagekd/model.hpp"

using namespace stagekd;
namespace fs = std::filesystem;

namespace {

// Independent layer-by-layer parameter accounting, re-derived from the
// architecture rules rather than the Network internals.
std::int64_t analytic_param_count(const NetworkSpec& raw) {
  NetworkSpec s = raw;
  s.finalize();
  const int per = s.family == Family::plain_cnn ? 3 : 6;
  const int b = std::max(1, static_cast<int>(std::lround((s.depth - 2) / static_cast<double>(per))));
  auto ch = [&](double base) {
    return std::max(1, static_cast<int>(std::lround(base * s.width)));
  };
  const int c1 = ch(16), c2 = ch(32), c3 = ch(64);
  auto conv = [](int cin, int cout, int k) {
    return static_cast<std::int64_t>(cout) * cin * k * k + cout;
  };

  std::int64_t total = conv(s.in_channels, c1, 3);  // stem
  int prev = c1;
  for (int stage = 0; stage < 3; ++stage) {
    int c = stage == 0 ? c1 : (stage == 1 ? c2 : c3);
    int stride = stage == 0 ? 1 : 2;
    for (int j = 0; j < b; ++j) {
      int st = j == 0 ? stride : 1;
      if (s.family == Family::plain_cnn) {
        total += conv(prev, c, 3);
      } else {
        total += conv(prev, c, 3) + conv(c, c, 3);
        if (st != 1 || prev != c) total += conv(prev, c, 1);
      }
      prev = c;
    }
  }
  total += static_cast<std::int64_t>(s.num_classes) * c3 + s.num_classes;  // head
  return total;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("stagekd_model_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("build is deterministic per (spec, seed)") {
  NetworkSpec spec;
  spec.family = Family::residual_cnn;
  spec.depth = 8;
  spec.width = 1.0;
  spec.num_classes = 8;

  TrainedWeights a = build(spec, 42);
  TrainedWeights b = build(spec, 42);
  CHECK(weights_hash(a) == weights_hash(b));
  for (const auto& [name, t] : a.entries) {
    const Tensor& u = b.entries.at(name);
    for (std::int64_t i = 0; i < t.size(); ++i) CHECK(t[i] == u[i]);
  }

  TrainedWeights c = build(spec, 43);
  CHECK(weights_hash(a) != weights_hash(c));
}

TEST_CASE("parameter counts match the analytic sum") {
  NetworkSpec res;
  res.family = Family::residual_cnn;
  res.depth = 8;
  res.width = 1.0;
  res.num_classes = 10;
  CHECK(param_count(build(res, 1)) == analytic_param_count(res));

  NetworkSpec deep = res;
  deep.depth = 14;
  deep.width = 2.0;
  CHECK(param_count(build(deep, 1)) == analytic_param_count(deep));

  NetworkSpec plain;
  plain.family = Family::plain_cnn;
  plain.depth = 5;
  plain.width = 0.5;
  plain.num_classes = 8;
  CHECK(param_count(build(plain, 1)) == analytic_param_count(plain));

  NetworkSpec tiny = plain;
  tiny.width = 0.25;
  tiny.depth = 4;
  CHECK(param_count(build(tiny, 1)) == analytic_param_count(tiny));
}

TEST_CASE("forward contract: zero logits, determinism, taps") {
  NetworkSpec spec;
  spec.family = Family::residual_cnn;
  spec.depth = 8;
  spec.width = 0.5;
  spec.num_classes = 4;
  spec.finalize();

  TrainedWeights w = build(spec, 7);
  // zero input through a zero-initialized final layer -> zero logits
  w.entries.at("fc.w").zero();
  w.entries.at("fc.b").zero();
  Tensor zero({2, 3, 16, 16});
  auto outs = forward(spec, w, zero);
  REQUIRE(outs.size() == 2);
  for (const auto& o : outs)
    for (double v : o.logits) CHECK(v == doctest::Approx(0.0));

  // eval-mode forward is deterministic and yields one feature per tap
  TrainedWeights w2 = build(spec, 7);
  Tensor x({3, 3, 16, 16});
  Rng rng(5);
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.0, 1.0);
  auto r1 = forward(spec, w2, x);
  auto r2 = forward(spec, w2, x);
  REQUIRE(r1.size() == 3);
  CHECK(r1[0].features.size() == spec.tap_names.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    for (std::size_t c = 0; c < r1[i].logits.size(); ++c)
      CHECK(r1[i].logits[c] == r2[i].logits[c]);
    for (std::size_t t = 0; t < r1[i].features.size(); ++t) {
      CHECK(r1[i].features[t].layer_name == spec.tap_names[t]);
      for (std::int64_t j = 0; j < r1[i].features[t].data.size(); ++j)
        CHECK(r1[i].features[t].data[j] == r2[i].features[t].data[j]);
    }
  }

  // tap channel widths follow the stage widths (16,32,64 scaled by 0.5)
  Network net(spec);
  CHECK(net.tap_channels("s1.out") == 8);
  CHECK(net.tap_channels("s2.out") == 16);
  CHECK(net.tap_channels("s3.out") == 32);
  CHECK_THROWS_AS(net.tap_channels("nope"), InputError);

  // spatial sizes halve per downsampling stage
  Network::BatchOut bo = net.forward(x, false);
  CHECK(bo.taps[1].dim(2) == 16);  // s1.out
  CHECK(bo.taps[3].dim(2) == 8);   // s2.out
  CHECK(bo.taps[5].dim(2) == 4);   // s3.out
}

TEST_CASE("checkpoint round trip and fingerprint checks") {
  NetworkSpec spec;
  spec.family = Family::plain_cnn;
  spec.depth = 5;
  spec.width = 0.5;
  spec.num_classes = 6;
  spec.finalize();
  TrainedWeights w = build(spec, 11);

  fs::path dir = temp_dir("ckpt");
  std::string path = (dir / "checkpoint").string();
  save_checkpoint(path, spec, w);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.spec.depth == spec.depth);
  CHECK(ck.spec.family == spec.family);
  CHECK(ck.weights.spec_fingerprint == w.spec_fingerprint);
  CHECK(weights_hash(ck.weights) == weights_hash(w));

  // loading into a different architecture is an input error
  NetworkSpec other = spec;
  other.depth = 8;
  other.tap_names.clear();
  other.finalize();
  Network net(other);
  CHECK_THROWS_AS(net.load(ck.weights), InputError);

  // fingerprint is sensitive to the architecture fields
  CHECK(spec_fingerprint(spec) != spec_fingerprint(other));

  // corrupt magic is rejected
  std::string bad = (dir / "bad").string();
  std::ofstream os(bad, std::ios::binary);
  os << "NOPEnope";
  os.close();
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);

  // saving weights under a mismatched spec is rejected
  CHECK_THROWS_AS(save_checkpoint(path, other, w), InputError);
}

TEST_CASE("network load rejects missing or extra parameters") {
  NetworkSpec spec;
  spec.family = Family::plain_cnn;
  spec.depth = 5;
  spec.width = 0.25;
  spec.num_classes = 4;
  spec.finalize();
  TrainedWeights w = build(spec, 3);

  Network net(spec);
  TrainedWeights missing = w;
  missing.entries.erase("fc.w");
  CHECK_THROWS_AS(net.load(missing), InputError);

  TrainedWeights extra = w;
  extra.entries["ghost"] = Tensor({1});
  CHECK_THROWS_AS(net.load(extra), InputError);

  TrainedWeights wrong_shape = w;
  wrong_shape.entries.at("fc.b") = Tensor({spec.num_classes + 1});
  CHECK_THROWS_AS(net.load(wrong_shape), InputError);
}

TEST_CASE("spec validation") {
  NetworkSpec bad;
  bad.depth = 1;
  CHECK_THROWS_AS(bad.finalize(), ConfigError);
  NetworkSpec neg;
  neg.width = -1.0;
  CHECK_THROWS_AS(neg.finalize(), ConfigError);
  NetworkSpec dup;
  dup.tap_names = {"s1.out", "s1.out"};
  CHECK_THROWS_AS(dup.finalize(), ConfigError);
  NetworkSpec ghost_tap;
  ghost_tap.tap_names = {"s9.out"};
  CHECK_THROWS_AS(Network{ghost_tap}, ConfigError);
}
