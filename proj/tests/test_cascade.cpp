#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "stagekd/distill.hpp"
#include "stagekd/errors.hpp"

using namespace stagekd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

DataConfig tiny_data() {
  DataConfig dc;
  dc.classes = 4;
  dc.image_size = 12;
  dc.train_size = 48;
  dc.val_size = 16;
  dc.test_size = 16;
  dc.noise = 0.1;
  return dc;
}

NetworkSpec teacher_spec() {
  NetworkSpec s;
  s.family = Family::residual_cnn;
  s.depth = 8;
  s.width = 1.0;
  s.num_classes = 4;
  s.finalize();
  return s;
}

NetworkSpec student_spec() {
  NetworkSpec s;
  s.family = Family::plain_cnn;
  s.depth = 5;
  s.width = 0.5;
  s.num_classes = 4;
  s.finalize();
  return s;
}

TrainingSchedule tiny_schedule(int epochs = 1) {
  TrainingSchedule sc;
  sc.epochs = epochs;
  sc.batch_size = 16;
  sc.lr = 0.02;
  sc.seed = 3;
  return sc;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("stagekd_cascade_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is);
  return json::parse(is);
}

}  // namespace

TEST_CASE("integrate_weights: identity, symmetry, oracle, permutations") {
  NetworkSpec spec = student_spec();
  TrainedWeights a = build(spec, 1), b = build(spec, 2), c = build(spec, 3);

  // three identical sets -> the same weights
  TrainedWeights same = integrate_weights({a, a, a});
  CHECK(weights_hash(same) == weights_hash(a));

  // {w, -w} -> zero weights
  TrainedWeights neg = a;
  for (auto& [name, t] : neg.entries) t *= -1.0;
  TrainedWeights zero = integrate_weights({a, neg});
  for (const auto& [name, t] : zero.entries)
    for (std::int64_t i = 0; i < t.size(); ++i) CHECK(t[i] == doctest::Approx(0.0));

  // elementwise mean against a loop oracle
  TrainedWeights mean = integrate_weights({a, b, c});
  for (const auto& [name, t] : mean.entries) {
    const Tensor &ta = a.entries.at(name), &tb = b.entries.at(name), &tc = c.entries.at(name);
    for (std::int64_t i = 0; i < t.size(); ++i)
      CHECK(t[i] == doctest::Approx((ta[i] + tb[i] + tc[i]) / 3.0).epsilon(1e-12));
  }

  // permutation invariance and single-element idempotence
  TrainedWeights perm = integrate_weights({c, a, b});
  CHECK(weights_hash(perm) == weights_hash(mean));
  CHECK(weights_hash(integrate_weights({b})) == weights_hash(b));

  // fingerprint mismatch is rejected
  TrainedWeights other = build(teacher_spec(), 1);
  CHECK_THROWS_AS(integrate_weights({a, other}), InputError);
}

TEST_CASE("ladders: shape, capacity monotonicity, interpolation") {
  CascadeLadder l0 = make_ladder(teacher_spec(), student_spec(), 0);
  CHECK(l0.rungs.size() == 2);
  CHECK(l0.cascade_n() == 0);

  CascadeLadder l2 = make_ladder(teacher_spec(), student_spec(), 2, "reinit");
  CHECK(l2.rungs.size() == 4);
  // reinit assistants are the student spec
  CHECK(spec_fingerprint(l2.rungs[1]) == spec_fingerprint(student_spec()));
  CHECK(spec_fingerprint(l2.rungs[2]) == spec_fingerprint(student_spec()));

  NetworkSpec wide_teacher = teacher_spec();
  wide_teacher.width = 2.0;
  wide_teacher.tap_names.clear();
  wide_teacher.finalize();
  NetworkSpec tiny_student = student_spec();
  tiny_student.width = 0.25;
  tiny_student.tap_names.clear();
  tiny_student.finalize();
  CascadeLadder li = make_ladder(wide_teacher, tiny_student, 1, "interp");
  CHECK(li.rungs.size() == 3);
  // interpolated assistant sits strictly between the endpoints
  Network t(li.rungs[0]), m(li.rungs[1]), s(li.rungs[2]);
  CHECK(t.param_count() > m.param_count());
  CHECK(m.param_count() > s.param_count());

  CHECK_THROWS_AS(make_ladder(tiny_student, wide_teacher, 0), ConfigError);
  CHECK_THROWS_AS(make_ladder(wide_teacher, tiny_student, 1, "bogus"), ConfigError);
}

TEST_CASE("distill_once with zero epochs returns the initialization") {
  DataConfig dc = tiny_data();
  Dataset train = make_synthetic(dc, "train", 7);
  Dataset val = make_synthetic(dc, "val", 7);
  NetworkSpec ts = teacher_spec(), ss = teacher_spec();  // same architecture
  TrainedWeights tw = build(ts, 1);

  DistillOptions opts;
  opts.weights.lambda_ = 0.0;
  TrainingSchedule sched = tiny_schedule(0);
  TrainedWeights out = distill_once(ts, tw, ss, Recipe::single(SubstageKind::response),
                                    opts, train, val, sched, "", 99);
  CHECK(weights_hash(out) == weights_hash(build(ss, 99)));
}

TEST_CASE("N=0 cascade is exactly a single distillation") {
  DataConfig dc = tiny_data();
  Dataset train = make_synthetic(dc, "train", 7);
  Dataset val = make_synthetic(dc, "val", 7);
  NetworkSpec ts = teacher_spec(), ss = student_spec();
  TrainedWeights tw = build(ts, 1);
  DistillOptions opts;
  TrainingSchedule sched = tiny_schedule(1);

  TrainedWeights direct = distill_once(ts, tw, ss, Recipe::single(SubstageKind::response),
                                       opts, train, val, sched, "", 5);
  CascadeLadder ladder = make_ladder(ts, ss, 0);
  TrainedWeights via = cascade(ladder, tw, Recipe::single(SubstageKind::response), opts,
                               train, val, sched, "", 5);
  CHECK(weights_hash(direct) == weights_hash(via));
}

TEST_CASE("skd: run count, artifacts, chained teacher hashes, degenerate merge") {
  DataConfig dc = tiny_data();
  Dataset train = make_synthetic(dc, "train", 7);
  Dataset val = make_synthetic(dc, "val", 7);

  DistillJob job;
  job.teacher_spec = teacher_spec();
  job.teacher_weights = build(job.teacher_spec, 1);
  job.student_spec = student_spec();
  job.cascade_n = 1;
  job.schedule = tiny_schedule(1);
  job.seed = 11;
  job.options.weights.k_channels = 8;

  fs::path dir = temp_dir("skd");
  StagedResult res = skd_train(job, train, val, dir.string());

  // exactly 3 branches x (N+1) rungs, each with the full artifact set
  int rung_count = 0;
  for (const char* branch : {"branch-response", "branch-feature", "branch-relation"}) {
    for (int r = 1; r <= 2; ++r) {
      fs::path rung = dir / branch / ("rung-" + std::to_string(r));
      CHECK(fs::exists(rung / "checkpoint"));
      CHECK(fs::exists(rung / "metrics.jsonl"));
      CHECK(fs::exists(rung / "config-snapshot"));
      ++rung_count;
    }
    CHECK(!fs::exists(dir / branch / "rung-3"));
  }
  CHECK(rung_count == 6);

  // hand-off integrity: rung 2's recorded teacher hash == rung 1's output hash
  for (const char* branch : {"branch-response", "branch-feature", "branch-relation"}) {
    Checkpoint rung1 = load_checkpoint((dir / branch / "rung-1" / "checkpoint").string());
    json snap2 = read_json_file(dir / branch / "rung-2" / "config-snapshot");
    CHECK(snap2.at("teacher_weights_hash").get<std::string>() == weights_hash(rung1.weights));
    // and the spec-level fingerprint chain matches as well
    CHECK(snap2.at("teacher_fingerprint").get<std::string>() == rung1.weights.spec_fingerprint);
  }

  // integrated artifact present and evaluable
  CHECK(fs::exists(dir / "integrated" / "checkpoint"));
  CHECK(res.branches.size() == 3);

  // reproducibility: the same job re-run lands on identical weights
  fs::path dir2 = temp_dir("skd_repeat");
  StagedResult res2 = skd_train(job, train, val, dir2.string());
  CHECK(weights_hash(res.integrated) == weights_hash(res2.integrated));

  // degenerate case: averaging three copies of one branch output is that output
  TrainedWeights one = res.branches[0].student;
  CHECK(weights_hash(integrate_weights({one, one, one})) == weights_hash(one));
}

TEST_CASE("rskd: CS branches log components that recompose within 1e-6") {
  DataConfig dc = tiny_data();
  Dataset train = make_synthetic(dc, "train", 7);
  Dataset val = make_synthetic(dc, "val", 7);

  DistillJob job;
  job.teacher_spec = teacher_spec();
  job.teacher_weights = build(job.teacher_spec, 1);
  job.student_spec = student_spec();
  job.cascade_n = 0;
  job.schedule = tiny_schedule(2);
  job.seed = 13;
  job.options.weights.k_channels = 8;
  job.options.weights.alpha = 20.0;  // desk-scale balance
  job.options.weights.beta = 30.0;

  fs::path dir = temp_dir("rskd");
  StagedResult res = rskd_train(job, train, val, dir.string());
  CHECK(res.branches.size() == 3);
  CHECK(fs::exists(dir / "integrated" / "checkpoint"));

  int audited = 0;
  for (const char* branch : {"branch-rp_cs", "branch-fe_cs", "branch-re_cs"}) {
    fs::path rung = dir / branch / "rung-1";
    json snap = read_json_file(rung / "config-snapshot");
    LossWeights w;
    w.eta = snap.at("loss_weights").at("eta").get<double>();
    w.xi = snap.at("loss_weights").at("xi").get<double>();
    w.tau_w = snap.at("loss_weights").at("tau_w").get<double>();
    auto steps = read_steps((rung / "steps.jsonl").string());
    REQUIRE(!steps.empty());
    for (const auto& s : steps) {
      double recomposed = rskd_total_loss(s.ce, s.response, s.feature, s.relation, w);
      CHECK(std::abs(recomposed - s.total) <= 1e-6);
      ++audited;
    }
  }
  CHECK(audited >= 6);

  // adapters exist for the width-mismatched taps: extra params recorded
  json snap = read_json_file(dir / "branch-rp_cs" / "rung-1" / "config-snapshot");
  // teacher widths 16/32/64, student 8/16/32 -> six adapters (in+out per stage)
  // 16*8+16 + 32*16+32 + 64*32+64 = 144+544+2112 doubled across .in/.out
  CHECK(snap.at("extra_params").get<long long>() == 2 * (144 + 544 + 2112));
  json fe_snap = read_json_file(dir / "branch-fe_cs" / "rung-1" / "config-snapshot");
  CHECK(fe_snap.at("extra_params").get<long long>() == 144 + 544 + 2112);
}

TEST_CASE("response-only distillation needs no adapters") {
  DistillOptions opts;
  DistillObjective obj(teacher_spec(), build(teacher_spec(), 1), student_spec(),
                       Recipe::single(SubstageKind::response), opts, nullptr, 9);
  CHECK(obj.extra_param_count() == 0);
  CHECK(obj.extra_params().empty());
}

TEST_CASE("matched-width students need no adapters even for CS recipes") {
  NetworkSpec ss = teacher_spec();  // same widths as the teacher
  DistillOptions opts;
  opts.weights.k_channels = 8;
  DistillObjective obj(teacher_spec(), build(teacher_spec(), 1), ss,
                       Recipe::combination_stage(
                           {SubstageKind::response, {SubstageKind::feature, SubstageKind::relation}}),
                       opts, nullptr, 9);
  CHECK(obj.extra_param_count() == 0);
}

TEST_CASE("effective top-K clamps to narrow teacher taps and is recorded") {
  DistillOptions opts;
  opts.weights.k_channels = 16;
  DistillObjective obj(teacher_spec(), build(teacher_spec(), 1), student_spec(),
                       Recipe::single(SubstageKind::feature), opts, nullptr, 9);
  auto k = obj.effective_k();
  CHECK(k.at("s1.out") == 16);  // teacher s1 width is exactly 16
  CHECK(k.at("s2.out") == 16);
  CHECK(k.at("s3.out") == 16);

  opts.weights.k_channels = 24;
  DistillObjective obj2(teacher_spec(), build(teacher_spec(), 1), student_spec(),
                        Recipe::single(SubstageKind::feature), opts, nullptr, 9);
  auto k2 = obj2.effective_k();
  CHECK(k2.at("s1.out") == 16);  // clamped
  CHECK(k2.at("s2.out") == 24);
}

TEST_CASE("cascade aborts with the failing rung index on divergence") {
  DataConfig dc = tiny_data();
  Dataset train = make_synthetic(dc, "train", 7);
  Dataset val = make_synthetic(dc, "val", 7);
  NetworkSpec ts = teacher_spec(), ss = student_spec();
  TrainedWeights tw = build(ts, 1);
  DistillOptions opts;
  TrainingSchedule sched = tiny_schedule(3);
  sched.lr = 1e9;  // guaranteed blow-up
  CascadeLadder ladder = make_ladder(ts, ss, 0);
  try {
    cascade(ladder, tw, Recipe::single(SubstageKind::response), opts, train, val, sched,
            "", 5);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("rung 1") != std::string::npos);
  }
}

TEST_CASE("unknown taps and class mismatches are configuration errors") {
  DistillOptions opts;
  opts.feature_taps = {"s9.out"};
  CHECK_THROWS_AS(DistillObjective(teacher_spec(), build(teacher_spec(), 1), student_spec(),
                                   Recipe::single(SubstageKind::feature), opts, nullptr, 9),
                  ConfigError);

  NetworkSpec wrong = student_spec();
  wrong.num_classes = 6;
  wrong.tap_names.clear();
  wrong.finalize();
  DistillOptions ok;
  CHECK_THROWS_AS(DistillObjective(teacher_spec(), build(teacher_spec(), 1), wrong,
                                   Recipe::single(SubstageKind::response), ok, nullptr, 9),
                  ConfigError);

  CHECK_THROWS_AS(Recipe::combination_stage({SubstageKind::response, {}}), ConfigError);
}

TEST_CASE("teacher caching does not change the loss trajectory") {
  DataConfig dc = tiny_data();
  dc.train_size = 32;
  Dataset train = make_synthetic(dc, "train", 7);
  Dataset val = make_synthetic(dc, "val", 7);
  NetworkSpec ts = teacher_spec(), ss = student_spec();
  TrainedWeights tw = build(ts, 1);
  TrainingSchedule sched = tiny_schedule(1);

  DistillOptions cached;
  cached.cache_teacher = true;
  cached.weights.k_channels = 8;
  DistillOptions uncached = cached;
  uncached.cache_teacher = false;

  Recipe recipe = Recipe::combination_stage(
      {SubstageKind::response, {SubstageKind::feature, SubstageKind::relation}});
  TrainedWeights a = distill_once(ts, tw, ss, recipe, cached, train, val, sched, "", 5);
  TrainedWeights b = distill_once(ts, tw, ss, recipe, uncached, train, val, sched, "", 5);
  CHECK(weights_hash(a) == weights_hash(b));
}
