#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "stagekd/data.hpp"
#include "stagekd/errors.hpp"
#include "stagekd/train.hpp"

using namespace stagekd;
namespace fs = std::filesystem;

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

NetworkSpec tiny_net(int classes) {
  NetworkSpec s;
  s.family = Family::plain_cnn;
  s.depth = 5;
  s.width = 0.25;
  s.num_classes = classes;
  s.finalize();
  return s;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("stagekd_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("synthetic dataset is deterministic, balanced and bounded") {
  DataConfig dc = tiny_data();
  Dataset a = make_synthetic(dc, "train", 5);
  Dataset b = make_synthetic(dc, "train", 5);
  Dataset c = make_synthetic(dc, "train", 6);
  CHECK(a.size() == 48);
  for (std::int64_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i] == b.images[i]);
    CHECK(a.images[i] >= 0.0);
    CHECK(a.images[i] <= 1.0);
  }
  bool differs = false;
  for (std::int64_t i = 0; i < a.images.size() && !differs; ++i)
    differs = a.images[i] != c.images[i];
  CHECK(differs);

  std::vector<int> counts(4, 0);
  for (int label : a.labels) counts[static_cast<std::size_t>(label)]++;
  for (int n : counts) CHECK(n == 12);

  // val split uses an independent stream
  Dataset v = make_synthetic(dc, "val", 5);
  bool split_differs = false;
  for (std::int64_t i = 0; i < v.images.size() && !split_differs; ++i)
    split_differs = v.images[i] != a.images[i];
  CHECK(split_differs);
}

TEST_CASE("image folder round trip") {
  DataConfig dc = tiny_data();
  dc.train_size = 16;
  Dataset d = make_synthetic(dc, "train", 9);
  fs::path root = temp_dir("folder");
  export_image_folder(d, root.string(), "train");

  Dataset back = load_image_folder(root.string(), "train");
  CHECK(back.size() == d.size());
  CHECK(back.num_classes == d.num_classes);
  // folder ordering groups by class, so compare via order-invariant sums
  double sum_orig = 0.0, sum_back = 0.0;
  for (std::int64_t i = 0; i < d.images.size(); ++i) sum_orig += d.images[i];
  for (std::int64_t i = 0; i < back.images.size(); ++i) sum_back += back.images[i];
  // 8-bit quantization: mean per-pixel error bounded by 1/255
  CHECK(std::abs(sum_orig - sum_back) / d.images.size() < 1.0 / 255.0);

  CHECK_THROWS_AS(load_image_folder(root.string(), "nope"), IoError);
}

TEST_CASE("ppm io round trips within quantization") {
  Tensor img({3, 6, 5});
  Rng rng(3);
  for (std::int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniform(0.0, 1.0);
  fs::path dir = temp_dir("ppm");
  save_ppm((dir / "x.ppm").string(), img);
  Tensor back = load_ppm((dir / "x.ppm").string());
  REQUIRE(back.same_shape(img));
  for (std::int64_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-9);
}

TEST_CASE("augment_batch keeps shape and is deterministic") {
  DataConfig dc = tiny_data();
  Dataset d = make_synthetic(dc, "train", 5);
  Tensor batch({4, 3, 12, 12});
  std::copy(d.images.data(), d.images.data() + batch.size(), batch.data());

  Rng r1(17), r2(17);
  Tensor a = augment_batch(batch, 2, r1);
  Tensor b = augment_batch(batch, 2, r2);
  CHECK(a.same_shape(batch));
  for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  Rng r3(1);
  Tensor same = augment_batch(batch, 0, r3);
  for (std::int64_t i = 0; i < same.size(); ++i) CHECK(same[i] == batch[i]);
}

TEST_CASE("evaluate_logits matches a hand count and tie rules") {
  // 10 samples, 3 classes, hand-counted: top1 hits on rows 0,2,4,5,9 (5/10),
  // top5 (=top3 here ranks all) always hits
  Tensor logits = Tensor::from(
      {10, 3},
      {
          2.0, 1.0, 0.0,  // label 0 -> top1 hit
          2.0, 1.0, 0.0,  // label 1 -> miss
          0.0, 3.0, 1.0,  // label 1 -> hit
          1.0, 1.0, 1.0,  // label 1 -> tie, lowest index wins -> class 0 -> miss
          1.0, 1.0, 1.0,  // label 0 -> tie -> class 0 -> hit
          0.0, 0.5, 2.0,  // label 2 -> hit
          0.0, 0.5, 2.0,  // label 0 -> miss
          5.0, 4.0, 4.5,  // label 2 -> miss
          1.0, 2.0, 3.0,  // label 0 -> miss
          1.0, 2.0, 3.0,  // label 2 -> hit
      });
  std::vector<int> labels{0, 1, 1, 1, 0, 2, 0, 2, 0, 2};
  EvalReport rep = evaluate_logits(logits, labels);
  CHECK(rep.top1 == doctest::Approx(50.0));
  CHECK(rep.top5 == doctest::Approx(100.0));  // C=3 <= 5, top5 counts everything
  CHECK(rep.n_samples == 10);
  // per-class: class0 2/4, class1 1/3, class2 2/3
  CHECK(rep.per_class_accuracy[0] == doctest::Approx(50.0));
  CHECK(rep.per_class_accuracy[1] == doctest::Approx(100.0 / 3));
  CHECK(rep.per_class_accuracy[2] == doctest::Approx(200.0 / 3));
  CHECK(rep.top1 <= rep.top5);
}

TEST_CASE("evaluate is deterministic and batch-size invariant") {
  DataConfig dc = tiny_data();
  Dataset d = make_synthetic(dc, "test", 5);
  NetworkSpec spec = tiny_net(4);
  TrainedWeights w = build(spec, 21);
  Network net(spec);
  net.load(w);
  EvalReport a = evaluate(net, d, 7);
  EvalReport b = evaluate(net, d, 16);
  CHECK(a.top1 == doctest::Approx(b.top1));
  CHECK(a.top5 == doctest::Approx(b.top5));
  CHECK(a.top1 <= a.top5);
}

TEST_CASE("pearson correlation: frozen oracle, symmetry, zero variance") {
  Tensor cols = Tensor::from({4, 3}, {1.0, 0.5, -0.2, 0.3, 0.8, 0.1, -0.5, 0.2, 0.9,
                                      0.7, -0.1, 0.4});
  Tensor corr = pearson_correlation(cols);
  CHECK(corr.at(0, 1) == doctest::Approx(0.05958435917242181).epsilon(1e-9));
  CHECK(corr.at(0, 2) == doctest::Approx(-0.8637362354919601).epsilon(1e-9));
  CHECK(corr.at(1, 2) == doctest::Approx(-0.5504818825631802).epsilon(1e-9));
  for (int i = 0; i < 3; ++i) {
    CHECK(corr.at(i, i) == doctest::Approx(1.0));
    for (int j = 0; j < 3; ++j) CHECK(corr.at(i, j) == doctest::Approx(corr.at(j, i)));
  }

  Tensor flat = Tensor::from({3, 2}, {1.0, 2.0, 1.0, 3.0, 1.0, 4.0});
  std::vector<int> zv;
  Tensor c2 = pearson_correlation(flat, &zv);
  REQUIRE(zv == std::vector<int>{0});
  CHECK(c2.at(0, 0) == doctest::Approx(1.0));
  CHECK(c2.at(0, 1) == doctest::Approx(0.0));
  CHECK(c2.at(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("correlation_report: identical nets give zero diff") {
  DataConfig dc = tiny_data();
  Dataset d = make_synthetic(dc, "test", 5);
  NetworkSpec spec = tiny_net(4);
  TrainedWeights w = build(spec, 33);
  CorrelationReport rep = correlation_report(spec, w, spec, w, d);
  CHECK(rep.diff_frobenius == doctest::Approx(0.0).epsilon(1e-12));
  for (std::int64_t i = 0; i < rep.diff.size(); ++i)
    CHECK(rep.diff[i] == doctest::Approx(0.0));
  for (int i = 0; i < 4; ++i) CHECK(rep.teacher_corr.at(i, i) == doctest::Approx(1.0));
}

TEST_CASE("train: zero epochs leaves weights untouched") {
  DataConfig dc = tiny_data();
  Dataset train = make_synthetic(dc, "train", 5);
  Dataset val = make_synthetic(dc, "val", 5);
  NetworkSpec spec = tiny_net(4);
  Network net(spec);
  net.init(9);
  std::string before = weights_hash(net.snapshot());

  SupervisedObjective obj;
  TrainingSchedule sched;
  sched.epochs = 0;
  TrainResult res = train_network(net, obj, train, val, sched);
  CHECK(weights_hash(res.final_weights) == before);
  CHECK(res.completed_epochs == 0);
}

TEST_CASE("train: loss decreases on an easy separable problem") {
  DataConfig dc = tiny_data();
  dc.classes = 2;
  dc.noise = 0.05;
  dc.train_size = 64;
  Dataset train = make_synthetic(dc, "train", 5);
  Dataset val = make_synthetic(dc, "val", 5);
  NetworkSpec spec = tiny_net(2);
  Network net(spec);
  net.init(9);

  SupervisedObjective obj;
  TrainingSchedule sched;
  sched.epochs = 4;
  sched.batch_size = 16;
  sched.lr = 0.05;
  sched.seed = 5;
  TrainResult res = train_network(net, obj, train, val, sched);
  double first = -1.0, last = -1.0;
  for (const auto& r : res.log)
    if (r.split == "train") {
      if (first < 0) first = r.loss_total;
      last = r.loss_total;
    }
  CHECK(first > 0.0);
  CHECK(last < first);
}

TEST_CASE("train: lr decays by exactly the configured factor") {
  DataConfig dc = tiny_data();
  dc.train_size = 16;
  Dataset train = make_synthetic(dc, "train", 5);
  Dataset val = make_synthetic(dc, "val", 5);
  NetworkSpec spec = tiny_net(4);
  Network net(spec);
  net.init(9);
  SupervisedObjective obj;
  TrainingSchedule sched;
  sched.epochs = 3;
  sched.batch_size = 16;
  sched.lr = 0.04;
  sched.lr_decay = 0.1;
  sched.decay_epochs = {1, 2};
  TrainResult res = train_network(net, obj, train, val, sched);
  std::vector<double> lrs;
  for (const auto& r : res.log)
    if (r.split == "train") lrs.push_back(r.lr);
  REQUIRE(lrs.size() == 3);
  CHECK(lrs[0] == doctest::Approx(0.04));
  CHECK(lrs[1] == doctest::Approx(0.004));
  CHECK(lrs[2] == doctest::Approx(0.0004));
}

TEST_CASE("metrics logs round trip and match the final eval") {
  DataConfig dc = tiny_data();
  dc.train_size = 32;
  Dataset train = make_synthetic(dc, "train", 5);
  Dataset val = make_synthetic(dc, "val", 5);
  NetworkSpec spec = tiny_net(4);
  Network net(spec);
  net.init(9);
  SupervisedObjective obj;
  TrainingSchedule sched;
  sched.epochs = 2;
  sched.batch_size = 16;
  fs::path dir = temp_dir("metrics");
  TrainResult res = train_network(net, obj, train, val, sched, dir.string());

  auto recs = read_metrics((dir / "metrics.jsonl").string());
  REQUIRE(recs.size() == res.log.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].epoch == res.log[i].epoch);
    CHECK(recs[i].split == res.log[i].split);
    CHECK(recs[i].loss_total == doctest::Approx(res.log[i].loss_total).epsilon(1e-12));
    CHECK(recs[i].top1 == doctest::Approx(res.log[i].top1));
    CHECK(recs[i].lr == doctest::Approx(res.log[i].lr));
  }

  // the final logged val top1 equals a fresh evaluation of the final weights
  EvalReport ev = evaluate(spec, res.final_weights, val);
  double logged = -1.0;
  for (const auto& r : res.log)
    if (r.split == "val") logged = r.top1;
  CHECK(logged == doctest::Approx(ev.top1));
}

namespace {
// objective that turns non-finite after a few steps
class ExplodingObjective final : public Objective {
 public:
  const char* name() const override { return "exploding"; }
  LossBreakdown compute(Network& net, const Tensor& x, const std::vector<int>& ids,
                        const std::vector<Target>& targets, bool backprop) override {
    LossBreakdown lb = inner_.compute(net, x, ids, targets, backprop);
    if (++calls_ > 3) lb.total = std::nan("");
    return lb;
  }

 private:
  SupervisedObjective inner_;
  int calls_ = 0;
};
}  // namespace

TEST_CASE("train: divergence aborts with the last-good checkpoint retained") {
  DataConfig dc = tiny_data();
  dc.train_size = 32;
  Dataset train = make_synthetic(dc, "train", 5);
  Dataset val = make_synthetic(dc, "val", 5);
  NetworkSpec spec = tiny_net(4);
  Network net(spec);
  net.init(9);
  ExplodingObjective obj;
  TrainingSchedule sched;
  sched.epochs = 5;
  sched.batch_size = 16;  // 2 steps per epoch -> explodes in epoch 1
  fs::path dir = temp_dir("diverge");
  CHECK_THROWS_AS(train_network(net, obj, train, val, sched, dir.string()), TrainingError);
  // last-good (epoch 0) weights were written and are loadable
  Checkpoint ck = load_checkpoint((dir / "checkpoint").string());
  CHECK(weights_hash(ck.weights) == weights_hash(net.snapshot()));
}

TEST_CASE("heatmap and csv exports") {
  Tensor m = Tensor::from({2, 2}, {1.0, -0.5, 0.25, 0.0});
  fs::path dir = temp_dir("export");
  write_matrix_csv((dir / "m.csv").string(), m);
  write_heatmap_ppm((dir / "m.ppm").string(), m);
  CHECK(fs::exists(dir / "m.csv"));
  Tensor img = load_ppm((dir / "m.ppm").string());
  CHECK(img.dim(0) == 3);
}
