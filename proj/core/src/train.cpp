#include "stagekd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "stagekd/errors.hpp"

namespace stagekd {

const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adam";
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer: " + name);
}

void TrainingSchedule::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

double TrainingSchedule::lr_at(int epoch) const {
  double v = lr;
  for (int e : decay_epochs)
    if (epoch >= e) v *= lr_decay;
  return v;
}

LossBreakdown SupervisedObjective::compute(Network& net, const Tensor& x,
                                           const std::vector<int>&,
                                           const std::vector<Target>& targets,
                                           bool backprop) {
  Network::BatchOut out = net.forward(x, backprop);
  if (!out.logits.all_finite())
    throw TrainingError("non-finite logits (diverged weights)");
  const int N = x.dim(0);
  const int C = out.logits.dim(1);
  Tensor dlogits({N, C});
  LossBreakdown lb;
  LogitVector logits(static_cast<std::size_t>(C)), grad;
  for (int i = 0; i < N; ++i) {
    for (int c = 0; c < C; ++c) logits[static_cast<std::size_t>(c)] = out.logits.at(i, c);
    double ce = cross_entropy(logits, targets[static_cast<std::size_t>(i)],
                              backprop ? &grad : nullptr);
    lb.ce += ce;
    if (backprop)
      for (int c = 0; c < C; ++c) dlogits.at(i, c) = grad[static_cast<std::size_t>(c)] / N;
  }
  lb.ce /= N;
  lb.total = lb.ce;
  if (backprop) net.backward(dlogits, {});
  return lb;
}

// ---------------------------------------------------------------------------
// Optimizers

namespace {

class Stepper {
 public:
  Stepper(std::vector<ParamRef> refs, const TrainingSchedule& sched)
      : refs_(std::move(refs)), sched_(sched) {
    if (sched_.optimizer == OptimizerKind::sgd_momentum) {
      velocity_.reserve(refs_.size());
      for (auto& r : refs_) velocity_.emplace_back(r.value->shape());
    } else {
      m_.reserve(refs_.size());
      v_.reserve(refs_.size());
      for (auto& r : refs_) {
        m_.emplace_back(r.value->shape());
        v_.emplace_back(r.value->shape());
      }
    }
  }

  void step(double lr) {
    ++t_;
    if (sched_.optimizer == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < refs_.size(); ++i) {
        Tensor& w = *refs_[i].value;
        Tensor& g = *refs_[i].grad;
        Tensor& vel = velocity_[i];
        for (std::int64_t j = 0; j < w.size(); ++j) {
          double grad = g[j] + sched_.weight_decay * w[j];
          vel[j] = sched_.momentum * vel[j] + grad;
          w[j] -= lr * vel[j];
        }
      }
    } else {
      const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      double bc1 = 1.0 - std::pow(b1, t_);
      double bc2 = 1.0 - std::pow(b2, t_);
      for (std::size_t i = 0; i < refs_.size(); ++i) {
        Tensor& w = *refs_[i].value;
        Tensor& g = *refs_[i].grad;
        for (std::int64_t j = 0; j < w.size(); ++j) {
          double grad = g[j] + sched_.weight_decay * w[j];
          m_[i][j] = b1 * m_[i][j] + (1 - b1) * grad;
          v_[i][j] = b2 * v_[i][j] + (1 - b2) * grad * grad;
          w[j] -= lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps);
        }
      }
    }
  }

 private:
  std::vector<ParamRef> refs_;
  TrainingSchedule sched_;
  std::vector<Tensor> velocity_;
  std::vector<Tensor> m_, v_;
  int t_ = 0;
};

Tensor gather_batch(const Dataset& data, const std::vector<int>& ids) {
  const int C = data.images.dim(1), H = data.images.dim(2), W = data.images.dim(3);
  const std::int64_t per = static_cast<std::int64_t>(C) * H * W;
  Tensor out({static_cast<int>(ids.size()), C, H, W});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(data.images.data() + ids[i] * per, data.images.data() + (ids[i] + 1) * per,
              out.data() + static_cast<std::int64_t>(i) * per);
  return out;
}

// rank of the true class under "lowest index wins" tie-breaking
int true_class_rank(const Tensor& logits, int row, int C, int label) {
  double lt = logits.at(row, label);
  int rank = 0;
  for (int c = 0; c < C; ++c) {
    if (c == label) continue;
    double v = logits.at(row, c);
    if (v > lt || (v == lt && c < label)) ++rank;
  }
  return rank;
}

}  // namespace

TrainResult train_network(Network& net, Objective& objective, const Dataset& train_data,
                          const Dataset& val_data, const TrainingSchedule& schedule,
                          const std::string& run_dir) {
  schedule.validate();
  if (train_data.size() < 1) throw InputError("train_network: empty training set");

  std::vector<ParamRef> refs;
  for (auto& [name, t] : net.params()) refs.push_back({name, t, nullptr});
  {
    auto gm = net.grads();
    for (auto& r : refs) r.grad = gm[r.name];
  }
  for (auto& r : objective.extra_params()) refs.push_back(r);
  Stepper stepper(refs, schedule);

  TrainResult result;
  result.final_weights = net.snapshot();
  result.best_weights = result.final_weights;
  TrainedWeights last_good = result.final_weights;

  const std::string metrics_path = run_dir.empty() ? "" : run_dir + "/metrics.jsonl";
  const std::string steps_path = run_dir.empty() ? "" : run_dir + "/steps.jsonl";

  std::vector<int> order(static_cast<std::size_t>(train_data.size()));
  std::iota(order.begin(), order.end(), 0);

  const int N = train_data.size();
  const int C = net.spec().num_classes;
  double total_batch_ms = 0.0;
  std::int64_t total_batches = 0;

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    Rng rng(Rng(schedule.seed).fork(static_cast<std::uint64_t>(epoch) + 101).next_u64());
    // deterministic Fisher-Yates shuffle
    for (int i = N - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);

    double lr = schedule.lr_at(epoch);
    LossBreakdown epoch_sum;
    std::vector<StepRecord> steps;
    auto t0 = std::chrono::steady_clock::now();
    int nsteps = 0;

    for (int start = 0; start < N; start += schedule.batch_size) {
      int end = std::min(N, start + schedule.batch_size);
      std::vector<int> ids(order.begin() + start, order.begin() + end);
      Tensor x = gather_batch(train_data, ids);
      if (schedule.augment) x = augment_batch(x, schedule.augment_pad, rng);
      std::vector<Target> targets;
      targets.reserve(ids.size());
      for (int id : ids) targets.push_back(train_data.target(id));

      net.zero_grad();
      for (auto& r : objective.extra_params()) r.grad->zero();
      LossBreakdown lb = objective.compute(net, x, ids, targets, true);

      if (!std::isfinite(lb.total)) {
        net.load(last_good);
        if (!run_dir.empty()) save_checkpoint(run_dir + "/checkpoint", net.spec(), last_good);
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) +
                            "; last-good weights retained");
      }
      stepper.step(lr);

      int bsz = static_cast<int>(ids.size());
      epoch_sum.total += lb.total * bsz;
      epoch_sum.ce += lb.ce * bsz;
      epoch_sum.response += lb.response * bsz;
      epoch_sum.feature += lb.feature * bsz;
      epoch_sum.relation += lb.relation * bsz;
      steps.push_back({epoch, nsteps, lb.ce, lb.response, lb.feature, lb.relation, lb.total});
      ++nsteps;
      ++total_batches;
    }

    auto t1 = std::chrono::steady_clock::now();
    double wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    total_batch_ms += wall_ms;

    // training-split accuracy from a dedicated eval pass keeps the metric
    // comparable across objectives
    EvalReport train_eval = evaluate(net, train_data, schedule.batch_size);

    MetricRecord train_rec;
    train_rec.epoch = epoch;
    train_rec.split = "train";
    train_rec.loss_total = epoch_sum.total / N;
    train_rec.loss_components = {{"ce", epoch_sum.ce / N},
                                 {"response", epoch_sum.response / N},
                                 {"feature", epoch_sum.feature / N},
                                 {"relation", epoch_sum.relation / N}};
    train_rec.top1 = train_eval.top1;
    train_rec.top5 = train_eval.top5;
    train_rec.wall_ms = wall_ms;
    train_rec.lr = lr;
    train_rec.steps = nsteps;
    result.log.push_back(train_rec);
    if (!metrics_path.empty()) append_metric(metrics_path, train_rec);
    if (!steps_path.empty()) append_steps(steps_path, steps);

    if (val_data.size() > 0) {
      auto tv0 = std::chrono::steady_clock::now();
      EvalReport val = evaluate(net, val_data, schedule.batch_size);
      // mean val cross entropy for the loss field
      Tensor vl = logits_matrix(net, val_data, schedule.batch_size);
      MetricRecord val_rec;
      val_rec.epoch = epoch;
      val_rec.split = "val";
      double vce = 0.0;
      LogitVector row(static_cast<std::size_t>(C));
      for (int i = 0; i < val_data.size(); ++i) {
        for (int c = 0; c < C; ++c) row[static_cast<std::size_t>(c)] = vl.at(i, c);
        vce += cross_entropy(row, val_data.target(i));
      }
      val_rec.loss_total = vce / val_data.size();
      val_rec.loss_components = {{"ce", val_rec.loss_total}};
      val_rec.top1 = val.top1;
      val_rec.top5 = val.top5;
      auto tv1 = std::chrono::steady_clock::now();
      val_rec.wall_ms = std::chrono::duration<double, std::milli>(tv1 - tv0).count();
      val_rec.lr = lr;
      val_rec.steps = 0;
      result.log.push_back(val_rec);
      if (!metrics_path.empty()) append_metric(metrics_path, val_rec);

      if (val.top1 >= result.best_val_top1) {
        result.best_val_top1 = val.top1;
        result.best_weights = net.snapshot();
      }
    }

    last_good = net.snapshot();
    result.completed_epochs = epoch + 1;
  }

  result.final_weights = net.snapshot();
  if (schedule.epochs == 0 || val_data.size() == 0) result.best_weights = result.final_weights;
  result.mean_batch_ms = total_batches > 0 ? total_batch_ms / total_batches : 0.0;
  return result;
}

EvalReport evaluate_logits(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.dim(0) != static_cast<int>(labels.size()))
    throw InputError("evaluate_logits: logits must be N×C matching labels");
  const int N = logits.dim(0), C = logits.dim(1);
  const int k5 = std::min(5, C);
  EvalReport rep;
  rep.n_samples = N;
  rep.per_class_accuracy.assign(static_cast<std::size_t>(C), 0.0);
  std::vector<int> per_class_total(static_cast<std::size_t>(C), 0);
  int c1 = 0, c5 = 0;
  for (int i = 0; i < N; ++i) {
    int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= C) throw InputError("evaluate_logits: label out of range");
    int rank = true_class_rank(logits, i, C, label);
    per_class_total[static_cast<std::size_t>(label)] += 1;
    if (rank < 1) {
      ++c1;
      rep.per_class_accuracy[static_cast<std::size_t>(label)] += 1.0;
    }
    if (rank < k5) ++c5;
  }
  for (int c = 0; c < C; ++c)
    if (per_class_total[static_cast<std::size_t>(c)] > 0)
      rep.per_class_accuracy[static_cast<std::size_t>(c)] *=
          100.0 / per_class_total[static_cast<std::size_t>(c)];
  rep.top1 = N ? 100.0 * c1 / N : 0.0;
  rep.top5 = N ? 100.0 * c5 / N : 0.0;
  return rep;
}

EvalReport evaluate(Network& net, const Dataset& data, int batch_size) {
  if (data.num_classes != net.spec().num_classes)
    throw InputError("evaluate: label space mismatch");
  return evaluate_logits(logits_matrix(net, data, batch_size), data.labels);
}

EvalReport evaluate(const NetworkSpec& spec, const TrainedWeights& weights,
                    const Dataset& data, int batch_size) {
  NetworkSpec s = spec;
  s.finalize();
  Network net(s);
  net.load(weights);
  return evaluate(net, data, batch_size);
}

EvalReport ensemble_evaluate(const std::vector<NetworkSpec>& specs,
                             const std::vector<TrainedWeights>& weights,
                             const Dataset& data, int batch_size) {
  if (specs.size() != weights.size() || specs.empty())
    throw InputError("ensemble_evaluate: need matching spec/weight lists");
  std::vector<Tensor> logit_mats;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    NetworkSpec s = specs[i];
    s.finalize();
    Network net(s);
    net.load(weights[i]);
    logit_mats.push_back(logits_matrix(net, data, batch_size));
  }
  Tensor mean = logit_mats[0];
  for (std::size_t i = 1; i < logit_mats.size(); ++i) mean += logit_mats[i];
  mean *= 1.0 / static_cast<double>(logit_mats.size());
  return evaluate_logits(mean, data.labels);
}

Tensor logits_matrix(Network& net, const Dataset& data, int batch_size) {
  const int C = net.spec().num_classes;
  Tensor out({data.size(), C});
  for (int start = 0; start < data.size(); start += batch_size) {
    int end = std::min(data.size(), start + batch_size);
    std::vector<int> ids(static_cast<std::size_t>(end - start));
    std::iota(ids.begin(), ids.end(), start);
    Tensor x = gather_batch(data, ids);
    Network::BatchOut b = net.forward(x, false);
    for (int i = 0; i < end - start; ++i)
      for (int c = 0; c < C; ++c) out.at(start + i, c) = b.logits.at(i, c);
  }
  return out;
}

Tensor pearson_correlation(const Tensor& columns, std::vector<int>* zero_var) {
  const int N = columns.dim(0), C = columns.dim(1);
  if (N < 2) throw InputError("pearson_correlation: need at least 2 rows");
  std::vector<double> mean(static_cast<std::size_t>(C), 0.0), sd(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < N; ++i) mean[static_cast<std::size_t>(c)] += columns.at(i, c);
    mean[static_cast<std::size_t>(c)] /= N;
  }
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int i = 0; i < N; ++i) {
      double d = columns.at(i, c) - mean[static_cast<std::size_t>(c)];
      s += d * d;
    }
    sd[static_cast<std::size_t>(c)] = std::sqrt(s);
  }
  Tensor corr({C, C});
  for (int a = 0; a < C; ++a) {
    bool za = sd[static_cast<std::size_t>(a)] < 1e-12;
    if (za && zero_var) zero_var->push_back(a);
    for (int b = 0; b < C; ++b) {
      bool zb = sd[static_cast<std::size_t>(b)] < 1e-12;
      if (a == b) {
        corr.at(a, b) = 1.0;
        continue;
      }
      if (za || zb) {
        corr.at(a, b) = 0.0;
        continue;
      }
      double cov = 0.0;
      for (int i = 0; i < N; ++i)
        cov += (columns.at(i, a) - mean[static_cast<std::size_t>(a)]) *
               (columns.at(i, b) - mean[static_cast<std::size_t>(b)]);
      corr.at(a, b) = cov / (sd[static_cast<std::size_t>(a)] * sd[static_cast<std::size_t>(b)]);
    }
  }
  return corr;
}

CorrelationReport correlation_report(const NetworkSpec& teacher_spec,
                                     const TrainedWeights& teacher_weights,
                                     const NetworkSpec& student_spec,
                                     const TrainedWeights& student_weights,
                                     const Dataset& data, int batch_size) {
  NetworkSpec ts = teacher_spec, ss = student_spec;
  ts.finalize();
  ss.finalize();
  if (ts.num_classes != ss.num_classes)
    throw InputError("correlation_report: label space mismatch");
  Network tn(ts), sn(ss);
  tn.load(teacher_weights);
  sn.load(student_weights);

  CorrelationReport rep;
  Tensor tl = logits_matrix(tn, data, batch_size);
  Tensor sl = logits_matrix(sn, data, batch_size);
  std::vector<int> zt, zs;
  rep.teacher_corr = pearson_correlation(tl, &zt);
  rep.student_corr = pearson_correlation(sl, &zs);
  rep.zero_variance_classes = zt;
  for (int c : zs)
    if (std::find(zt.begin(), zt.end(), c) == zt.end()) rep.zero_variance_classes.push_back(c);
  rep.diff = rep.teacher_corr;
  rep.diff -= rep.student_corr;
  double fro = 0.0;
  for (std::int64_t i = 0; i < rep.diff.size(); ++i) fro += rep.diff[i] * rep.diff[i];
  rep.diff_frobenius = std::sqrt(fro);
  return rep;
}

void write_matrix_csv(const std::string& path, const Tensor& m) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  for (int i = 0; i < m.dim(0); ++i) {
    for (int j = 0; j < m.dim(1); ++j) {
      os << m.at(i, j);
      if (j + 1 < m.dim(1)) os << ",";
    }
    os << "\n";
  }
}

void write_heatmap_ppm(const std::string& path, const Tensor& m) {
  const int H = m.dim(0), W = m.dim(1);
  const int cell = std::max(1, 256 / std::max(H, W));  // upscale small grids
  Tensor img({3, H * cell, W * cell});
  for (int y = 0; y < H * cell; ++y)
    for (int x = 0; x < W * cell; ++x) {
      double v = m.at(y / cell, x / cell);
      v = std::clamp(v, -1.0, 1.0);
      double r, g, b;
      if (v >= 0.0) {  // white -> red
        r = 1.0;
        g = 1.0 - v;
        b = 1.0 - v;
      } else {  // white -> blue
        r = 1.0 + v;
        g = 1.0 + v;
        b = 1.0;
      }
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  save_ppm(path, img);
}

}  // namespace stagekd
