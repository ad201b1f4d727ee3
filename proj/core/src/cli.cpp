#include "stagekd/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stagekd/config.hpp"
#include "stagekd/errors.hpp"

namespace stagekd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 1;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args, const std::string& default_out) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--set", args.sets, "dotted-key override, e.g. --set distill.k_channels=8")
      ->take_all();
  cmd->add_option("--seed", args.seed, "global seed");
  args.out = default_out;
  cmd->add_option("--out", args.out, "output/run directory");
}

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig::defaults()
                                           : RunConfig::from_file(args.config_path);
  for (const auto& s : args.sets) cfg.apply_set(s);
  return cfg;
}

void fresh_run_dir(const std::string& dir) {
  // keep re-runs clean: metrics/steps logs append, so drop stale ones
  for (const char* f : {"metrics.jsonl", "steps.jsonl"}) {
    fs::path p = fs::path(dir) / f;
    if (fs::exists(p)) fs::remove(p);
  }
}

void write_json_file(const std::string& path, const json& j) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(2) << "\n";
}

json eval_to_json(const EvalReport& r) {
  return json{{"top1", r.top1},
              {"top5", r.top5},
              {"n_samples", r.n_samples},
              {"per_class_accuracy", r.per_class_accuracy}};
}

int cmd_train_teacher(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  DataConfig dc = cfg.data_config();
  Dataset train = load_dataset(dc, "train", args.seed);
  Dataset val = load_dataset(dc, "val", args.seed);

  NetworkSpec spec = cfg.model_spec("model", train.num_classes);
  Network net(spec);
  net.init(args.seed);

  fresh_run_dir(args.out);
  cfg.save_snapshot(args.out + "/config-snapshot", args.seed);

  SupervisedObjective obj;
  TrainingSchedule sched = cfg.schedule(args.seed);
  TrainResult res = train_network(net, obj, train, val, sched, args.out);

  save_checkpoint(args.out + "/checkpoint", spec, res.final_weights);
  save_checkpoint(args.out + "/checkpoint-best", spec, res.best_weights);
  std::printf("teacher trained: val top1 %.2f%% (best %.2f%%), checkpoint at %s\n",
              res.log.empty() ? 0.0 : res.log.back().top1, res.best_val_top1,
              (args.out + "/checkpoint").c_str());
  return 0;
}

int cmd_distill(const CommonArgs& args, const std::string& mode,
                const std::string& teacher_override) {
  RunConfig cfg = load_config(args);
  std::string teacher_path =
      teacher_override.empty() ? cfg.gets("distill.teacher") : teacher_override;
  if (teacher_path.empty())
    throw ConfigError("distill needs a teacher checkpoint (--teacher or distill.teacher)");
  if (!fs::exists(teacher_path))
    throw ConfigError("teacher checkpoint not found: " + teacher_path);
  Checkpoint teacher = load_checkpoint(teacher_path);

  DataConfig dc = cfg.data_config();
  Dataset train = load_dataset(dc, "train", args.seed);
  Dataset val = load_dataset(dc, "val", args.seed);
  if (train.num_classes != teacher.spec.num_classes)
    throw ConfigError("teacher checkpoint classes do not match the dataset");

  DistillJob job;
  job.teacher_spec = teacher.spec;
  job.teacher_weights = teacher.weights;
  job.student_spec = cfg.model_spec("student", train.num_classes);
  job.cascade_n = cfg.geti("distill.cascade_n");
  job.options = cfg.distill_options();
  job.schedule = cfg.schedule(args.seed);
  job.seed = args.seed;
  job.cs_branches = cfg.cs_branches();

  fs::create_directories(args.out);
  cfg.save_snapshot(args.out + "/config-snapshot", args.seed);

  if (mode == "single") {
    Recipe recipe = Recipe::single(substage_from_name(cfg.gets("distill.kind")));
    CascadeLadder ladder = make_ladder(job.teacher_spec, job.student_spec, job.cascade_n,
                                       job.options.assistant_mode);
    std::string branch_dir = args.out + "/branch-" + recipe.label();
    for (int r = 1; r <= ladder.cascade_n() + 1; ++r)
      fresh_run_dir(branch_dir + "/rung-" + std::to_string(r));
    TrainedWeights final_w = cascade(ladder, job.teacher_weights, recipe, job.options,
                                     train, val, job.schedule, branch_dir, job.seed);
    EvalReport ev = evaluate(job.student_spec, final_w, val);
    write_json_file(args.out + "/summary.json",
                    json{{"mode", "single"},
                         {"kind", recipe.label()},
                         {"cascade_n", job.cascade_n},
                         {"val", eval_to_json(ev)}});
    std::printf("single %s distillation done: val top1 %.2f%%\n", recipe.label().c_str(),
                ev.top1);
    return 0;
  }

  auto clean_branches = [&](const std::vector<std::pair<std::string, Recipe>>& branches) {
    CascadeLadder ladder = make_ladder(job.teacher_spec, job.student_spec, job.cascade_n,
                                       job.options.assistant_mode);
    for (const auto& [kind, recipe] : branches)
      for (int r = 1; r <= ladder.cascade_n() + 1; ++r)
        fresh_run_dir(args.out + "/branch-" + kind + "/rung-" + std::to_string(r));
  };

  StagedResult res;
  if (mode == "skd") {
    clean_branches({{"response", Recipe::single(SubstageKind::response)},
                    {"feature", Recipe::single(SubstageKind::feature)},
                    {"relation", Recipe::single(SubstageKind::relation)}});
    res = skd_train(job, train, val, args.out);
  } else if (mode == "rskd") {
    clean_branches(job.cs_branches);
    res = rskd_train(job, train, val, args.out);
  } else {
    throw ConfigError("distill --mode must be skd, rskd or single");
  }

  std::printf("%s done: integrated(average) top1 %.2f%%, ensemble top1 %.2f%% [selected: %s]\n",
              mode.c_str(), res.average_eval.top1, res.ensemble_eval.top1,
              res.selected_integration.c_str());
  for (const auto& b : res.branches)
    std::printf("  branch %-10s val top1 %.2f%%\n", b.kind.c_str(), b.val_top1);
  return 0;
}

int cmd_package_labels(const CommonArgs& args, const std::string& checkpoint_path,
                       const std::string& split) {
  if (!fs::exists(checkpoint_path))
    throw ConfigError("pretrained checkpoint not found: " + checkpoint_path);
  RunConfig cfg = load_config(args);
  Checkpoint ck = load_checkpoint(checkpoint_path);

  Dataset data = load_dataset(cfg.data_config(), split, args.seed);
  if (data.num_classes != ck.spec.num_classes)
    throw ConfigError("checkpoint classes do not match the dataset");

  PackagerConfig pc;
  pc.count = cfg.geti("package.count");
  pc.threshold = cfg.getf("package.threshold");
  pc.scheme = weight_scheme_from_name(cfg.gets("package.scheme"));
  if (cfg.gets("package.generator") != "stochastic_perturbation")
    throw ConfigError("CLI runs support the stochastic_perturbation generator; external "
                      "generators plug in through the library interface");
  pc.generator.kind = FrameGenerator::Kind::stochastic_perturbation;
  pc.generator.params.magnitude = cfg.getf("package.magnitude");
  pc.generator.params.anomaly_rate = cfg.getf("package.anomaly_rate");

  std::vector<PackageRecord> records = build_packages(data, ck.spec, ck.weights, pc, args.seed);
  write_package_store(args.out, records);
  cfg.save_snapshot(args.out + "/config-snapshot", args.seed);

  double mean_kept = 0.0, mean_unc = 0.0;
  for (const auto& r : records) {
    mean_kept += static_cast<double>(r.kept.size());
    mean_unc += r.aggregated.uncertainty;
  }
  if (!records.empty()) {
    mean_kept /= static_cast<double>(records.size());
    mean_unc /= static_cast<double>(records.size());
  }
  write_json_file(args.out + "/summary.json",
                  json{{"packages", records.size()},
                       {"frames_per_package", pc.count},
                       {"mean_kept_frames", mean_kept},
                       {"mean_aggregated_uncertainty", mean_unc}});
  std::printf("wrote %zu packages to %s (mean kept frames %.2f)\n", records.size(),
              args.out.c_str(), mean_kept);
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint_path,
             const std::string& split) {
  if (!fs::exists(checkpoint_path))
    throw ConfigError("checkpoint not found: " + checkpoint_path);
  RunConfig cfg = load_config(args);
  Checkpoint ck = load_checkpoint(checkpoint_path);
  Dataset data = load_dataset(cfg.data_config(), split, args.seed);
  EvalReport rep = evaluate(ck.spec, ck.weights, data);
  if (!args.out.empty()) write_json_file(args.out + "/eval.json", eval_to_json(rep));
  std::printf("top1 %.2f%%  top5 %.2f%%  over %d samples\n", rep.top1, rep.top5,
              rep.n_samples);
  return 0;
}

int cmd_correlation(const CommonArgs& args, const std::string& teacher_path,
                    const std::string& student_path, const std::string& split) {
  for (const auto& p : {teacher_path, student_path})
    if (!fs::exists(p)) throw ConfigError("checkpoint not found: " + p);
  RunConfig cfg = load_config(args);
  Checkpoint t = load_checkpoint(teacher_path);
  Checkpoint s = load_checkpoint(student_path);
  Dataset data = load_dataset(cfg.data_config(), split, args.seed);

  CorrelationReport rep =
      correlation_report(t.spec, t.weights, s.spec, s.weights, data);
  fs::create_directories(args.out);
  write_matrix_csv(args.out + "/teacher_corr.csv", rep.teacher_corr);
  write_matrix_csv(args.out + "/student_corr.csv", rep.student_corr);
  write_matrix_csv(args.out + "/diff.csv", rep.diff);
  write_heatmap_ppm(args.out + "/teacher_corr.ppm", rep.teacher_corr);
  write_heatmap_ppm(args.out + "/student_corr.ppm", rep.student_corr);
  write_heatmap_ppm(args.out + "/diff.ppm", rep.diff);
  write_json_file(args.out + "/report.json",
                  json{{"diff_frobenius", rep.diff_frobenius},
                       {"zero_variance_classes", rep.zero_variance_classes}});
  std::printf("correlation diff Frobenius norm: %.6f (artifacts in %s)\n",
              rep.diff_frobenius, args.out.c_str());
  return 0;
}

int cmd_report_overhead(const std::string& run_dir, const std::string& out) {
  OverheadReport rep = overhead_report(run_dir);
  json j{{"extra_params", rep.extra_params},
         {"time_per_batch_ms", rep.time_per_batch_ms},
         {"branch_extra_params", rep.branch_extra_params},
         {"branch_time_per_batch_ms", rep.branch_time_per_batch_ms}};
  if (!out.empty()) write_json_file(out + "/overhead.json", j);
  std::printf("extra params: %lld, time per batch: %.2f ms\n",
              static_cast<long long>(rep.extra_params), rep.time_per_batch_ms);
  for (const auto& [branch, ms] : rep.branch_time_per_batch_ms)
    std::printf("  branch %-10s %.2f ms/batch, extra params %lld\n", branch.c_str(), ms,
                static_cast<long long>(rep.branch_extra_params.at(branch)));
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"staged knowledge distillation toolkit"};
  app.require_subcommand(1);

  CommonArgs train_args, distill_args, pkg_args, eval_args, corr_args;
  std::string distill_mode = "rskd", distill_teacher;
  std::string pkg_checkpoint, pkg_split = "train";
  std::string eval_checkpoint, eval_split = "test";
  std::string corr_teacher, corr_student, corr_split = "test";
  std::string overhead_run, overhead_out;

  CLI::App* train = app.add_subcommand("train-teacher", "train a network from scratch");
  add_common(train, train_args, "runs/teacher");

  CLI::App* dist = app.add_subcommand("distill", "run skd/rskd/single distillation");
  add_common(dist, distill_args, "runs/distill");
  dist->add_option("--mode", distill_mode, "skd | rskd | single")->capture_default_str();
  dist->add_option("--teacher", distill_teacher, "teacher checkpoint path");

  CLI::App* pkg = app.add_subcommand("package-labels", "build composite label packages");
  add_common(pkg, pkg_args, "runs/packages");
  pkg->add_option("--checkpoint", pkg_checkpoint, "pretrained model checkpoint")->required();
  pkg->add_option("--split", pkg_split, "dataset split")->capture_default_str();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_args, "runs/eval");
  ev->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
  ev->add_option("--split", eval_split, "dataset split")->capture_default_str();

  CLI::App* corr = app.add_subcommand("correlation", "teacher/student logit correlation");
  add_common(corr, corr_args, "runs/correlation");
  corr->add_option("--teacher", corr_teacher, "teacher checkpoint")->required();
  corr->add_option("--student", corr_student, "student checkpoint")->required();
  corr->add_option("--split", corr_split, "dataset split")->capture_default_str();

  CLI::App* over = app.add_subcommand("report-overhead", "parameter/time overhead of a run");
  over->add_option("--run", overhead_run, "run directory")->required();
  over->add_option("--out", overhead_out, "where to write overhead.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train_teacher(train_args);
    if (dist->parsed()) return cmd_distill(distill_args, distill_mode, distill_teacher);
    if (pkg->parsed()) return cmd_package_labels(pkg_args, pkg_checkpoint, pkg_split);
    if (ev->parsed()) return cmd_eval(eval_args, eval_checkpoint, eval_split);
    if (corr->parsed()) return cmd_correlation(corr_args, corr_teacher, corr_student, corr_split);
    if (over->parsed()) return cmd_report_overhead(overhead_run, overhead_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const ParameterError& e) {
    std::fprintf(stderr, "parameter error: %s\n", e.what());
    return 2;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}

}  // namespace stagekd
