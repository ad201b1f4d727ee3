#ifndef STAGEKD_METRICS_HPP
#define STAGEKD_METRICS_HPP

#include <map>
#include <string>
#include <vector>

namespace stagekd {

// One line of metrics.jsonl.
struct MetricRecord {
  int epoch = 0;
  std::string split;  // "train" | "val"
  double loss_total = 0.0;
  std::map<std::string, double> loss_components;
  double top1 = 0.0;
  double top5 = 0.0;
  double wall_ms = 0.0;
  double lr = 0.0;
  int steps = 0;
};

// One line of steps.jsonl: per-training-step loss components, kept so a
// combination-stage total can be recomposed and audited after the fact.
struct StepRecord {
  int epoch = 0;
  int step = 0;
  double ce = 0.0;
  double response = 0.0;
  double feature = 0.0;
  double relation = 0.0;
  double total = 0.0;
};

void append_metric(const std::string& path, const MetricRecord& rec);
std::vector<MetricRecord> read_metrics(const std::string& path);

void append_steps(const std::string& path, const std::vector<StepRecord>& recs);
std::vector<StepRecord> read_steps(const std::string& path);

}  // namespace stagekd

#endif
