#include "stagekd/metrics.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "stagekd/errors.hpp"

namespace stagekd {

using nlohmann::json;

namespace {
std::ofstream open_append(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot append to " + path);
  return os;
}
}  // namespace

void append_metric(const std::string& path, const MetricRecord& rec) {
  json j{{"epoch", rec.epoch},
         {"split", rec.split},
         {"loss_total", rec.loss_total},
         {"loss_components", rec.loss_components},
         {"top1", rec.top1},
         {"top5", rec.top5},
         {"wall_ms", rec.wall_ms},
         {"lr", rec.lr},
         {"steps", rec.steps}};
  auto os = open_append(path);
  os << j.dump() << "\n";
}

std::vector<MetricRecord> read_metrics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read metrics log: " + path);
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    MetricRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.split = j.at("split").get<std::string>();
    r.loss_total = j.at("loss_total").get<double>();
    r.loss_components = j.at("loss_components").get<std::map<std::string, double>>();
    r.top1 = j.at("top1").get<double>();
    r.top5 = j.at("top5").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    r.lr = j.value("lr", 0.0);
    r.steps = j.value("steps", 0);
    out.push_back(std::move(r));
  }
  return out;
}

void append_steps(const std::string& path, const std::vector<StepRecord>& recs) {
  if (recs.empty()) return;
  auto os = open_append(path);
  for (const auto& r : recs) {
    json j{{"epoch", r.epoch}, {"step", r.step},       {"ce", r.ce},
           {"response", r.response}, {"feature", r.feature}, {"relation", r.relation},
           {"total", r.total}};
    os << j.dump() << "\n";
  }
}

std::vector<StepRecord> read_steps(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read step log: " + path);
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    StepRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.step = j.at("step").get<int>();
    r.ce = j.at("ce").get<double>();
    r.response = j.at("response").get<double>();
    r.feature = j.at("feature").get<double>();
    r.relation = j.at("relation").get<double>();
    r.total = j.at("total").get<double>();
    out.push_back(r);
  }
  return out;
}

}  // namespace stagekd
