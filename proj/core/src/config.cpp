#include "stagekd/config.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stagekd/errors.hpp"

namespace stagekd {

using nlohmann::json;

namespace {

enum class CfgType { integer, real, boolean, text, int_list, text_list };

struct CfgEntry {
  const char* key;
  CfgType type;
  const char* def;
};

// The single source of truth for every addressable key. Defaults follow the
// reference training protocol (lambda 0.9, alpha 200, beta 300, gamma 0.9,
// T 4, K 16) with desk-scale data/schedule sizes.
const CfgEntry kRegistry[] = {
    {"model.family", CfgType::text, "residual_cnn"},
    {"model.depth", CfgType::integer, "8"},
    {"model.width", CfgType::real, "1.0"},

    {"student.family", CfgType::text, "plain_cnn"},
    {"student.depth", CfgType::integer, "5"},
    {"student.width", CfgType::real, "0.5"},

    {"distill.kind", CfgType::text, "response"},
    {"distill.teacher", CfgType::text, ""},
    {"distill.lambda", CfgType::real, "0.9"},
    {"distill.alpha", CfgType::real, "200.0"},
    {"distill.beta", CfgType::real, "300.0"},
    {"distill.gamma", CfgType::real, "0.9"},
    {"distill.eta", CfgType::real, "0.9"},
    {"distill.xi", CfgType::real, "1.0"},
    {"distill.tau_w", CfgType::real, "0.9"},
    {"distill.temperature", CfgType::real, "4.0"},
    {"distill.k_channels", CfgType::integer, "16"},
    {"distill.scale_kl_by_t2", CfgType::boolean, "true"},
    {"distill.cascade_n", CfgType::integer, "0"},
    {"distill.assistant_mode", CfgType::text, "reinit"},
    {"distill.feature_taps", CfgType::text_list, "s1.out,s2.out,s3.out"},
    {"distill.fsp_pairs", CfgType::text_list, "s1.in:s1.out,s2.in:s2.out,s3.in:s3.out"},
    {"distill.resize_spatial_mismatch", CfgType::boolean, "false"},
    {"distill.cache_teacher", CfgType::boolean, "true"},
    {"distill.integration", CfgType::text, "average"},
    {"distill.cs.rp.backbone", CfgType::text, "response"},
    {"distill.cs.rp.aux", CfgType::text_list, "feature,relation"},
    {"distill.cs.fe.backbone", CfgType::text, "response"},
    {"distill.cs.fe.aux", CfgType::text_list, "feature"},
    {"distill.cs.re.backbone", CfgType::text, "response"},
    {"distill.cs.re.aux", CfgType::text_list, "relation"},

    {"schedule.epochs", CfgType::integer, "30"},
    {"schedule.batch_size", CfgType::integer, "32"},
    {"schedule.optimizer", CfgType::text, "sgd_momentum"},
    {"schedule.lr", CfgType::real, "0.05"},
    {"schedule.momentum", CfgType::real, "0.9"},
    {"schedule.lr_decay", CfgType::real, "0.1"},
    {"schedule.decay_epochs", CfgType::int_list, ""},
    {"schedule.weight_decay", CfgType::real, "0.0005"},
    {"schedule.augment", CfgType::boolean, "false"},
    {"schedule.augment_pad", CfgType::integer, "2"},

    {"data.kind", CfgType::text, "synthetic"},
    {"data.root", CfgType::text, ""},
    {"data.classes", CfgType::integer, "8"},
    {"data.image_size", CfgType::integer, "16"},
    {"data.train_size", CfgType::integer, "1024"},
    {"data.val_size", CfgType::integer, "256"},
    {"data.test_size", CfgType::integer, "1024"},
    {"data.noise", CfgType::real, "0.18"},
    {"data.jitter", CfgType::real, "0.5"},

    {"package.count", CfgType::integer, "8"},
    {"package.threshold", CfgType::real, "0.7"},
    {"package.scheme", CfgType::text, "confidence"},
    {"package.magnitude", CfgType::real, "0.3"},
    {"package.anomaly_rate", CfgType::real, "0.0"},
    {"package.generator", CfgType::text, "stochastic_perturbation"},
};

const CfgEntry* find_entry(const std::string& key) {
  for (const auto& e : kRegistry)
    if (key == e.key) return &e;
  return nullptr;
}

void check_value(const CfgEntry& e, const std::string& value) {
  auto fail = [&](const char* what) {
    throw ConfigError("config key '" + std::string(e.key) + "': " + what + " (got '" +
                      value + "')");
  };
  switch (e.type) {
    case CfgType::integer: {
      try {
        std::size_t pos = 0;
        (void)std::stoll(value, &pos);
        if (pos != value.size()) fail("expected an integer");
      } catch (const std::exception&) {
        fail("expected an integer");
      }
      break;
    }
    case CfgType::real: {
      try {
        std::size_t pos = 0;
        (void)std::stod(value, &pos);
        if (pos != value.size()) fail("expected a number");
      } catch (const std::exception&) {
        fail("expected a number");
      }
      break;
    }
    case CfgType::boolean:
      if (value != "true" && value != "false") fail("expected true or false");
      break;
    case CfgType::int_list: {
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
          std::size_t pos = 0;
          (void)std::stoll(item, &pos);
          if (pos != item.size()) fail("expected a comma-separated integer list");
        } catch (const std::exception&) {
          fail("expected a comma-separated integer list");
        }
      }
      break;
    }
    case CfgType::text:
    case CfgType::text_list:
      break;
  }
}

std::string json_scalar_to_string(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_float()) {
    std::ostringstream os;
    os << v.get<double>();
    return os.str();
  }
  if (v.is_array()) {
    std::string joined;
    for (const auto& item : v) {
      if (!joined.empty()) joined += ",";
      joined += json_scalar_to_string(item, key);
    }
    return joined;
  }
  throw ConfigError("config key '" + key + "': unsupported JSON value type");
}

void flatten(const json& j, const std::string& prefix,
             std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      std::string key = prefix.empty() ? k : prefix + "." + k;
      if (v.is_object())
        flatten(v, key, out);
      else
        out.push_back({key, json_scalar_to_string(v, key)});
    }
  } else {
    throw ConfigError("config root must be a JSON object");
  }
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  for (const auto& e : kRegistry) c.values_[e.key] = e.def;
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c = defaults();
  std::vector<std::pair<std::string, std::string>> pairs;
  flatten(j, "", pairs);
  for (const auto& [k, v] : pairs) c.set(k, v);
  return c;
}

void RunConfig::apply_set(const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const CfgEntry* e = find_entry(key);
  if (!e) throw ConfigError("unknown config key: '" + key + "'");
  check_value(*e, value);
  values_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

namespace {
const std::string& fetch(const std::map<std::string, std::string>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw ConfigError("unknown config key: '" + key + "'");
  return it->second;
}
}  // namespace

int RunConfig::geti(const std::string& key) const {
  return static_cast<int>(std::stoll(fetch(values_, key)));
}

double RunConfig::getf(const std::string& key) const { return std::stod(fetch(values_, key)); }

bool RunConfig::getb(const std::string& key) const { return fetch(values_, key) == "true"; }

const std::string& RunConfig::gets(const std::string& key) const {
  return fetch(values_, key);
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(fetch(values_, key));
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(static_cast<int>(std::stoll(item)));
  return out;
}

std::vector<std::string> RunConfig::get_text_list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(fetch(values_, key));
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string RunConfig::snapshot_json() const {
  json root = json::object();
  for (const auto& e : kRegistry) {
    const std::string& raw = fetch(values_, e.key);
    json v;
    switch (e.type) {
      case CfgType::integer: v = std::stoll(raw); break;
      case CfgType::real: v = std::stod(raw); break;
      case CfgType::boolean: v = (raw == "true"); break;
      default: v = raw; break;
    }
    // nest by dotted path
    json* node = &root;
    std::string key = e.key;
    std::size_t pos;
    while ((pos = key.find('.')) != std::string::npos) {
      std::string head = key.substr(0, pos);
      key = key.substr(pos + 1);
      if (!node->contains(head)) (*node)[head] = json::object();
      node = &(*node)[head];
    }
    (*node)[key] = v;
  }
  return root.dump(2);
}

void RunConfig::save_snapshot(const std::string& path, std::uint64_t seed) const {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  json root = json::parse(snapshot_json());
  root["seed"] = seed;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write config snapshot: " + path);
  os << root.dump(2) << "\n";
}

NetworkSpec RunConfig::model_spec(const std::string& section, int num_classes) const {
  NetworkSpec s;
  s.family = family_from_name(gets(section + ".family"));
  s.depth = geti(section + ".depth");
  s.width = getf(section + ".width");
  s.num_classes = num_classes;
  s.in_channels = 3;
  s.finalize();
  return s;
}

DataConfig RunConfig::data_config() const {
  DataConfig d;
  d.kind = gets("data.kind");
  d.root = gets("data.root");
  d.classes = geti("data.classes");
  d.image_size = geti("data.image_size");
  d.train_size = geti("data.train_size");
  d.val_size = geti("data.val_size");
  d.test_size = geti("data.test_size");
  d.noise = getf("data.noise");
  d.jitter = getf("data.jitter");
  d.augment = getb("schedule.augment");
  d.pad = geti("schedule.augment_pad");
  return d;
}

TrainingSchedule RunConfig::schedule(std::uint64_t seed) const {
  TrainingSchedule s;
  s.epochs = geti("schedule.epochs");
  s.batch_size = geti("schedule.batch_size");
  s.optimizer = optimizer_from_name(gets("schedule.optimizer"));
  s.lr = getf("schedule.lr");
  s.momentum = getf("schedule.momentum");
  s.lr_decay = getf("schedule.lr_decay");
  s.decay_epochs = get_int_list("schedule.decay_epochs");
  s.weight_decay = getf("schedule.weight_decay");
  s.seed = seed;
  s.augment = getb("schedule.augment");
  s.augment_pad = geti("schedule.augment_pad");
  s.validate();
  return s;
}

LossWeights RunConfig::loss_weights() const {
  LossWeights w;
  w.lambda_ = getf("distill.lambda");
  w.alpha = getf("distill.alpha");
  w.beta = getf("distill.beta");
  w.gamma = getf("distill.gamma");
  w.eta = getf("distill.eta");
  w.xi = getf("distill.xi");
  w.tau_w = getf("distill.tau_w");
  w.temperature = getf("distill.temperature");
  w.k_channels = geti("distill.k_channels");
  w.scale_kl_by_t2 = getb("distill.scale_kl_by_t2");
  if (w.temperature <= 0.0) throw ConfigError("distill.temperature must be positive");
  if (w.k_channels < 1) throw ConfigError("distill.k_channels must be >= 1");
  return w;
}

DistillOptions RunConfig::distill_options() const {
  DistillOptions o;
  o.weights = loss_weights();
  o.feature_taps = get_text_list("distill.feature_taps");
  o.fsp_pairs.clear();
  for (const auto& pair : get_text_list("distill.fsp_pairs")) {
    auto colon = pair.find(':');
    if (colon == std::string::npos)
      throw ConfigError("distill.fsp_pairs entries must look like 'in_tap:out_tap'");
    o.fsp_pairs.push_back({pair.substr(0, colon), pair.substr(colon + 1)});
  }
  o.resize_spatial_mismatch = getb("distill.resize_spatial_mismatch");
  o.cache_teacher = getb("distill.cache_teacher");
  o.integration = gets("distill.integration");
  if (o.integration != "average" && o.integration != "ensemble")
    throw ConfigError("distill.integration must be 'average' or 'ensemble'");
  o.assistant_mode = gets("distill.assistant_mode");
  return o;
}

std::vector<std::pair<std::string, Recipe>> RunConfig::cs_branches() const {
  std::vector<std::pair<std::string, Recipe>> out;
  const char* branches[3][2] = {{"rp_cs", "rp"}, {"fe_cs", "fe"}, {"re_cs", "re"}};
  for (const auto& [label, short_name] : branches) {
    std::string base = std::string("distill.cs.") + short_name;
    CsRecipe cs;
    cs.backbone = substage_from_name(gets(base + ".backbone"));
    for (const auto& aux : get_text_list(base + ".aux"))
      cs.auxiliaries.push_back(substage_from_name(aux));
    out.push_back({label, Recipe::combination_stage(cs)});
  }
  return out;
}

}  // namespace stagekd
