#ifndef STAGEKD_CONFIG_HPP
#define STAGEKD_CONFIG_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stagekd/data.hpp"
#include "stagekd/distill.hpp"
#include "stagekd/model.hpp"
#include "stagekd/package.hpp"
#include "stagekd/train.hpp"

namespace stagekd {

// Flat dotted-key configuration over a fixed key registry. Unknown keys are
// rejected with their full path; every key has a pre-filled default.
class RunConfig {
 public:
  static RunConfig defaults();
  // JSON file, either nested sections or flat dotted keys.
  static RunConfig from_file(const std::string& path);

  // "section.key=value" override (CLI --set).
  void apply_set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  int geti(const std::string& key) const;
  double getf(const std::string& key) const;
  bool getb(const std::string& key) const;
  const std::string& gets(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;        // comma separated
  std::vector<std::string> get_text_list(const std::string& key) const;

  // Nested snapshot with native JSON types; reproducible run archive.
  std::string snapshot_json() const;
  void save_snapshot(const std::string& path, std::uint64_t seed) const;

  // Domain materializers. `section` is "model" or "student".
  NetworkSpec model_spec(const std::string& section, int num_classes) const;
  DataConfig data_config() const;
  TrainingSchedule schedule(std::uint64_t seed) const;
  LossWeights loss_weights() const;
  DistillOptions distill_options() const;
  std::vector<std::pair<std::string, Recipe>> cs_branches() const;

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace stagekd

#endif
