#pragma once
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "dp/errors.hpp"

namespace dp {

// Flat configuration with dotted keys ("trainer.learning_rate"). Values come
// from built-in defaults, then an optional JSON file, then key=value
// overrides; unknown keys are rejected against the registry.
class Config {
 public:
  static Config defaults();
  static const std::map<std::string, nlohmann::json>& registry();

  void load_file(const std::string& path);
  void set(const std::string& key, nlohmann::json value);
  void set_kv(const std::string& assignment);  // "key=value"
  static Config from_json(const nlohmann::json& j);

  bool has(const std::string& key) const;
  int64_t get_i64(const std::string& key) const;
  double get_f64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_str(const std::string& key) const;
  std::vector<int64_t> get_i64_list(const std::string& key) const;   // "2,8,16"
  std::vector<double> get_f64_list(const std::string& key) const;

  nlohmann::json to_json() const;
  std::string dump(int indent = 2) const;
  uint64_t hash() const;

 private:
  std::map<std::string, nlohmann::json> kv_;  // ordered for stable output
};

}  // namespace dp
