#include "dp/config.hpp"

#include <fstream>
#include <sstream>

#include "dp/rng.hpp"

namespace dp {

using nlohmann::json;

const std::map<std::string, json>& Config::registry() {
  static const std::map<std::string, json> reg = {
      {"seed", 0},
      {"out_dir", ""},

      {"gen.kind", "harmonics"},
      {"gen.n_tasks", 5000},
      {"gen.samples_min", 4},
      {"gen.samples_max", 50},
      {"gen.sigma_y", 0.05},
      {"gen.eval_rows", 0},
      {"gen.amplitude_scale", 1.0},
      {"gen.split", "train"},
      {"gen.n_way", 4},
      {"gen.n_shot", 4},
      {"gen.n_query", 5},
      {"gen.noise", 0.08},
      {"gen.sine_sigma_y", 0.1},
      {"gen.sine_xs", "1.5,3.0"},
      {"gen.out", ""},
      {"gen.json_export", false},

      {"model.hidden", 128},
      {"model.layers", 12},
      {"model.d_z", 16},
      {"model.layer_norm", true},
      {"model.conditioned", true},
      {"model.d_gamma", 16},
      {"model.embed_hidden", 64},
      {"model.embed_layers", 4},
      {"model.squared_distance", false},

      {"posterior.kind", "iaf"},
      {"posterior.flow_layers", 4},
      {"posterior.flow_hidden", 64},
      {"posterior.d_c", -1},  // -1: same as model.d_z
      {"posterior.reverse_alternate", false},
      {"posterior.n_mc", 1},

      {"trainer.dataset", ""},
      {"trainer.resume", ""},
      {"trainer.learning_rate", 2e-4},
      {"trainer.posterior_lr_scale", 1.0},
      {"trainer.n_mb", 64},
      {"trainer.kl_weight", 1.0},
      {"trainer.adam_beta1", 0.9},
      {"trainer.adam_beta2", 0.999},
      {"trainer.adam_eps", 1e-8},
      {"trainer.max_steps", 50000},
      {"trainer.eval_every", 100},
      {"trainer.baseline", "none"},  // none | no_kl_deterministic
      {"trainer.weight_decay", 1e-5},
      {"trainer.sampling", "task_uniform"},  // task_uniform | datum_uniform

      {"adapt.steps", 1000},
      {"adapt.learning_rate", -1.0},  // -1: trainer.learning_rate

      {"eval.checkpoint", ""},
      {"eval.dataset", ""},
      {"eval.train_sizes", "2,8,16,64"},
      {"eval.n_tasks", 20},
      {"eval.n_samples", 64},
      {"eval.n_episodes", 200},
      {"eval.bootstrap", 10000},

      {"analysis.grid_min", -3.0},
      {"analysis.grid_max", 3.0},
      {"analysis.grid_res", 200},
      {"analysis.min_rel_height", 0.1},
      {"analysis.basin_radius", 3.0},
      {"analysis.fit_steps", 3000},
      {"analysis.fit_batch", 64},
      {"analysis.restarts", 5},
      {"analysis.flow_layers", 12},
      {"analysis.flow_hidden", 64},
      {"analysis.task", ""},
      {"analysis.no_data", false},
      {"analysis.n_samples", 20000},
      {"analysis.sine_sigma_y", 0.1},

      {"sample.checkpoint", ""},
      {"sample.task", ""},
      {"sample.n_samples", 10},
      {"sample.x_min", -6.0},
      {"sample.x_max", 6.0},
      {"sample.x_res", 200},
      {"sample.train_size", -1},
      {"sample.adapt", true},
  };
  return reg;
}

Config Config::defaults() {
  Config c;
  for (const auto& [k, v] : registry()) c.kv_[k] = v;
  return c;
}

void Config::set(const std::string& key, json value) {
  auto reg = registry().find(key);
  if (reg == registry().end()) throw ConfigError("unknown config key: " + key);
  // keep the registry's numeric kind so dumps stay stable
  if (reg->second.is_number_integer() && value.is_number_float()) {
    double d = value.get<double>();
    if (d == static_cast<double>(static_cast<int64_t>(d))) value = static_cast<int64_t>(d);
  }
  if (reg->second.is_number_float() && value.is_number_integer())
    value = value.get<double>();
  if (reg->second.type() != value.type() &&
      !(reg->second.is_number() && value.is_number()))
    throw ConfigError("config key " + key + " expects " + std::string(reg->second.type_name()) +
                      ", got " + std::string(value.type_name()));
  kv_[key] = std::move(value);
}

void Config::set_kv(const std::string& assignment) {
  auto pos = assignment.find('=');
  if (pos == std::string::npos || pos == 0)
    throw ConfigError("override must look like key=value: " + assignment);
  std::string key = assignment.substr(0, pos);
  std::string raw = assignment.substr(pos + 1);
  json value;
  try {
    value = json::parse(raw);
    if (value.is_object() || value.is_array()) value = raw;  // strings only at leaves
  } catch (const json::exception&) {
    value = raw;
  }
  set(key, std::move(value));
}

void Config::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object: " + path);
  for (const auto& [k, v] : j.items()) set(k, v);
}

Config Config::from_json(const json& j) {
  Config c = defaults();
  if (!j.is_object()) throw ConfigError("config snapshot must be a JSON object");
  for (const auto& [k, v] : j.items()) c.set(k, v);
  return c;
}

bool Config::has(const std::string& key) const { return kv_.count(key) > 0; }

namespace {
const json& fetch(const std::map<std::string, json>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("config key not set: " + key);
  return it->second;
}
}  // namespace

int64_t Config::get_i64(const std::string& key) const {
  const json& v = fetch(kv_, key);
  if (!v.is_number()) throw ConfigError(key + " is not a number");
  return v.get<int64_t>();
}

double Config::get_f64(const std::string& key) const {
  const json& v = fetch(kv_, key);
  if (!v.is_number()) throw ConfigError(key + " is not a number");
  return v.get<double>();
}

bool Config::get_bool(const std::string& key) const {
  const json& v = fetch(kv_, key);
  if (!v.is_boolean()) throw ConfigError(key + " is not a boolean");
  return v.get<bool>();
}

std::string Config::get_str(const std::string& key) const {
  const json& v = fetch(kv_, key);
  if (!v.is_string()) throw ConfigError(key + " is not a string");
  return v.get<std::string>();
}

namespace {
std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}
}  // namespace

std::vector<int64_t> Config::get_i64_list(const std::string& key) const {
  std::vector<int64_t> out;
  for (const std::string& p : split_commas(get_str(key))) {
    try {
      out.push_back(std::stoll(p));
    } catch (const std::exception&) {
      throw ConfigError(key + ": not an integer list: " + p);
    }
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::vector<double> Config::get_f64_list(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& p : split_commas(get_str(key))) {
    try {
      out.push_back(std::stod(p));
    } catch (const std::exception&) {
      throw ConfigError(key + ": not a number list: " + p);
    }
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

json Config::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : kv_) j[k] = v;
  return j;
}

std::string Config::dump(int indent) const { return to_json().dump(indent); }

uint64_t Config::hash() const { return Rng::hash_label(to_json().dump()); }

}  // namespace dp
