#include "dp/datasets.hpp"

#include <cmath>
#include <fstream>

#include "dp/serialize.hpp"

namespace dp {

using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

int64_t MetaDataset::eval_rows() const {
  return info.config.value("eval_rows", static_cast<int64_t>(0));
}

int64_t MetaDataset::train_rows(const Task& t) const {
  int64_t n = t.n() - eval_rows();
  if (n < 0) throw ContractError("task shorter than its held-out block");
  return n;
}

double harmonics_f(double x, double omega, double a1, double a2, double b1, double b2) {
  return a1 * std::sin(omega * x + b1) + a2 * std::sin(2.0 * omega * x + b2);
}

MetaDataset gen_harmonics(const HarmonicsConfig& cfg) {
  if (cfg.n_tasks < 1) throw ConfigError("gen_harmonics: n_tasks must be >= 1");
  if (cfg.samples_min < 1 || cfg.samples_min > cfg.samples_max)
    throw ConfigError("gen_harmonics: invalid samples range");
  if (cfg.sigma_y < 0.0) throw ConfigError("gen_harmonics: negative noise");
  if (cfg.eval_rows < 0) throw ConfigError("gen_harmonics: negative eval_rows");

  MetaDataset ds;
  ds.info.kind = "harmonics";
  ds.info.split = cfg.split;
  ds.info.seed = cfg.seed;
  ds.info.labels = false;
  ds.info.config = {{"n_tasks", cfg.n_tasks},
                    {"samples_min", cfg.samples_min},
                    {"samples_max", cfg.samples_max},
                    {"sigma_y", cfg.sigma_y},
                    {"eval_rows", cfg.eval_rows},
                    {"amplitude_scale", cfg.amplitude_scale}};

  Rng root = Rng(cfg.seed).child("harmonics").child(split_name(cfg.split));
  ds.tasks.reserve(static_cast<size_t>(cfg.n_tasks));
  for (int64_t j = 0; j < cfg.n_tasks; ++j) {
    Rng rng = root.child(static_cast<uint64_t>(j));
    double omega = rng.uniform(5.0, 7.0);
    double b1 = rng.uniform(0.0, 2.0 * M_PI);
    double b2 = rng.uniform(0.0, 2.0 * M_PI);
    double a1 = rng.normal() * cfg.amplitude_scale;
    double a2 = rng.normal() * cfg.amplitude_scale;
    double mu_x = rng.uniform(-4.0, 4.0);
    int64_t n_train =
        cfg.samples_min +
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(cfg.samples_max - cfg.samples_min + 1)));
    int64_t n = n_train + cfg.eval_rows;

    Task t;
    t.task_id = j;
    t.x = Tensor::zeros({n, 1});
    t.y = Tensor::zeros({n, 1});
    for (int64_t i = 0; i < n; ++i) {
      double x = mu_x + rng.normal();
      t.x[i] = x;
      t.y[i] = harmonics_f(x, omega, a1, a2, b1, b2) + cfg.sigma_y * rng.normal();
    }
    t.meta_json = json{{"omega", omega}, {"b1", b1},     {"b2", b2},        {"a1", a1},
                       {"a2", a2},       {"mu_x", mu_x}, {"n_train", n_train}}
                      .dump();
    ds.tasks.push_back(std::move(t));
  }
  return ds;
}

std::pair<Task, SineParams> gen_single_sine(const SineConfig& cfg) {
  if (cfg.xs.empty()) throw ConfigError("gen_single_sine: empty x list");
  Rng rng = Rng(cfg.seed).child("sine");
  SineParams p;
  p.omega = rng.normal();
  p.b = rng.normal();
  Task t;
  t.task_id = 0;
  int64_t n = static_cast<int64_t>(cfg.xs.size());
  t.x = Tensor::zeros({n, 1});
  t.y = Tensor::zeros({n, 1});
  for (int64_t i = 0; i < n; ++i) {
    t.x[i] = cfg.xs[static_cast<size_t>(i)];
    t.y[i] = std::sin(5.0 * (p.omega * t.x[i] + p.b)) + cfg.sigma_y * rng.normal();
  }
  t.meta_json = json{{"omega", p.omega}, {"b", p.b}}.dump();
  return {std::move(t), p};
}

MetaDataset gen_hetero_classification(const HeteroConfig& cfg) {
  if (cfg.n_tasks < 2 || cfg.n_tasks % 2 != 0)
    throw ConfigError("gen_hetero_classification: n_tasks must be even and >= 2");
  if (cfg.n_way < 2 || cfg.n_way > 4) throw ConfigError("hetero: n_way must be in [2,4]");
  if (cfg.n_shot < 2)
    throw ConfigError("hetero: n_shot must be >= 2 (leave-one-out needs two per class)");
  if (cfg.n_query < 1) throw ConfigError("hetero: n_query must be >= 1");

  MetaDataset ds;
  ds.info.kind = "hetero";
  ds.info.split = cfg.split;
  ds.info.seed = cfg.seed;
  ds.info.labels = true;
  ds.info.config = {{"n_tasks", cfg.n_tasks}, {"n_way", cfg.n_way},   {"n_shot", cfg.n_shot},
                    {"n_query", cfg.n_query}, {"noise", cfg.noise},
                    {"eval_rows", cfg.n_way * cfg.n_query}};

  Rng root = Rng(cfg.seed).child("hetero").child(split_name(cfg.split));
  for (int64_t j = 0; j < cfg.n_tasks; ++j) {
    Rng rng = root.child(static_cast<uint64_t>(j));
    bool family_a = j % 2 == 0;
    double base_angle = rng.uniform(0.0, 2.0 * M_PI);
    std::vector<double> radii(static_cast<size_t>(cfg.n_way));
    for (int64_t k = 0; k < cfg.n_way; ++k)
      radii[static_cast<size_t>(k)] = 1.0 + 0.6 * static_cast<double>(k) + rng.uniform(-0.15, 0.15);

    int64_t n = cfg.n_way * (cfg.n_shot + cfg.n_query);
    Task t;
    t.task_id = j;
    t.x = Tensor::zeros({n, 2});
    t.y = Tensor::zeros({n, 1});
    int64_t row = 0;
    auto emit = [&](int64_t label) {
      int64_t nuisance = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(cfg.n_way)));
      int64_t k = family_a ? label : nuisance;   // radius class
      int64_t r = family_a ? nuisance : label;   // rotation class
      double theta = base_angle + static_cast<double>(r) * (M_PI / 2.0) + 0.05 * rng.normal();
      double rho = radii[static_cast<size_t>(k)];
      t.x.at(row, 0) = rho * std::cos(theta) + cfg.noise * rng.normal();
      t.x.at(row, 1) = rho * std::sin(theta) + cfg.noise * rng.normal();
      t.y[row] = static_cast<double>(label);
      ++row;
    };
    // support block first (class-grouped), then queries
    for (int64_t c = 0; c < cfg.n_way; ++c)
      for (int64_t s = 0; s < cfg.n_shot; ++s) emit(c);
    for (int64_t c = 0; c < cfg.n_way; ++c)
      for (int64_t q = 0; q < cfg.n_query; ++q) emit(c);

    json radii_j = json::array();
    for (double rr : radii) radii_j.push_back(rr);
    t.meta_json = json{{"family", family_a ? "A" : "B"},
                       {"base_angle", base_angle},
                       {"radii", radii_j}}
                      .dump();
    ds.tasks.push_back(std::move(t));
  }
  return ds;
}

std::vector<Draw> sample_minibatch(const MetaDataset& ds, int64_t n_mb, Rng& rng,
                                   SamplingMode mode) {
  if (ds.tasks.empty()) throw ContractError("sample_minibatch: empty meta-dataset");
  if (n_mb < 1) throw ContractError("sample_minibatch: n_mb must be >= 1");
  std::vector<Draw> out;
  out.reserve(static_cast<size_t>(n_mb));
  if (mode == SamplingMode::task_uniform) {
    for (int64_t i = 0; i < n_mb; ++i) {
      int64_t j = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(ds.n_tasks())));
      int64_t rows = ds.train_rows(ds.tasks[static_cast<size_t>(j)]);
      if (rows < 1) throw ContractError("sample_minibatch: task with no training rows");
      out.push_back({j, static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(rows)))});
    }
  } else {
    std::vector<int64_t> cum;
    cum.reserve(ds.tasks.size());
    int64_t total = 0;
    for (const Task& t : ds.tasks) {
      total += ds.train_rows(t);
      cum.push_back(total);
    }
    if (total < 1) throw ContractError("sample_minibatch: no training rows");
    for (int64_t i = 0; i < n_mb; ++i) {
      int64_t flat = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(total)));
      size_t j = 0;
      while (cum[j] <= flat) ++j;
      int64_t before = j == 0 ? 0 : cum[j - 1];
      out.push_back({static_cast<int64_t>(j), flat - before});
    }
  }
  return out;
}

namespace {
constexpr char kMagic[4] = {'D', 'P', 'M', 'D'};
constexpr uint16_t kVersion = 1;
}  // namespace

void save_dataset(const MetaDataset& ds, const std::string& path) {
  ByteWriter w(path);
  w.bytes(kMagic, 4);
  w.u16(kVersion);
  w.u8(static_cast<uint8_t>(ds.info.split));
  w.u8(ds.info.labels ? 1 : 0);
  w.u64(ds.info.seed);
  w.u64(static_cast<uint64_t>(ds.n_tasks()));
  w.str(ds.info.kind);
  w.str(ds.info.config.dump());
  for (const Task& t : ds.tasks) {
    w.u64(static_cast<uint64_t>(t.task_id));
    w.u64(static_cast<uint64_t>(t.n()));
    w.u64(static_cast<uint64_t>(t.d_x()));
    for (int64_t i = 0; i < t.x.size(); ++i) w.f64(t.x[i]);
    for (int64_t i = 0; i < t.y.size(); ++i) w.f64(t.y[i]);
    w.str(t.meta_json);
  }
  w.close();
}

MetaDataset load_dataset(const std::string& path) {
  ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != std::string(kMagic, 4))
    throw FormatError("not a dataset file (bad magic): " + path);
  uint16_t version = r.u16();
  if (version != kVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version) + ": " + path);
  MetaDataset ds;
  uint8_t split = r.u8();
  if (split > 2) throw FormatError("invalid split tag in " + path);
  ds.info.split = static_cast<Split>(split);
  ds.info.labels = r.u8() != 0;
  ds.info.seed = r.u64();
  uint64_t n_tasks = r.u64();
  ds.info.kind = r.str();
  try {
    ds.info.config = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError("invalid dataset config block: " + std::string(e.what()));
  }
  ds.tasks.reserve(n_tasks);
  for (uint64_t k = 0; k < n_tasks; ++k) {
    Task t;
    t.task_id = static_cast<int64_t>(r.u64());
    int64_t n = static_cast<int64_t>(r.u64());
    int64_t d_x = static_cast<int64_t>(r.u64());
    if (n < 1 || d_x < 1 || n > (1ll << 32) || d_x > (1ll << 16))
      throw FormatError("implausible task record in " + path);
    t.x = Tensor::zeros({n, d_x});
    t.y = Tensor::zeros({n, 1});
    for (int64_t i = 0; i < t.x.size(); ++i) t.x[i] = r.f64();
    for (int64_t i = 0; i < t.y.size(); ++i) t.y[i] = r.f64();
    t.meta_json = r.str();
    ds.tasks.push_back(std::move(t));
  }
  if (!r.at_eof()) throw FormatError("trailing bytes after last task: " + path);
  return ds;
}

void export_dataset_json(const MetaDataset& ds, const std::string& path) {
  json out;
  out["kind"] = ds.info.kind;
  out["split"] = split_name(ds.info.split);
  out["seed"] = ds.info.seed;
  out["labels"] = ds.info.labels;
  out["config"] = ds.info.config;
  out["tasks"] = json::array();
  for (const Task& t : ds.tasks) {
    json jt;
    jt["task_id"] = t.task_id;
    jt["n"] = t.n();
    jt["d_x"] = t.d_x();
    jt["x"] = t.x.vec();
    jt["y"] = t.y.vec();
    jt["meta"] = t.meta_json.empty() ? json() : json::parse(t.meta_json);
    out["tasks"].push_back(std::move(jt));
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << out.dump(2) << "\n";
}

}  // namespace dp
