#pragma once
#include <json.hpp>
#include <string>
#include <vector>

#include "dp/rng.hpp"
#include "dp/tensor.hpp"

namespace dp {

// One supervised dataset. meta_json holds the latent generative parameters
// for diagnostics only; no training code path reads it.
struct Task {
  int64_t task_id = 0;
  Tensor x;  // [n, d_x]
  Tensor y;  // [n, 1]; class labels stored as exact small integers
  std::string meta_json;

  int64_t n() const { return x.rows(); }
  int64_t d_x() const { return x.cols(); }
};

enum class Split : uint8_t { train = 0, valid = 1, test = 2 };
const char* split_name(Split s);

struct DatasetInfo {
  std::string kind;          // harmonics | sine | hetero
  Split split = Split::train;
  uint64_t seed = 0;
  bool labels = false;       // y holds integer class labels
  nlohmann::json config;     // generator configuration, including eval_rows
};

struct MetaDataset {
  DatasetInfo info;
  std::vector<Task> tasks;

  int64_t n_tasks() const { return static_cast<int64_t>(tasks.size()); }
  // rows of a task available for training; trailing eval_rows are held out
  int64_t train_rows(const Task& t) const;
  int64_t eval_rows() const;
};

// Sum of two sine waves with a frequency ratio of 2; per task
//   omega ~ U(5,7), b1,b2 ~ U(0,2pi), a1,a2 ~ N(0,1), mu_x ~ U(-4,4),
//   x_i ~ N(mu_x,1), y_i ~ N(f(x_i), sigma_y^2), n_j ~ U{samples_min..max}.
struct HarmonicsConfig {
  int64_t n_tasks = 5000;
  int64_t samples_min = 4;
  int64_t samples_max = 50;
  double sigma_y = 0.05;
  int64_t eval_rows = 0;        // extra held-out rows appended per task
  double amplitude_scale = 1.0; // 0 produces flat-function degenerate tasks
  uint64_t seed = 0;
  Split split = Split::train;
};
MetaDataset gen_harmonics(const HarmonicsConfig& cfg);
double harmonics_f(double x, double omega, double a1, double a2, double b1, double b2);

// Single sine task f(x) = sin(5(omega x + b)) with omega, b ~ N(0,1).
struct SineConfig {
  uint64_t seed = 0;
  double sigma_y = 0.1;
  std::vector<double> xs = {1.5, 3.0};
};
struct SineParams {
  double omega = 0.0;
  double b = 0.0;
};
std::pair<Task, SineParams> gen_single_sine(const SineConfig& cfg);

// Two interleaved episode families over the same 2-d input space. Examples
// are rotated scaled prototypes x = rho_k * (cos t, sin t) + noise with
// t = base_angle + r * pi/2. Family A labels the radius class k (rotation is
// nuisance), family B labels the rotation class r (radius is nuisance), so a
// single fixed representation cannot serve both families well.
struct HeteroConfig {
  int64_t n_tasks = 400;
  int64_t n_way = 4;
  int64_t n_shot = 4;
  int64_t n_query = 5;  // per class
  double noise = 0.08;
  uint64_t seed = 0;
  Split split = Split::train;
};
MetaDataset gen_hetero_classification(const HeteroConfig& cfg);

enum class SamplingMode { task_uniform, datum_uniform };

struct Draw {
  int64_t task = 0;
  int64_t row = 0;
};

// Mini-batch draws with replacement: task uniform over N then datum uniform
// over the task's training rows (default), or datum-uniform over the
// concatenated meta-dataset behind the flag.
std::vector<Draw> sample_minibatch(const MetaDataset& ds, int64_t n_mb, Rng& rng,
                                   SamplingMode mode = SamplingMode::task_uniform);

// Binary container, magic "DPMD"; see README for the exact layout.
void save_dataset(const MetaDataset& ds, const std::string& path);
MetaDataset load_dataset(const std::string& path);
void export_dataset_json(const MetaDataset& ds, const std::string& path);

}  // namespace dp
