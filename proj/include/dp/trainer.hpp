#pragma once
#include <fstream>
#include <functional>
#include <optional>

#include "dp/config.hpp"
#include "dp/datasets.hpp"
#include "dp/nets.hpp"
#include "dp/posterior.hpp"
#include "dp/protonet.hpp"

namespace dp {

enum class TaskMode { regression, classification };

// The model pieces reconstructed from a config (or a checkpoint's settings):
// the conditioned network, the optional flow, and the loss wiring flags.
struct ModelBundle {
  TaskMode mode = TaskMode::regression;
  int64_t d_x = 1;
  int64_t d_z = 16;
  int64_t d_c = 16;
  bool conditioned = true;      // classification: concatenate z into the embedder
  bool deterministic = false;   // no-KL baseline: z = mu, KL = 0
  bool use_flow = true;         // false: factorized Gaussian posterior
  bool squared_distance = false;
  double kl_weight = 1.0;
  int64_t n_mc = 1;
  std::optional<ResidualMlp> net;   // regressor or embedder
  std::optional<IafStack> flow;

  bool has_posterior() const { return mode == TaskMode::regression || conditioned; }
  static ModelBundle from_config(const Config& cfg, const std::string& dataset_kind,
                                 int64_t d_x);
  void register_shared(ParamStore& store, Rng init_rng) const;
  void register_task_table(ParamStore& store, int64_t n_tasks) const;
};

struct Metrics {
  int64_t step = 0;
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double wall_ms = 0.0;
};

// Append-only metrics stream: CSV with header step,loss,nll,kl,wall_ms.
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::string& path, bool append = false);
  void write(const Metrics& m);

 private:
  std::ofstream out_;
};

struct Checkpoint {
  uint16_t version = 1;
  int64_t step = 0;
  nlohmann::json settings;  // config snapshot plus derived dims
  ParamStore params;
  std::vector<std::pair<std::string, std::pair<Tensor, Tensor>>> adam_moments;
  int64_t adam_t = 0;
  Rng::State batch_rng, eps_rng;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

struct LossParts {
  Value loss;      // scalar minimization target
  Value nll_mean;  // mean per-datum negative log-likelihood
  Value kl_mean;   // mean per-element KL estimate
};

// Regression mini-batch loss: mean over elements of
//   n_j * (-log p(y|x,z_j)) + kl_weight * KL_j,
// with z_j reparameterized from the given eps rows (one per element, n_mc
// replicas already expanded by the caller).
LossParts minibatch_loss(Tape& tape, const ModelBundle& model, const BoundParams& p,
                         const MetaDataset& ds, const std::vector<Draw>& batch,
                         const Tensor& eps, double kl_weight);

// Classification mini-batch: elements are whole episodes; the likelihood term
// is the leave-one-out marginal log-likelihood of each support set.
LossParts episode_loss(Tape& tape, const ModelBundle& model, const BoundParams& p,
                       const MetaDataset& ds, const std::vector<int64_t>& episodes,
                       const Tensor& eps, double kl_weight);

class Trainer {
 public:
  Trainer(const Config& cfg, MetaDataset ds);
  Trainer(const Config& cfg, MetaDataset ds, const Checkpoint& resume);

  Metrics step_once();
  // Runs to trainer.max_steps; on a non-finite loss throws TrainingDiverged
  // after preserving the last good state (available via last_good()).
  void run(const std::function<void(const Metrics&)>& on_metrics = {});

  Checkpoint checkpoint() const;
  const Checkpoint& last_good() const;
  const ParamStore& params() const { return params_; }
  ParamStore& mutable_params() { return params_; }
  int64_t step_count() const { return step_; }
  const ModelBundle& model() const { return model_; }

 private:
  void init_settings(const Config& cfg);
  Config cfg_;
  MetaDataset ds_;
  ModelBundle model_;
  ParamStore params_;
  AdamState adam_;
  Rng batch_rng_{0}, eps_rng_{0};
  int64_t step_ = 0;
  int64_t max_steps_ = 0, eval_every_ = 100, n_mb_ = 64;
  double kl_weight_ = 1.0, weight_decay_ = 0.0, posterior_lr_scale_ = 1.0;
  AdamConfig adam_cfg_;
  SamplingMode sampling_ = SamplingMode::task_uniform;
  nlohmann::json settings_;
  std::optional<Checkpoint> last_good_;
};

// Frozen-alpha adaptation of a fresh per-task posterior on a new task's first
// n_train rows. Only mu / log_sigma / context receive updates.
struct AdaptResult {
  TaskPosteriorParams posterior;
  double final_loss = 0.0;
};
AdaptResult adapt_new_task(const Checkpoint& ckpt, const Task& task, int64_t n_train,
                           const Config& cfg, Rng rng);

// Posterior-predictive summary over an x grid by marginalizing z.
struct Predictive {
  Tensor mean;           // [m,1]
  Tensor total_std;      // [m,1] sqrt(aleatoric + epistemic)
  Tensor epistemic_std;  // [m,1] std over z of mu_y
  Tensor mu_samples;     // [n_samples, m]
  Tensor sigma_samples;  // [n_samples, m]
};
Predictive predict_marginal(const Checkpoint& ckpt, const TaskPosteriorParams& posterior,
                            const Tensor& xgrid, int64_t n_samples, Rng rng);

struct MseRow {
  int64_t train_size = 0;
  double mse_mean = 0.0;
  double mse_stderr = 0.0;
  int64_t n_tasks = 0;
};
std::vector<MseRow> eval_mse(const Checkpoint& ckpt, const MetaDataset& eval_ds,
                             const Config& cfg);

struct AccuracyReport {
  int64_t n_episodes = 0;
  double acc_mean = 0.0;
  double ci_low = 0.0;   // 90% bootstrap interval
  double ci_high = 0.0;
  std::vector<double> per_episode;
};
AccuracyReport eval_accuracy(const Checkpoint& ckpt, const MetaDataset& episodes,
                             const Config& cfg);

// Percentile bootstrap of the mean (90% interval by default).
std::pair<double, double> bootstrap_ci(const std::vector<double>& xs, int64_t resamples,
                                       Rng rng, double coverage = 0.9);

}  // namespace dp
