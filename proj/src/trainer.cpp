#include "dp/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dp/serialize.hpp"

namespace dp {

using nlohmann::json;

ModelBundle ModelBundle::from_config(const Config& cfg, const std::string& dataset_kind,
                                     int64_t d_x) {
  ModelBundle m;
  m.mode = dataset_kind == "hetero" ? TaskMode::classification : TaskMode::regression;
  m.d_x = d_x;
  m.d_z = cfg.get_i64("model.d_z");
  int64_t d_c = cfg.get_i64("posterior.d_c");
  m.d_c = d_c < 0 ? m.d_z : d_c;
  m.conditioned = cfg.get_bool("model.conditioned");
  m.deterministic = cfg.get_str("trainer.baseline") == "no_kl_deterministic";
  if (cfg.get_str("trainer.baseline") != "none" && !m.deterministic)
    throw ConfigError("unknown trainer.baseline: " + cfg.get_str("trainer.baseline"));
  std::string pk = cfg.get_str("posterior.kind");
  if (pk != "gaussian" && pk != "iaf") throw ConfigError("unknown posterior.kind: " + pk);
  m.use_flow = pk == "iaf" && !m.deterministic;
  m.squared_distance = cfg.get_bool("model.squared_distance");
  m.kl_weight = cfg.get_f64("trainer.kl_weight");
  m.n_mc = cfg.get_i64("posterior.n_mc");
  if (m.n_mc < 1) throw ConfigError("posterior.n_mc must be >= 1");

  if (m.mode == TaskMode::regression) {
    MlpConfig nc;
    nc.in_dim = d_x + m.d_z;
    nc.hidden = cfg.get_i64("model.hidden");
    nc.layers = cfg.get_i64("model.layers");
    nc.out_dim = 2;
    nc.layer_norm = cfg.get_bool("model.layer_norm");
    m.net.emplace("net", nc);
  } else {
    MlpConfig nc;
    nc.in_dim = d_x + (m.conditioned ? m.d_z : 0);
    nc.hidden = cfg.get_i64("model.embed_hidden");
    nc.layers = cfg.get_i64("model.embed_layers");
    nc.out_dim = cfg.get_i64("model.d_gamma");
    nc.layer_norm = cfg.get_bool("model.layer_norm");
    m.net.emplace("net", nc);
  }
  if (m.has_posterior() && m.use_flow) {
    FlowConfig fc;
    fc.d_z = m.d_z;
    fc.d_c = m.d_c;
    fc.hidden = cfg.get_i64("posterior.flow_hidden");
    fc.layers = cfg.get_i64("posterior.flow_layers");
    fc.reverse_alternate = cfg.get_bool("posterior.reverse_alternate");
    m.flow.emplace("flow", fc);
  }
  return m;
}

void ModelBundle::register_shared(ParamStore& store, Rng init_rng) const {
  net->register_params(store, init_rng.child("net"));
  if (flow) flow->register_params(store, init_rng.child("flow"), /*identity_init=*/true);
}

void ModelBundle::register_task_table(ParamStore& store, int64_t n_tasks) const {
  if (!has_posterior()) return;
  store.add("tasks/mu", Tensor::zeros({n_tasks, d_z}));
  if (!deterministic) store.add("tasks/log_sigma", Tensor::zeros({n_tasks, d_z}));
  if (flow) store.add("tasks/context", Tensor::zeros({n_tasks, d_c}));
}

namespace {

// Posterior z rows and the per-element KL column for a batch of task rows.
struct PosteriorDraw {
  Value z;
  std::optional<Value> kl;  // absent for the deterministic baseline
};

PosteriorDraw draw_posterior(Tape& tape, const ModelBundle& model, const BoundParams& p,
                             const std::vector<int64_t>& task_rows, const Tensor& eps) {
  Value mu = gather_rows(p["tasks/mu"], task_rows);
  if (model.deterministic) return {mu, std::nullopt};
  Value log_sigma = gather_rows(p["tasks/log_sigma"], task_rows);
  Value eps_v = tape.constant(eps);
  PosteriorRows rows;
  if (model.flow) {
    Value ctx = gather_rows(p["tasks/context"], task_rows);
    rows = iaf_sample_rows(tape, *model.flow, p, mu, log_sigma, ctx, eps_v);
  } else {
    rows = gaussian_sample_rows(tape, mu, log_sigma, eps_v);
  }
  return {rows.z, kl_rows(rows.log_q, rows.z)};
}

BoundParams bind_merged(Tape& tape, const ParamStore& alpha, const ParamStore& theta) {
  BoundParams p = bind_params(tape, alpha, {""});  // everything frozen
  BoundParams t = bind_params(tape, theta);
  for (auto& [name, v] : t.leaves) p.leaves[name] = v;
  return p;
}

}  // namespace

LossParts minibatch_loss(Tape& tape, const ModelBundle& model, const BoundParams& p,
                         const MetaDataset& ds, const std::vector<Draw>& batch,
                         const Tensor& eps, double kl_weight) {
  if (model.mode != TaskMode::regression)
    throw ContractError("minibatch_loss is the regression path");
  int64_t n = static_cast<int64_t>(batch.size());
  if (n < 1) throw ContractError("minibatch_loss: empty batch");
  Tensor x = Tensor::zeros({n, model.d_x});
  Tensor y = Tensor::zeros({n, 1});
  Tensor w = Tensor::zeros({n, 1});
  std::vector<int64_t> task_rows;
  task_rows.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const Draw& d = batch[static_cast<size_t>(i)];
    if (d.task < 0 || d.task >= ds.n_tasks()) throw ContractError("unknown task id in batch");
    const Task& t = ds.tasks[static_cast<size_t>(d.task)];
    for (int64_t j = 0; j < model.d_x; ++j) x.at(i, j) = t.x.at(d.row, j);
    y[i] = t.y[d.row];
    w[i] = static_cast<double>(ds.train_rows(t));
    task_rows.push_back(d.task);
  }

  PosteriorDraw post = draw_posterior(tape, model, p, task_rows, eps);
  Value input = concat(tape.constant(x), post.z, 1);
  Value out = model.net->forward(tape, p, input);
  Value mu_y = slice(out, 0, n, 0, 1);
  Value sigma_y = hetero_noise(slice(out, 0, n, 1, 2));
  Value ll = gaussian_loglik_rows(tape.constant(y), mu_y, sigma_y);

  Value neg_ll = 0.0 - ll;
  Value weighted = mul(tape.constant(w), neg_ll);
  LossParts parts{Value{}, Value{}, Value{}};
  parts.nll_mean = mean(neg_ll);
  if (post.kl) {
    parts.kl_mean = mean(*post.kl);
    parts.loss = mean(weighted + kl_weight * (*post.kl));
  } else {
    parts.kl_mean = tape.constant(Tensor::scalar(0.0));
    parts.loss = mean(weighted);
  }
  return parts;
}

LossParts episode_loss(Tape& tape, const ModelBundle& model, const BoundParams& p,
                       const MetaDataset& ds, const std::vector<int64_t>& episodes,
                       const Tensor& eps, double kl_weight) {
  if (model.mode != TaskMode::classification)
    throw ContractError("episode_loss is the classification path");
  int64_t n_ep = static_cast<int64_t>(episodes.size());
  if (n_ep < 1) throw ContractError("episode_loss: empty batch");
  int64_t support = ds.train_rows(ds.tasks.at(0));
  int64_t total = n_ep * support;

  Tensor x = Tensor::zeros({total, model.d_x});
  std::vector<std::vector<int64_t>> labels(static_cast<size_t>(n_ep));
  std::vector<int64_t> point_to_ep;
  point_to_ep.reserve(static_cast<size_t>(total));
  for (int64_t e = 0; e < n_ep; ++e) {
    int64_t id = episodes[static_cast<size_t>(e)];
    if (id < 0 || id >= ds.n_tasks()) throw ContractError("unknown task id in batch");
    const Task& t = ds.tasks[static_cast<size_t>(id)];
    if (ds.train_rows(t) != support) throw ContractError("inconsistent support sizes");
    for (int64_t i = 0; i < support; ++i) {
      for (int64_t j = 0; j < model.d_x; ++j) x.at(e * support + i, j) = t.x.at(i, j);
      labels[static_cast<size_t>(e)].push_back(static_cast<int64_t>(t.y[i]));
      point_to_ep.push_back(e);
    }
  }

  Value input = tape.constant(x);
  std::optional<Value> kl;
  if (model.has_posterior()) {
    PosteriorDraw post = draw_posterior(tape, model, p, episodes, eps);
    input = concat(input, gather_rows(post.z, point_to_ep), 1);
    kl = post.kl;
  }
  Value gam = model.net->forward(tape, p, input);

  Value loss_sum{nullptr, -1};
  Value nll_sum{nullptr, -1};
  for (int64_t e = 0; e < n_ep; ++e) {
    Value ge = slice(gam, e * support, (e + 1) * support, 0, gam.cols());
    Value ll = loo_marginal_loglik_rows(tape, ge, labels[static_cast<size_t>(e)],
                                        model.squared_distance);
    Value neg = 0.0 - ll;
    Value le = kl ? neg + kl_weight * slice(*kl, e, e + 1, 0, 1) : neg;
    loss_sum = e == 0 ? le : loss_sum + le;
    nll_sum = e == 0 ? neg : nll_sum + neg;
  }
  LossParts parts{Value{}, Value{}, Value{}};
  parts.loss = loss_sum / static_cast<double>(n_ep);
  parts.nll_mean = nll_sum / static_cast<double>(n_ep * support);
  parts.kl_mean = kl ? mean(*kl) : tape.constant(Tensor::scalar(0.0));
  return parts;
}

void Trainer::init_settings(const Config& cfg) {
  cfg_ = cfg;
  max_steps_ = cfg.get_i64("trainer.max_steps");
  eval_every_ = cfg.get_i64("trainer.eval_every");
  n_mb_ = cfg.get_i64("trainer.n_mb");
  kl_weight_ = cfg.get_f64("trainer.kl_weight");
  weight_decay_ = cfg.get_f64("trainer.weight_decay");
  posterior_lr_scale_ = cfg.get_f64("trainer.posterior_lr_scale");
  adam_cfg_ = {cfg.get_f64("trainer.learning_rate"), cfg.get_f64("trainer.adam_beta1"),
               cfg.get_f64("trainer.adam_beta2"), cfg.get_f64("trainer.adam_eps")};
  std::string sampling = cfg.get_str("trainer.sampling");
  if (sampling == "task_uniform")
    sampling_ = SamplingMode::task_uniform;
  else if (sampling == "datum_uniform")
    sampling_ = SamplingMode::datum_uniform;
  else
    throw ConfigError("unknown trainer.sampling: " + sampling);
  if (n_mb_ < 1) throw ConfigError("trainer.n_mb must be >= 1");
  if (kl_weight_ < 0.0) throw ConfigError("trainer.kl_weight must be >= 0");
}

Trainer::Trainer(const Config& cfg, MetaDataset ds) : ds_(std::move(ds)) {
  init_settings(cfg);
  if (ds_.tasks.empty()) throw ContractError("trainer: empty meta-dataset");
  model_ = ModelBundle::from_config(cfg, ds_.info.kind, ds_.tasks[0].d_x());
  uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));
  model_.register_shared(params_, Rng(seed).child("init"));
  model_.register_task_table(params_, ds_.n_tasks());
  batch_rng_ = Rng(seed).child("train").child("minibatch");
  eps_rng_ = Rng(seed).child("train").child("eps");
  settings_ = json{{"config", cfg.to_json()},
                   {"derived",
                    {{"d_x", ds_.tasks[0].d_x()},
                     {"dataset_kind", ds_.info.kind},
                     {"n_tasks", ds_.n_tasks()}}}};
  last_good_ = checkpoint();
}

Trainer::Trainer(const Config& cfg, MetaDataset ds, const Checkpoint& resume)
    : Trainer(Config::from_json(resume.settings.at("config")), std::move(ds)) {
  // budget and logging knobs follow the caller's config; the model is pinned
  // by the checkpoint settings
  max_steps_ = cfg.get_i64("trainer.max_steps");
  eval_every_ = cfg.get_i64("trainer.eval_every");
  cfg_.set("trainer.max_steps", max_steps_);
  cfg_.set("trainer.eval_every", eval_every_);
  if (model_.has_posterior() &&
      params_.get("tasks/mu").rows() != resume.params.get("tasks/mu").rows())
    throw ContractError("checkpoint task table does not match the dataset");
  params_ = resume.params;
  adam_ = AdamState();
  for (const auto& [name, mv] : resume.adam_moments) adam_.set(name, mv.first, mv.second);
  adam_.set_t(resume.adam_t);
  batch_rng_.restore(resume.batch_rng);
  eps_rng_.restore(resume.eps_rng);
  step_ = resume.step;
  last_good_ = checkpoint();
}

Metrics Trainer::step_once() {
  Tape tape;
  BoundParams p = bind_params(tape, params_);

  LossParts parts{Value{}, Value{}, Value{}};
  if (model_.mode == TaskMode::regression) {
    std::vector<Draw> draws = sample_minibatch(ds_, n_mb_, batch_rng_, sampling_);
    if (model_.n_mc > 1) {
      std::vector<Draw> expanded;
      for (const Draw& d : draws)
        for (int64_t r = 0; r < model_.n_mc; ++r) expanded.push_back(d);
      draws = std::move(expanded);
    }
    Tensor eps;
    if (model_.has_posterior() && !model_.deterministic)
      eps = eps_rng_.normal_tensor({static_cast<int64_t>(draws.size()), model_.d_z});
    parts = minibatch_loss(tape, model_, p, ds_, draws, eps, kl_weight_);
  } else {
    std::vector<int64_t> episodes;
    for (int64_t i = 0; i < n_mb_; ++i)
      episodes.push_back(
          static_cast<int64_t>(batch_rng_.uniform_int(static_cast<uint64_t>(ds_.n_tasks()))));
    if (model_.n_mc > 1) {
      std::vector<int64_t> expanded;
      for (int64_t e : episodes)
        for (int64_t r = 0; r < model_.n_mc; ++r) expanded.push_back(e);
      episodes = std::move(expanded);
    }
    Tensor eps;
    if (model_.has_posterior() && !model_.deterministic)
      eps = eps_rng_.normal_tensor({static_cast<int64_t>(episodes.size()), model_.d_z});
    parts = episode_loss(tape, model_, p, ds_, episodes, eps, kl_weight_);
  }

  tape.backward(parts.loss);
  auto grads = collect_grads(p);
  if (weight_decay_ > 0.0) {
    for (auto& [name, g] : grads) {
      if (name.rfind("net/", 0) == 0 || name.rfind("flow/", 0) == 0) {
        const Tensor& v = params_.get(name);
        for (int64_t i = 0; i < g.size(); ++i) g[i] += weight_decay_ * v[i];
      }
    }
  }
  std::unordered_map<std::string, double> lr_scale;
  if (posterior_lr_scale_ != 1.0)
    for (const std::string& name : params_.names())
      if (name.rfind("tasks/", 0) == 0) lr_scale[name] = posterior_lr_scale_;
  adam_.step(params_, grads, adam_cfg_, lr_scale.empty() ? nullptr : &lr_scale);

  ++step_;
  Metrics m;
  m.step = step_;
  m.loss = parts.loss.val().item();
  m.nll = parts.nll_mean.val().item();
  m.kl = parts.kl_mean.val().item();
  return m;
}

void Trainer::run(const std::function<void(const Metrics&)>& on_metrics) {
  auto t0 = std::chrono::steady_clock::now();
  while (step_ < max_steps_) {
    Metrics m;
    try {
      m = step_once();
    } catch (const NumericError& e) {
      throw TrainingDiverged(std::string("training diverged at step ") +
                                 std::to_string(step_ + 1) + ": " + e.what(),
                             "");
    }
    if (step_ % eval_every_ == 0 || step_ == max_steps_) {
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
      last_good_ = checkpoint();
      if (on_metrics) on_metrics(m);
    }
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.step = step_;
  c.settings = settings_;
  c.params = params_;
  for (const std::string& name : params_.names()) {
    if (adam_.has(name))
      c.adam_moments.push_back({name, {adam_.m(name), adam_.v(name)}});
    else
      c.adam_moments.push_back({name,
                                {Tensor::zeros(params_.get(name).shape()),
                                 Tensor::zeros(params_.get(name).shape())}});
  }
  c.adam_t = adam_.t();
  c.batch_rng = batch_rng_.state();
  c.eps_rng = eps_rng_.state();
  return c;
}

const Checkpoint& Trainer::last_good() const {
  if (!last_good_) throw ContractError("no checkpoint recorded yet");
  return *last_good_;
}

namespace {
constexpr char kCkptMagic[4] = {'D', 'P', 'C', 'K'};
constexpr uint16_t kCkptVersion = 1;

void write_rng_state(ByteWriter& w, const Rng::State& s) {
  w.u64(s.key);
  w.u64(s.counter);
  w.u8(s.has_cached ? 1 : 0);
  w.f64(s.cached);
}

Rng::State read_rng_state(ByteReader& r) {
  Rng::State s;
  s.key = r.u64();
  s.counter = r.u64();
  s.has_cached = r.u8() != 0;
  s.cached = r.f64();
  return s;
}
}  // namespace

void Checkpoint::save(const std::string& path) const {
  ByteWriter w(path);
  w.bytes(kCkptMagic, 4);
  w.u16(kCkptVersion);
  w.u64(static_cast<uint64_t>(step));
  w.str(settings.dump());
  write_rng_state(w, batch_rng);
  write_rng_state(w, eps_rng);
  w.u64(static_cast<uint64_t>(adam_t));
  w.u32(static_cast<uint32_t>(params.names().size()));
  if (adam_moments.size() != params.names().size())
    throw ContractError("checkpoint moments out of sync with parameters");
  for (size_t i = 0; i < params.names().size(); ++i) {
    const std::string& name = params.names()[i];
    if (adam_moments[i].first != name) throw ContractError("checkpoint moment order mismatch");
    w.str(name);
    w.tensor(params.get(name));
    w.tensor(adam_moments[i].second.first);
    w.tensor(adam_moments[i].second.second);
  }
  w.close();
}

Checkpoint Checkpoint::load(const std::string& path) {
  ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != std::string(kCkptMagic, 4))
    throw FormatError("not a checkpoint file (bad magic): " + path);
  uint16_t version = r.u16();
  if (version != kCkptVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.step = static_cast<int64_t>(r.u64());
  try {
    c.settings = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError("invalid settings block in checkpoint: " + std::string(e.what()));
  }
  c.batch_rng = read_rng_state(r);
  c.eps_rng = read_rng_state(r);
  c.adam_t = static_cast<int64_t>(r.u64());
  uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    Tensor value = r.tensor();
    Tensor m = r.tensor();
    Tensor v = r.tensor();
    c.params.add(name, std::move(value));
    c.adam_moments.push_back({name, {std::move(m), std::move(v)}});
  }
  if (!r.at_eof()) throw FormatError("trailing bytes in checkpoint: " + path);
  return c;
}

MetricsCsv::MetricsCsv(const std::string& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw IoError("cannot open metrics file: " + path);
  if (!append) out_ << "step,loss,nll,kl,wall_ms\n";
}

void MetricsCsv::write(const Metrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.3f\n",
                static_cast<long long>(m.step), m.loss, m.nll, m.kl, m.wall_ms);
  out_ << buf;
  out_.flush();
}

namespace {

struct RebuiltSystem {
  Config cfg;
  ModelBundle model;
};

RebuiltSystem system_from_checkpoint(const Checkpoint& ckpt) {
  Config cfg = Config::from_json(ckpt.settings.at("config"));
  const json& derived = ckpt.settings.at("derived");
  ModelBundle model = ModelBundle::from_config(cfg, derived.at("dataset_kind").get<std::string>(),
                                               derived.at("d_x").get<int64_t>());
  return {std::move(cfg), std::move(model)};
}

// Single-task dataset wrapper so adaptation reuses the batch loss machinery.
MetaDataset single_task_dataset(const Task& task, int64_t n_train, bool labels,
                                const json& base_config) {
  MetaDataset ds;
  ds.info.kind = labels ? "hetero" : "harmonics";
  ds.info.labels = labels;
  ds.info.config = base_config;
  ds.info.config["eval_rows"] = task.n() - n_train;
  Task t = task;
  t.task_id = 0;
  ds.tasks.push_back(std::move(t));
  return ds;
}

}  // namespace

AdaptResult adapt_new_task(const Checkpoint& ckpt, const Task& task, int64_t n_train,
                           const Config& cfg, Rng rng) {
  RebuiltSystem sys = system_from_checkpoint(ckpt);
  ModelBundle& model = sys.model;
  if (!model.has_posterior())
    throw ContractError("adapt_new_task: the model has no per-task posterior");
  if (n_train < 1 || n_train > task.n())
    throw ContractError("adapt_new_task: invalid n_train");

  int64_t steps = cfg.get_i64("adapt.steps");
  double lr = cfg.get_f64("adapt.learning_rate");
  if (lr < 0.0) lr = cfg.get_f64("trainer.learning_rate");
  AdamConfig acfg{lr, cfg.get_f64("trainer.adam_beta1"), cfg.get_f64("trainer.adam_beta2"),
                  cfg.get_f64("trainer.adam_eps")};
  double kl_weight = model.kl_weight;

  ParamStore theta;
  theta.add("tasks/mu", Tensor::zeros({1, model.d_z}));
  if (!model.deterministic) theta.add("tasks/log_sigma", Tensor::zeros({1, model.d_z}));
  if (model.flow) theta.add("tasks/context", Tensor::zeros({1, model.d_c}));

  MetaDataset ds = single_task_dataset(
      task, n_train, model.mode == TaskMode::classification,
      model.mode == TaskMode::classification ? json{{"eval_rows", 0}} : json::object());

  std::vector<Draw> full_batch;
  for (int64_t i = 0; i < n_train; ++i) full_batch.push_back({0, i});
  std::vector<int64_t> episode{0};

  AdamState adam;
  double final_loss = 0.0;
  for (int64_t s = 0; s < steps; ++s) {
    Tape tape;
    BoundParams p = bind_merged(tape, ckpt.params, theta);
    Tensor eps;
    if (!model.deterministic) eps = rng.normal_tensor({model.mode == TaskMode::regression
                                                           ? n_train
                                                           : static_cast<int64_t>(1),
                                                       model.d_z});
    LossParts parts =
        model.mode == TaskMode::regression
            ? minibatch_loss(tape, model, p, ds, full_batch, eps, kl_weight)
            : episode_loss(tape, model, p, ds, episode, eps, kl_weight);
    // mean over the full batch times n rescales to the task ELBO; the
    // optimizer only sees theta either way
    tape.backward(parts.loss);
    adam.step(theta, collect_grads(p), acfg);
    final_loss = parts.loss.val().item();
  }

  AdaptResult out;
  out.posterior.mu = theta.get("tasks/mu");
  out.posterior.log_sigma =
      model.deterministic ? Tensor::zeros({1, model.d_z}) : theta.get("tasks/log_sigma");
  out.posterior.context =
      model.flow ? theta.get("tasks/context") : Tensor::zeros({1, model.d_c});
  out.final_loss = final_loss;
  return out;
}

Predictive predict_marginal(const Checkpoint& ckpt, const TaskPosteriorParams& posterior,
                            const Tensor& xgrid, int64_t n_samples, Rng rng) {
  if (n_samples < 1) throw ContractError("predict_marginal: n_samples must be >= 1");
  RebuiltSystem sys = system_from_checkpoint(ckpt);
  ModelBundle& model = sys.model;
  if (model.mode != TaskMode::regression)
    throw ContractError("predict_marginal is a regression facility");
  int64_t m = xgrid.rows();
  if (xgrid.cols() != model.d_x) throw ShapeError("predict_marginal: x grid width != d_x");

  Predictive out;
  out.mu_samples = Tensor::zeros({n_samples, m});
  out.sigma_samples = Tensor::zeros({n_samples, m});
  for (int64_t s = 0; s < n_samples; ++s) {
    Tensor z;
    if (model.deterministic) {
      z = posterior.mu;
    } else {
      Tensor eps = rng.normal_tensor({1, model.d_z});
      PosteriorSample ps = model.flow
                               ? iaf_sample(posterior, *model.flow, ckpt.params, eps)
                               : gaussian_sample(posterior, eps);
      z = ps.z;
    }
    Tape tape;
    BoundParams p = bind_params(tape, ckpt.params, {""});
    Value zrows = broadcast_to(tape.constant(z), {m, model.d_z});
    Value outv = model.net->forward(tape, p, concat(tape.constant(xgrid), zrows, 1));
    for (int64_t i = 0; i < m; ++i) {
      out.mu_samples.at(s, i) = outv.val().at(i, 0);
      out.sigma_samples.at(s, i) = hetero_noise(outv.val().at(i, 1));
    }
  }

  out.mean = Tensor::zeros({m, 1});
  out.epistemic_std = Tensor::zeros({m, 1});
  out.total_std = Tensor::zeros({m, 1});
  for (int64_t i = 0; i < m; ++i) {
    double mu = 0.0, mu2 = 0.0, alea = 0.0;
    for (int64_t s = 0; s < n_samples; ++s) {
      mu += out.mu_samples.at(s, i);
      mu2 += out.mu_samples.at(s, i) * out.mu_samples.at(s, i);
      alea += out.sigma_samples.at(s, i) * out.sigma_samples.at(s, i);
    }
    mu /= static_cast<double>(n_samples);
    mu2 /= static_cast<double>(n_samples);
    alea /= static_cast<double>(n_samples);
    double epi = std::max(0.0, mu2 - mu * mu);
    out.mean[i] = mu;
    out.epistemic_std[i] = std::sqrt(epi);
    out.total_std[i] = std::sqrt(alea + epi);
  }
  return out;
}

std::vector<MseRow> eval_mse(const Checkpoint& ckpt, const MetaDataset& eval_ds,
                             const Config& cfg) {
  std::vector<int64_t> sizes = cfg.get_i64_list("eval.train_sizes");
  int64_t n_tasks = std::min<int64_t>(cfg.get_i64("eval.n_tasks"), eval_ds.n_tasks());
  int64_t n_samples = cfg.get_i64("eval.n_samples");
  int64_t eval_rows = eval_ds.eval_rows();
  if (eval_rows < 1) throw ContractError("eval_mse: dataset has no held-out rows per task");
  uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));

  std::vector<MseRow> rows;
  for (int64_t size : sizes) {
    double acc = 0.0, acc2 = 0.0;
    for (int64_t t = 0; t < n_tasks; ++t) {
      const Task& task = eval_ds.tasks[static_cast<size_t>(t)];
      if (size > eval_ds.train_rows(task))
        throw ContractError("eval_mse: bucket larger than available training rows");
      Rng rng = Rng(seed).child("eval").child(static_cast<uint64_t>(size)).child(
          static_cast<uint64_t>(t));
      AdaptResult ad = adapt_new_task(ckpt, task, size, cfg, rng.child("adapt"));
      int64_t n_eval = eval_rows;
      Tensor xe = Tensor::zeros({n_eval, task.d_x()});
      Tensor ye = Tensor::zeros({n_eval, 1});
      for (int64_t i = 0; i < n_eval; ++i) {
        int64_t src = task.n() - eval_rows + i;
        for (int64_t j = 0; j < task.d_x(); ++j) xe.at(i, j) = task.x.at(src, j);
        ye[i] = task.y[src];
      }
      Predictive pred = predict_marginal(ckpt, ad.posterior, xe, n_samples, rng.child("pred"));
      double mse = 0.0;
      for (int64_t i = 0; i < n_eval; ++i) {
        double d = pred.mean[i] - ye[i];
        mse += d * d / static_cast<double>(n_eval);
      }
      acc += mse;
      acc2 += mse * mse;
    }
    MseRow row;
    row.train_size = size;
    row.n_tasks = n_tasks;
    row.mse_mean = acc / static_cast<double>(n_tasks);
    double var = acc2 / static_cast<double>(n_tasks) - row.mse_mean * row.mse_mean;
    row.mse_stderr = std::sqrt(std::max(0.0, var) / static_cast<double>(n_tasks));
    rows.push_back(row);
  }
  return rows;
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& xs, int64_t resamples, Rng rng,
                                       double coverage) {
  if (xs.empty()) throw ContractError("bootstrap_ci: empty sample");
  std::vector<double> means;
  means.reserve(static_cast<size_t>(resamples));
  for (int64_t r = 0; r < resamples; ++r) {
    double s = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) s += xs[rng.uniform_int(xs.size())];
    means.push_back(s / static_cast<double>(xs.size()));
  }
  std::sort(means.begin(), means.end());
  double tail = (1.0 - coverage) / 2.0;
  auto pick = [&](double q) {
    double pos = q * static_cast<double>(means.size() - 1);
    return means[static_cast<size_t>(pos + 0.5)];
  };
  return {pick(tail), pick(1.0 - tail)};
}

AccuracyReport eval_accuracy(const Checkpoint& ckpt, const MetaDataset& episodes,
                             const Config& cfg) {
  RebuiltSystem sys = system_from_checkpoint(ckpt);
  ModelBundle& model = sys.model;
  if (model.mode != TaskMode::classification)
    throw ContractError("eval_accuracy is a classification facility");
  int64_t n_episodes = std::min<int64_t>(cfg.get_i64("eval.n_episodes"), episodes.n_tasks());
  int64_t n_samples = cfg.get_i64("eval.n_samples");
  uint64_t seed = static_cast<uint64_t>(cfg.get_i64("seed"));

  AccuracyReport rep;
  rep.n_episodes = n_episodes;
  for (int64_t e = 0; e < n_episodes; ++e) {
    const Task& task = episodes.tasks[static_cast<size_t>(e)];
    int64_t support = episodes.train_rows(task);
    int64_t n_query = task.n() - support;
    if (n_query < 1) throw ContractError("eval_accuracy: episode has no query rows");
    std::vector<int64_t> labels;
    for (int64_t i = 0; i < support; ++i) labels.push_back(static_cast<int64_t>(task.y[i]));
    int64_t n_way = 1 + *std::max_element(labels.begin(), labels.end());

    Rng rng = Rng(seed).child("eval_acc").child(static_cast<uint64_t>(e));
    Tensor probs = Tensor::zeros({n_query, n_way});

    auto accumulate_probs = [&](const Tensor& z, bool with_z) {
      Tape tape;
      BoundParams p = bind_params(tape, ckpt.params, {""});
      Value x_all = tape.constant(task.x);
      Value input = x_all;
      if (with_z) input = concat(x_all, broadcast_to(tape.constant(z), {task.n(), model.d_z}), 1);
      Value gam = model.net->forward(tape, p, input);
      Value sup = slice(gam, 0, support, 0, gam.cols());
      Value que = slice(gam, support, task.n(), 0, gam.cols());
      Value logp = proto_query_logprob_rows(tape, sup, labels, que, model.squared_distance);
      for (int64_t i = 0; i < n_query; ++i)
        for (int64_t c = 0; c < n_way; ++c) probs.at(i, c) += std::exp(logp.val().at(i, c));
    };

    if (model.has_posterior()) {
      AdaptResult ad = adapt_new_task(ckpt, task, support, cfg, rng.child("adapt"));
      Rng pred_rng = rng.child("pred");
      int64_t draws = model.deterministic ? 1 : n_samples;
      for (int64_t s = 0; s < draws; ++s) {
        Tensor z;
        if (model.deterministic) {
          z = ad.posterior.mu;
        } else {
          Tensor eps = pred_rng.normal_tensor({1, model.d_z});
          PosteriorSample ps = model.flow
                                   ? iaf_sample(ad.posterior, *model.flow, ckpt.params, eps)
                                   : gaussian_sample(ad.posterior, eps);
          z = ps.z;
        }
        accumulate_probs(z, true);
      }
    } else {
      accumulate_probs(Tensor(), false);
    }

    int64_t correct = 0;
    for (int64_t i = 0; i < n_query; ++i) {
      int64_t arg = 0;
      for (int64_t c = 1; c < n_way; ++c)
        if (probs.at(i, c) > probs.at(i, arg)) arg = c;
      correct += arg == static_cast<int64_t>(task.y[support + i]);
    }
    rep.per_episode.push_back(static_cast<double>(correct) / static_cast<double>(n_query));
  }

  double s = 0.0;
  for (double a : rep.per_episode) s += a;
  rep.acc_mean = s / static_cast<double>(rep.per_episode.size());
  auto [lo, hi] = bootstrap_ci(rep.per_episode, cfg.get_i64("eval.bootstrap"),
                               Rng(seed).child("bootstrap"));
  rep.ci_low = lo;
  rep.ci_high = hi;
  return rep;
}

}  // namespace dp
