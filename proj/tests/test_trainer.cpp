#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dp/trainer.hpp"

using namespace dp;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / "dp_trainer_tests";
  fs::create_directories(p);
  return p;
}

Config tiny_config() {
  Config cfg = Config::defaults();
  cfg.set("seed", 0);
  cfg.set("model.hidden", 32);
  cfg.set("model.layers", 4);
  cfg.set("model.d_z", 4);
  cfg.set("posterior.kind", "gaussian");
  cfg.set("trainer.n_mb", 32);
  cfg.set("trainer.learning_rate", 1e-3);
  cfg.set("trainer.posterior_lr_scale", 10.0);
  cfg.set("trainer.max_steps", 200);
  cfg.set("trainer.eval_every", 50);
  cfg.set("trainer.weight_decay", 0.0);
  return cfg;
}

MetaDataset tiny_harmonics(int64_t n_tasks = 30, uint64_t seed = 3) {
  HarmonicsConfig g;
  g.n_tasks = n_tasks;
  g.samples_min = 4;
  g.samples_max = 20;
  g.seed = seed;
  return gen_harmonics(g);
}

// trained once, shared by the adaptation and eval tests
const Checkpoint& shared_checkpoint() {
  static Checkpoint ckpt = [] {
    Config cfg = tiny_config();
    cfg.set("trainer.max_steps", 800);
    Trainer tr(cfg, tiny_harmonics(40, 5));
    tr.run();
    return tr.checkpoint();
  }();
  return ckpt;
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor p = Tensor::row({1.0, -2.0, 3.0});
  Tensor g = Tensor::zeros({1, 3});
  Tensor m = Tensor::zeros({1, 3});
  Tensor v = Tensor::zeros({1, 3});
  Tensor before = p;
  adam_update(p, g, m, v, 1, {.lr = 0.1});
  CHECK(tensors_equal(p, before));
}

TEST_CASE("adam: bias-corrected first step moves by about lr * sign(g)") {
  Tensor p = Tensor::row({0.0, 0.0});
  Tensor g = Tensor::row({3.7, -0.002});
  Tensor m = Tensor::zeros({1, 2});
  Tensor v = Tensor::zeros({1, 2});
  adam_update(p, g, m, v, 1, {.lr = 0.01});
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("adam reaches the optimum of a convex quadratic") {
  // f(x) = 0.5 * sum d_i (x_i - a_i)^2, closed-form optimum at a
  Tensor a = Tensor::row({1.5, -2.0, 0.3});
  Tensor d = Tensor::row({1.0, 4.0, 0.5});
  Tensor x = Tensor::zeros({1, 3});
  Tensor m = Tensor::zeros({1, 3});
  Tensor v = Tensor::zeros({1, 3});
  for (int64_t t = 1; t <= 200; ++t) {
    Tensor g = Tensor::zeros({1, 3});
    for (int64_t i = 0; i < 3; ++i) g[i] = d[i] * (x[i] - a[i]);
    adam_update(x, g, m, v, t, {.lr = 0.08});
  }
  CHECK(max_abs_diff(x, a) < 1e-3);
}

TEST_CASE("minibatch loss with kl_weight 0 and n_j 1 equals the point likelihood") {
  HarmonicsConfig g;
  g.n_tasks = 1;
  g.samples_min = g.samples_max = 1;
  g.seed = 2;
  MetaDataset ds = gen_harmonics(g);
  Config cfg = tiny_config();
  cfg.set("trainer.baseline", "no_kl_deterministic");
  Trainer tr(cfg, ds);

  Tape tape;
  BoundParams p = bind_params(tape, tr.params());
  LossParts parts = minibatch_loss(tape, tr.model(), p, ds, {{0, 0}}, Tensor(), 0.0);

  ResidualMlp net("net", tr.model().net->config());
  Tensor x = Tensor::from({1, 1}, {ds.tasks[0].x[0]});
  Tensor z = Tensor::zeros({1, 4});  // deterministic posterior at init: z = mu = 0
  auto [mu_y, s] = regress_forward(net, tr.params(), x, z);
  double expect = -gaussian_loglik(ds.tasks[0].y[0], mu_y, hetero_noise(s));
  CHECK(parts.loss.val().item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(parts.kl_mean.val().item() == 0.0);

  CHECK_THROWS_AS(minibatch_loss(tape, tr.model(), p, ds, {{5, 0}}, Tensor(), 0.0),
                  ContractError);
}

TEST_CASE("prior-initialized posterior has zero KL estimate") {
  Config cfg = tiny_config();
  cfg.set("posterior.kind", "iaf");
  cfg.set("posterior.flow_layers", 2);
  cfg.set("posterior.flow_hidden", 8);
  Trainer tr(cfg, tiny_harmonics(4));
  Metrics m = tr.step_once();
  // mu=0, sigma=1 and an identity flow: each sample's KL term is ~0 exactly
  CHECK(std::abs(m.kl) < 1e-10);
}

TEST_CASE("likelihood term scales exactly linearly in n_j") {
  HarmonicsConfig g;
  g.n_tasks = 1;
  g.samples_min = g.samples_max = 8;
  g.seed = 4;
  MetaDataset small = gen_harmonics(g);
  MetaDataset big = small;
  {
    // same task content padded to twice the rows: n_j doubles
    Task& t = big.tasks[0];
    Tensor x = Tensor::zeros({16, 1}), y = Tensor::zeros({16, 1});
    for (int64_t i = 0; i < 16; ++i) {
      x[i] = t.x[i % 8];
      y[i] = t.y[i % 8];
    }
    t.x = x;
    t.y = y;
  }
  Config cfg = tiny_config();
  cfg.set("trainer.baseline", "no_kl_deterministic");
  Trainer tr(cfg, small);

  Tape t1;
  BoundParams p1 = bind_params(t1, tr.params());
  double l1 = minibatch_loss(t1, tr.model(), p1, small, {{0, 0}}, Tensor(), 0.0)
                  .loss.val()
                  .item();
  Tape t2;
  BoundParams p2 = bind_params(t2, tr.params());
  double l2 =
      minibatch_loss(t2, tr.model(), p2, big, {{0, 0}}, Tensor(), 0.0).loss.val().item();
  CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-14));
}

TEST_CASE("with kl_weight 0 and deterministic posterior the trainer is plain ML") {
  MetaDataset ds = tiny_harmonics(6, 9);
  Config cfg = tiny_config();
  cfg.set("trainer.baseline", "no_kl_deterministic");
  cfg.set("trainer.kl_weight", 0.0);
  cfg.set("trainer.posterior_lr_scale", 1.0);
  cfg.set("trainer.n_mb", 16);
  Trainer tr(cfg, ds);

  // independently coded maximum-likelihood loop sharing streams and init
  uint64_t seed = 0;
  ParamStore store;
  MlpConfig nc{.in_dim = 1 + 4, .hidden = 32, .layers = 4, .out_dim = 2, .layer_norm = true};
  ResidualMlp net("net", nc);
  net.register_params(store, Rng(seed).child("init").child("net"));
  store.add("tasks/mu", Tensor::zeros({6, 4}));
  AdamState adam;
  Rng batch_rng = Rng(seed).child("train").child("minibatch");

  for (int step = 0; step < 10; ++step) {
    Metrics m = tr.step_once();

    auto draws = sample_minibatch(ds, 16, batch_rng);
    Tape tape;
    BoundParams p = bind_params(tape, store);
    int64_t n = 16;
    Tensor x = Tensor::zeros({n, 1}), y = Tensor::zeros({n, 1}), w = Tensor::zeros({n, 1});
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < n; ++i) {
      const Task& t = ds.tasks[static_cast<size_t>(draws[static_cast<size_t>(i)].task)];
      x[i] = t.x[draws[static_cast<size_t>(i)].row];
      y[i] = t.y[draws[static_cast<size_t>(i)].row];
      w[i] = static_cast<double>(t.n());
      rows.push_back(draws[static_cast<size_t>(i)].task);
    }
    Value z = gather_rows(p["tasks/mu"], rows);
    Value out = net.forward(tape, p, concat(tape.constant(x), z, 1));
    Value ll = gaussian_loglik_rows(tape.constant(y), slice(out, 0, n, 0, 1),
                                    hetero_noise(slice(out, 0, n, 1, 2)));
    Value loss = mean(mul(tape.constant(w), 0.0 - ll));
    tape.backward(loss);
    adam.step(store, collect_grads(p), {.lr = 1e-3});

    CHECK(std::abs(m.loss - loss.val().item()) < 1e-10);
  }
}

TEST_CASE("deterministic baseline consumes no posterior noise") {
  Config cfg = tiny_config();
  cfg.set("trainer.baseline", "no_kl_deterministic");
  Trainer tr(cfg, tiny_harmonics(5));
  for (int i = 0; i < 3; ++i) tr.step_once();
  CHECK(tr.checkpoint().eps_rng.counter == 0);
  CHECK(tr.checkpoint().step == 3);
}

TEST_CASE("same seed twice gives an identical metrics stream") {
  Config cfg = tiny_config();
  cfg.set("trainer.max_steps", 60);
  cfg.set("trainer.eval_every", 10);
  MetaDataset ds = tiny_harmonics(8, 11);
  std::vector<Metrics> a, b;
  Trainer t1(cfg, ds);
  t1.run([&](const Metrics& m) { a.push_back(m); });
  Trainer t2(cfg, ds);
  t2.run([&](const Metrics& m) { b.push_back(m); });
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].step == b[i].step);
    CHECK(a[i].loss == b[i].loss);  // bit-identical
    CHECK(a[i].nll == b[i].nll);
    CHECK(a[i].kl == b[i].kl);
  }
}

TEST_CASE("training metrics ignore generator metadata entirely") {
  Config cfg = tiny_config();
  MetaDataset ds1 = tiny_harmonics(6, 13);
  MetaDataset ds2 = ds1;
  for (Task& t : ds2.tasks) t.meta_json = "{}";
  Trainer t1(cfg, ds1);
  Trainer t2(cfg, ds2);
  for (int i = 0; i < 10; ++i) {
    Metrics a = t1.step_once();
    Metrics b = t2.step_once();
    CHECK(a.loss == b.loss);
  }
}

TEST_CASE("checkpoint file round-trip restores training bit-exactly") {
  Config cfg = tiny_config();
  cfg.set("posterior.kind", "iaf");
  cfg.set("posterior.flow_layers", 2);
  cfg.set("posterior.flow_hidden", 8);
  MetaDataset ds = tiny_harmonics(6, 17);
  Trainer tr(cfg, ds);
  for (int i = 0; i < 5; ++i) tr.step_once();

  fs::path p = temp_dir() / "ckpt.dpck";
  tr.checkpoint().save(p.string());
  Checkpoint loaded = Checkpoint::load(p.string());
  CHECK(loaded.step == 5);
  CHECK(loaded.params.checksum() == tr.params().checksum());

  Trainer resumed(cfg, ds, loaded);
  CHECK(resumed.step_count() == 5);  // the step counter continues
  Metrics a = tr.step_once();
  Metrics b = resumed.step_once();
  CHECK(a.step == b.step);
  CHECK(a.loss == b.loss);
  CHECK(a.kl == b.kl);
}

TEST_CASE("corrupted checkpoint is rejected") {
  fs::path p = temp_dir() / "bad.dpck";
  std::ofstream(p, std::ios::binary) << "NOPE-not-a-checkpoint";
  CHECK_THROWS_AS(Checkpoint::load(p.string()), FormatError);
}

TEST_CASE("smoothed loss decreases on a single constant-target task") {
  HarmonicsConfig g;
  g.n_tasks = 1;
  g.samples_min = g.samples_max = 32;
  g.amplitude_scale = 0.0;  // y ~ N(0, sigma^2)
  g.seed = 21;
  Config cfg = tiny_config();
  cfg.set("trainer.n_mb", 16);
  Trainer tr(cfg, gen_harmonics(g));
  std::vector<double> losses;
  for (int i = 0; i < 400; ++i) losses.push_back(tr.step_once().loss);
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 50; ++i) {
    early += losses[static_cast<size_t>(i)] / 50.0;
    late += losses[losses.size() - 1 - static_cast<size_t>(i)] / 50.0;
  }
  CHECK(late < early);
}

TEST_CASE("divergent training aborts with the last good state preserved") {
  Config cfg = tiny_config();
  cfg.set("model.layer_norm", false);
  cfg.set("trainer.learning_rate", 1e80);
  cfg.set("trainer.max_steps", 50);
  cfg.set("trainer.eval_every", 1000);  // no intermediate snapshot
  Trainer tr(cfg, tiny_harmonics(4, 23));
  CHECK_THROWS_AS(tr.run(), TrainingDiverged);
  CHECK(tr.last_good().step == 0);
}

TEST_CASE("adaptation starts at the prior and never touches shared weights") {
  const Checkpoint& ckpt = shared_checkpoint();
  HarmonicsConfig g;
  g.n_tasks = 1;
  g.samples_min = g.samples_max = 40;
  g.seed = 31;
  g.split = Split::test;
  Task task = gen_harmonics(g).tasks[0];

  Config cfg = Config::from_json(ckpt.settings.at("config"));
  cfg.set("adapt.steps", 0);
  uint64_t before = ckpt.params.checksum();
  AdaptResult r = adapt_new_task(ckpt, task, 8, cfg, Rng(1));
  CHECK(ckpt.params.checksum() == before);
  CHECK(kl_closed_form_gaussian(r.posterior) == 0.0);  // exactly the prior

  cfg.set("adapt.steps", 50);
  cfg.set("adapt.learning_rate", 0.01);
  adapt_new_task(ckpt, task, 8, cfg, Rng(1));
  CHECK(ckpt.params.checksum() == before);  // frozen alpha, bit-exact
}

TEST_CASE("posterior contracts with more data (sigma shrinks 64 vs 2 points)") {
  const Checkpoint& ckpt = shared_checkpoint();
  Config cfg = Config::from_json(ckpt.settings.at("config"));
  cfg.set("adapt.steps", 200);
  cfg.set("adapt.learning_rate", 0.02);

  HarmonicsConfig g;
  g.n_tasks = 20;
  g.samples_min = g.samples_max = 64;
  g.seed = 33;
  g.split = Split::test;
  MetaDataset tasks = gen_harmonics(g);

  double mean_sigma_2 = 0.0, mean_sigma_64 = 0.0;
  for (const Task& t : tasks.tasks) {
    AdaptResult a2 = adapt_new_task(ckpt, t, 2, cfg, Rng(100 + static_cast<uint64_t>(t.task_id)));
    AdaptResult a64 =
        adapt_new_task(ckpt, t, 64, cfg, Rng(200 + static_cast<uint64_t>(t.task_id)));
    for (int64_t i = 0; i < a2.posterior.log_sigma.size(); ++i) {
      mean_sigma_2 += std::exp(a2.posterior.log_sigma[i]);
      mean_sigma_64 += std::exp(a64.posterior.log_sigma[i]);
    }
  }
  CHECK(mean_sigma_64 < mean_sigma_2);
}

TEST_CASE("predictive marginal contracts") {
  const Checkpoint& ckpt = shared_checkpoint();
  TaskPosteriorParams prior = TaskPosteriorParams::prior_init(4, 4);
  Tensor xgrid = Tensor::column({-1.0, 0.0, 1.0});

  Predictive one = predict_marginal(ckpt, prior, xgrid, 1, Rng(7));
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(one.mean[i] == one.mu_samples.at(0, i));  // single draw passes through
    CHECK(one.epistemic_std[i] == 0.0);
    CHECK(one.total_std[i] >= 0.001);  // aleatoric noise floor
  }

  Predictive many = predict_marginal(ckpt, prior, xgrid, 32, Rng(7));
  for (int64_t i = 0; i < 3; ++i) CHECK(many.total_std[i] >= many.epistemic_std[i]);
}

TEST_CASE("deterministic baseline has zero epistemic variance") {
  Config cfg = tiny_config();
  cfg.set("trainer.baseline", "no_kl_deterministic");
  cfg.set("trainer.max_steps", 30);
  Trainer tr(cfg, tiny_harmonics(5, 41));
  tr.run();
  Checkpoint ckpt = tr.checkpoint();
  TaskPosteriorParams post = TaskPosteriorParams::prior_init(4, 4);
  post.mu = Tensor::row({0.3, -0.2, 0.1, 0.0});
  Predictive pred = predict_marginal(ckpt, post, Tensor::column({0.0, 2.0}), 16, Rng(3));
  for (int64_t i = 0; i < 2; ++i) CHECK(pred.epistemic_std[i] == 0.0);
}

TEST_CASE("noise floor of the eval tasks bounds the oracle MSE") {
  // a perfect predictor of f(x) scores the irreducible sigma_y^2
  HarmonicsConfig g;
  g.n_tasks = 50;
  g.samples_min = g.samples_max = 4;
  g.eval_rows = 100;
  g.sigma_y = 0.05;
  g.seed = 47;
  g.split = Split::test;
  MetaDataset ds = gen_harmonics(g);
  double mse = 0.0;
  int64_t n = 0;
  for (const Task& t : ds.tasks) {
    auto meta = nlohmann::json::parse(t.meta_json);
    for (int64_t i = t.n() - 100; i < t.n(); ++i) {
      double f = harmonics_f(t.x[i], meta["omega"], meta["a1"], meta["a2"], meta["b1"],
                             meta["b2"]);
      mse += (t.y[i] - f) * (t.y[i] - f);
      ++n;
    }
  }
  mse /= static_cast<double>(n);
  CHECK(mse == doctest::Approx(0.05 * 0.05).epsilon(0.06));
}

TEST_CASE("eval_mse improves with training size on a small desk run") {
  const Checkpoint& ckpt = shared_checkpoint();
  HarmonicsConfig g;
  g.n_tasks = 12;
  g.samples_min = g.samples_max = 64;
  g.eval_rows = 100;
  g.seed = 51;
  g.split = Split::test;
  MetaDataset eval_ds = gen_harmonics(g);

  Config cfg = Config::from_json(ckpt.settings.at("config"));
  cfg.set("eval.train_sizes", "2,64");
  cfg.set("eval.n_tasks", 12);
  cfg.set("eval.n_samples", 32);
  cfg.set("adapt.steps", 300);
  cfg.set("adapt.learning_rate", 0.02);
  auto rows = eval_mse(ckpt, eval_ds, cfg);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].train_size == 2);
  CHECK(rows[1].train_size == 64);
  CHECK(rows[1].mse_mean < rows[0].mse_mean * 1.05);
  for (const auto& r : rows) {
    CHECK(r.n_tasks == 12);
    CHECK(r.mse_stderr >= 0.0);
  }
}

TEST_CASE("metrics csv format") {
  fs::path p = temp_dir() / "metrics.csv";
  {
    MetricsCsv csv(p.string());
    csv.write({100, 1.5, 0.5, 0.25, 12.0});
    csv.write({200, 1.25, 0.375, 0.125, 24.0});
  }
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,loss,nll,kl,wall_ms");
  std::getline(f, line);
  CHECK(line.substr(0, 8) == "100,1.5,");
}

TEST_CASE("bootstrap interval basics") {
  std::vector<double> xs(40, 0.8);
  auto [lo, hi] = bootstrap_ci(xs, 500, Rng(5));
  CHECK(lo == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(hi == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(lo <= hi);
  Rng rng(9);
  std::vector<double> ys;
  for (int i = 0; i < 100; ++i) ys.push_back(rng.uniform(0.0, 1.0));
  auto [l2, h2] = bootstrap_ci(ys, 2000, Rng(5));
  CHECK(l2 < h2);
  double mean = 0.0;
  for (double y : ys) mean += y / 100.0;
  CHECK(l2 < mean);
  CHECK(h2 > mean);
}

TEST_CASE("classification training and episode evaluation run end to end") {
  HeteroConfig g;
  g.n_tasks = 24;
  g.seed = 61;
  MetaDataset ds = gen_hetero_classification(g);
  Config cfg = Config::defaults();
  cfg.set("seed", 1);
  cfg.set("model.embed_hidden", 16);
  cfg.set("model.embed_layers", 2);
  cfg.set("model.d_gamma", 8);
  cfg.set("model.d_z", 4);
  cfg.set("posterior.kind", "gaussian");
  cfg.set("trainer.kl_weight", 0.1);
  cfg.set("trainer.n_mb", 8);
  cfg.set("trainer.learning_rate", 1e-3);
  cfg.set("trainer.max_steps", 40);
  cfg.set("trainer.eval_every", 20);
  Trainer tr(cfg, ds);
  tr.run();
  Checkpoint ckpt = tr.checkpoint();

  HeteroConfig ge = g;
  ge.n_tasks = 10;
  ge.split = Split::test;
  MetaDataset test_ds = gen_hetero_classification(ge);
  Config ecfg = Config::from_json(ckpt.settings.at("config"));
  ecfg.set("eval.n_episodes", 10);
  ecfg.set("eval.n_samples", 4);
  ecfg.set("eval.bootstrap", 500);
  ecfg.set("adapt.steps", 20);
  ecfg.set("adapt.learning_rate", 0.01);
  AccuracyReport rep = eval_accuracy(ckpt, test_ds, ecfg);
  CHECK(rep.n_episodes == 10);
  CHECK(rep.acc_mean >= 0.0);
  CHECK(rep.acc_mean <= 1.0);
  CHECK(rep.ci_low <= rep.acc_mean);
  CHECK(rep.ci_high >= rep.acc_mean);

  // the unconditioned variant trains through the same path
  Config ucfg = cfg;
  ucfg.set("model.conditioned", false);
  ucfg.set("trainer.kl_weight", 0.0);
  Trainer utr(ucfg, ds);
  for (int i = 0; i < 10; ++i) utr.step_once();
  AccuracyReport urep = eval_accuracy(utr.checkpoint(), test_ds, ecfg);
  CHECK(urep.per_episode.size() == 10);
}
