#include "dp/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "dp/params.hpp"

namespace dp {

using nlohmann::json;

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;
}

double sine_loglik(const Task& task, double omega, double b, double sigma_y) {
  double ll = 0.0;
  for (int64_t i = 0; i < task.n(); ++i) {
    double f = std::sin(5.0 * (omega * task.x[i] + b));
    double d = (task.y[i] - f) / sigma_y;
    ll += -kHalfLog2Pi - std::log(sigma_y) - 0.5 * d * d;
  }
  return ll;
}

double sine_log_unnorm_posterior(const Task& task, double omega, double b, double sigma_y) {
  double lp = -kHalfLog2Pi - 0.5 * omega * omega;
  lp += -kHalfLog2Pi - 0.5 * b * b;
  return lp + sine_loglik(task, omega, b, sigma_y);
}

PosteriorGrid grid_posterior(const Task& task, const GridSpec& spec, double sigma_y) {
  if (spec.res < 2) throw ConfigError("grid_posterior: resolution must be >= 2");
  if (spec.hi <= spec.lo) throw ConfigError("grid_posterior: empty range");
  if (sigma_y <= 0.0) throw DomainError("grid_posterior: sigma_y must be positive");
  PosteriorGrid g;
  g.spec = spec;
  g.cell = (spec.hi - spec.lo) / static_cast<double>(spec.res);
  g.density = Tensor::zeros({spec.res, spec.res});

  double max_lp = -std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < spec.res; ++i)
    for (int64_t j = 0; j < spec.res; ++j) {
      double lp = sine_log_unnorm_posterior(task, g.omega_at(i), g.b_at(j), sigma_y);
      g.density.at(i, j) = lp;
      max_lp = std::max(max_lp, lp);
    }
  if (!std::isfinite(max_lp)) throw NumericError("grid_posterior: log-posterior all -inf");

  double area = g.cell * g.cell;
  double total = 0.0;
  for (int64_t k = 0; k < g.density.size(); ++k) {
    g.density[k] = std::exp(g.density[k] - max_lp);
    total += g.density[k] * area;
  }
  if (total <= 0.0) throw NumericError("grid_posterior: zero total mass");
  for (int64_t k = 0; k < g.density.size(); ++k) g.density[k] /= total;
  g.log_norm = max_lp + std::log(total);
  return g;
}

std::vector<Mode> detect_modes(const PosteriorGrid& grid, double min_rel_height) {
  const Tensor& d = grid.density;
  int64_t res = grid.spec.res;
  double global_max = 0.0;
  for (int64_t k = 0; k < d.size(); ++k) global_max = std::max(global_max, d[k]);
  std::vector<Mode> modes;
  for (int64_t i = 0; i < res; ++i)
    for (int64_t j = 0; j < res; ++j) {
      double v = d.at(i, j);
      if (v < min_rel_height * global_max) continue;
      bool strict_max = true;
      for (int64_t di = -1; di <= 1 && strict_max; ++di)
        for (int64_t dj = -1; dj <= 1 && strict_max; ++dj) {
          if (di == 0 && dj == 0) continue;
          int64_t ni = i + di, nj = j + dj;
          if (ni < 0 || ni >= res || nj < 0 || nj >= res) continue;
          if (d.at(ni, nj) >= v) strict_max = false;
        }
      if (strict_max)
        modes.push_back({i, j, grid.omega_at(i), grid.b_at(j), v});
    }
  return modes;
}

FitDiagnostics fit_iaf_to_likelihood(const Task& task, const Config& cfg, uint64_t seed,
                                     const PosteriorGrid& grid) {
  const int64_t d_z = 2;
  double sigma_y = cfg.get_f64("analysis.sine_sigma_y");
  FlowConfig fc;
  fc.d_z = d_z;
  fc.d_c = 0;  // single task, no context conditioning
  fc.hidden = cfg.get_i64("analysis.flow_hidden");
  fc.layers = cfg.get_i64("analysis.flow_layers");
  IafStack flow("flow", fc);

  ParamStore store;
  store.add("post/mu", Tensor::zeros({1, d_z}));
  store.add("post/log_sigma", Tensor::zeros({1, d_z}));
  flow.register_params(store, Rng(seed).child("flow_init"), /*identity_init=*/true);

  int64_t steps = cfg.get_i64("analysis.fit_steps");
  int64_t batch = cfg.get_i64("analysis.fit_batch");
  AdamConfig acfg{cfg.get_f64("trainer.learning_rate"), 0.9, 0.999, 1e-8};
  Rng rng = Rng(seed).child("fit");
  AdamState adam;
  FitDiagnostics out;

  auto log_unnorm_rows = [&](Tape& tape, Value z) {
    Value om = slice(z, 0, z.rows(), 0, 1);
    Value bb = slice(z, 0, z.rows(), 1, 2);
    Value lp = std_normal_logpdf_rows(z);  // the N(0,1) priors on omega and b
    for (int64_t i = 0; i < task.n(); ++i) {
      Value pred = dp::sin(5.0 * (om * task.x[i] + bb));
      Value d = (tape.constant(Tensor::scalar(task.y[i])) - pred) / sigma_y;
      lp = lp + ((0.0 - kHalfLog2Pi) - std::log(sigma_y) - 0.5 * square(d));
    }
    return lp;
  };

  for (int64_t s = 0; s < steps; ++s) {
    Tape tape;
    BoundParams p = bind_params(tape, store);
    Tensor eps = rng.normal_tensor({batch, d_z});
    Value mu = broadcast_to(p["post/mu"], {batch, d_z});
    Value ls = broadcast_to(p["post/log_sigma"], {batch, d_z});
    PosteriorRows rows;
    try {
      rows = iaf_sample_rows(tape, flow, p, mu, ls, std::nullopt, tape.constant(eps));
      Value loss = mean(rows.log_q - log_unnorm_rows(tape, rows.z));
      tape.backward(loss);
      if (s % 50 == 0 || s == steps - 1) out.loss_curve.push_back(loss.val().item());
    } catch (const NumericError& e) {
      throw TrainingDiverged("posterior fit diverged at step " + std::to_string(s) + ": " +
                                 e.what(),
                             "");
    }
    adam.step(store, collect_grads(p), acfg);
  }

  out.posterior.mu = store.get("post/mu");
  out.posterior.log_sigma = store.get("post/log_sigma");
  out.posterior.context = Tensor::zeros({1, 0});

  // sample the fitted posterior and score against the normalized grid density
  int64_t n_samples = cfg.get_i64("analysis.n_samples");
  out.samples = Tensor::zeros({n_samples, d_z});
  out.log_q = Tensor::zeros({n_samples, 1});
  {
    Tape tape;
    BoundParams p = bind_params(tape, store);
    Tensor eps = Rng(seed).child("sample").normal_tensor({n_samples, d_z});
    Value mu = broadcast_to(p["post/mu"], {n_samples, d_z});
    Value ls = broadcast_to(p["post/log_sigma"], {n_samples, d_z});
    PosteriorRows rows = iaf_sample_rows(tape, flow, p, mu, ls, std::nullopt,
                                         tape.constant(eps));
    out.samples = rows.z.val();
    out.log_q = rows.log_q.val();
  }
  double acc = 0.0;
  for (int64_t i = 0; i < n_samples; ++i)
    acc += sine_log_unnorm_posterior(task, out.samples.at(i, 0), out.samples.at(i, 1), sigma_y) -
           grid.log_norm;
  out.mean_true_logdensity = acc / static_cast<double>(n_samples);

  Rng prior_rng = Rng(seed).child("prior_baseline");
  double prior_acc = 0.0;
  for (int64_t i = 0; i < n_samples; ++i) {
    double om = prior_rng.normal(), bb = prior_rng.normal();
    prior_acc += sine_log_unnorm_posterior(task, om, bb, sigma_y) - grid.log_norm;
  }
  out.prior_mean_true_logdensity = prior_acc / static_cast<double>(n_samples);
  return out;
}

CoverageReport mode_coverage(const Tensor& samples, const PosteriorGrid& grid,
                             double basin_radius_cells, double min_frac) {
  CoverageReport rep;
  rep.n_modes = static_cast<int64_t>(grid.modes.size());
  if (rep.n_modes == 0) throw ContractError("mode_coverage: no detected modes on the grid");
  rep.mode_sample_frac.assign(grid.modes.size(), 0.0);
  rep.mode_grid_mass.assign(grid.modes.size(), 0.0);

  auto nearest_mode = [&](double ci, double cj) -> int64_t {
    int64_t best = -1;
    double best_d = basin_radius_cells;
    for (size_t k = 0; k < grid.modes.size(); ++k) {
      double di = ci - static_cast<double>(grid.modes[k].i);
      double dj = cj - static_cast<double>(grid.modes[k].j);
      double dist = std::sqrt(di * di + dj * dj);
      if (dist <= best_d) {
        best_d = dist;
        best = static_cast<int64_t>(k);
      }
    }
    return best;
  };

  // reference basin masses of the grid density under the same rule
  double area = grid.cell * grid.cell;
  double bridge = 0.0;
  for (int64_t i = 0; i < grid.spec.res; ++i)
    for (int64_t j = 0; j < grid.spec.res; ++j) {
      int64_t k = nearest_mode(static_cast<double>(i), static_cast<double>(j));
      double mass = grid.density.at(i, j) * area;
      if (k < 0)
        bridge += mass;
      else
        rep.mode_grid_mass[static_cast<size_t>(k)] += mass;
    }
  rep.grid_bridge_mass = bridge;

  if (samples.size() == 0) {
    rep.empty_samples = true;
    rep.coverage = 0.0;
    rep.bridge_mass = 0.0;
    return rep;
  }
  int64_t n = samples.rows();
  int64_t unassigned = 0;
  for (int64_t s = 0; s < n; ++s) {
    double ci = (samples.at(s, 0) - grid.spec.lo) / grid.cell - 0.5;
    double cj = (samples.at(s, 1) - grid.spec.lo) / grid.cell - 0.5;
    int64_t k = nearest_mode(ci, cj);
    if (k < 0)
      ++unassigned;
    else
      rep.mode_sample_frac[static_cast<size_t>(k)] += 1.0 / static_cast<double>(n);
  }
  rep.bridge_mass = static_cast<double>(unassigned) / static_cast<double>(n);
  for (double f : rep.mode_sample_frac)
    if (f >= min_frac) ++rep.covered;
  rep.coverage = static_cast<double>(rep.covered) / static_cast<double>(rep.n_modes);
  return rep;
}

void export_grid_csv(const PosteriorGrid& grid, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "omega,b,density\n";
  char buf[128];
  for (int64_t i = 0; i < grid.spec.res; ++i)
    for (int64_t j = 0; j < grid.spec.res; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", grid.omega_at(i), grid.b_at(j),
                    grid.density.at(i, j));
      f << buf;
    }
}

json modes_to_json(const PosteriorGrid& grid) {
  json out = json::array();
  for (const Mode& m : grid.modes)
    out.push_back({{"i", m.i}, {"j", m.j}, {"omega", m.omega}, {"b", m.b},
                   {"density", m.density}});
  return out;
}

json coverage_to_json(const CoverageReport& rep) {
  return json{{"n_modes", rep.n_modes},
              {"covered", rep.covered},
              {"coverage", rep.coverage},
              {"bridge_mass", rep.bridge_mass},
              {"empty_samples", rep.empty_samples},
              {"mode_sample_frac", rep.mode_sample_frac},
              {"mode_grid_mass", rep.mode_grid_mass},
              {"grid_bridge_mass", rep.grid_bridge_mass}};
}

}  // namespace dp
