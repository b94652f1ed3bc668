#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dp/posterior.hpp"

using namespace dp;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// log |det J| by LU with partial pivoting; J must be square and invertible
double log_abs_det(Tensor j) {
  int64_t n = j.rows();
  double acc = 0.0;
  for (int64_t col = 0; col < n; ++col) {
    int64_t piv = col;
    for (int64_t r = col + 1; r < n; ++r)
      if (std::abs(j.at(r, col)) > std::abs(j.at(piv, col))) piv = r;
    if (piv != col)
      for (int64_t c = 0; c < n; ++c) std::swap(j.at(piv, c), j.at(col, c));
    acc += std::log(std::abs(j.at(col, col)));
    for (int64_t r = col + 1; r < n; ++r) {
      double f = j.at(r, col) / j.at(col, col);
      for (int64_t c = col; c < n; ++c) j.at(r, c) -= f * j.at(col, c);
    }
  }
  return acc;
}

struct McStats {
  double mean;
  double se;
};

// Monte-Carlo KL estimate with standard error, batched through the tape path.
McStats mc_kl(const TaskPosteriorParams& params, int64_t n, Rng& rng) {
  Tape tape;
  Tensor eps = rng.normal_tensor({n, params.mu.cols()});
  Value mu = broadcast_to(tape.constant(params.mu), {n, params.mu.cols()});
  Value ls = broadcast_to(tape.constant(params.log_sigma), {n, params.mu.cols()});
  PosteriorRows rows = gaussian_sample_rows(tape, mu, ls, tape.constant(eps));
  Value kl = kl_rows(rows.log_q, rows.z);
  double s = 0.0, s2 = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    s += kl.val()[i];
    s2 += kl.val()[i] * kl.val()[i];
  }
  double mean = s / static_cast<double>(n);
  double var = s2 / static_cast<double>(n) - mean * mean;
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace

TEST_CASE("gaussian posterior at the mode") {
  TaskPosteriorParams p = TaskPosteriorParams::prior_init(4, 4);
  PosteriorSample s = gaussian_sample(p, Tensor::zeros({1, 4}));
  for (int64_t i = 0; i < 4; ++i) CHECK(s.z[i] == 0.0);
  CHECK(s.log_q == doctest::Approx(-2.0 * kLog2Pi).epsilon(1e-14));

  // translated mode has the same density value
  TaskPosteriorParams p2 = TaskPosteriorParams::prior_init(2, 2);
  p2.mu = Tensor::row({1.0, 1.0});
  PosteriorSample s2 = gaussian_sample(p2, Tensor::zeros({1, 2}));
  CHECK(s2.z[0] == 1.0);
  CHECK(s2.z[1] == 1.0);
  CHECK(s2.log_q == doctest::Approx(-kLog2Pi).epsilon(1e-14));
}

TEST_CASE("gaussian sample empirical mean approaches mu") {
  const int64_t n = 100000;
  TaskPosteriorParams p = TaskPosteriorParams::prior_init(2, 2);
  p.mu = Tensor::row({0.7, -1.2});
  p.log_sigma = Tensor::row({std::log(0.5), std::log(2.0)});
  Rng rng(31);
  Tape tape;
  Tensor eps = rng.normal_tensor({n, 2});
  PosteriorRows rows = gaussian_sample_rows(tape, broadcast_to(tape.constant(p.mu), {n, 2}),
                                            broadcast_to(tape.constant(p.log_sigma), {n, 2}),
                                            tape.constant(eps));
  for (int64_t j = 0; j < 2; ++j) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += rows.z.val().at(i, j);
    double mean = s / n;
    double sigma = std::exp(p.log_sigma[j]);
    CHECK(std::abs(mean - p.mu[j]) < 3.0 * sigma / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("identity-initialized flow equals the gaussian posterior") {
  FlowConfig fc{.d_z = 5, .d_c = 3, .hidden = 16, .layers = 4};
  IafStack flow("flow", fc);
  ParamStore store;
  flow.register_params(store, Rng(8), /*identity_init=*/true);
  Rng rng(21);
  TaskPosteriorParams p = TaskPosteriorParams::prior_init(5, 3);
  p.mu = rng.normal_tensor({1, 5});
  p.log_sigma = rng.uniform_tensor({1, 5}, -0.5, 0.5);
  p.context = rng.normal_tensor({1, 3});
  for (int rep = 0; rep < 5; ++rep) {
    Tensor eps = rng.normal_tensor({1, 5});
    PosteriorSample a = gaussian_sample(p, eps);
    PosteriorSample b = iaf_sample(p, flow, store, eps);
    CHECK(max_abs_diff(a.z, b.z) < 1e-12);
    CHECK(std::abs(a.log_q - b.log_q) < 1e-12);
  }
}

TEST_CASE("iaf log_q matches base density minus autodiff log|det J|") {
  const int64_t d = 4;
  Rng rng(99);
  for (int rep = 0; rep < 10; ++rep) {
    FlowConfig fc{.d_z = d, .d_c = 2, .hidden = 12, .layers = 3,
                  .reverse_alternate = rep % 2 == 1};
    IafStack flow("flow", fc);
    ParamStore store;
    flow.register_params(store, rng.child(static_cast<uint64_t>(rep)), /*identity_init=*/false);
    TaskPosteriorParams p = TaskPosteriorParams::prior_init(d, 2);
    p.mu = rng.normal_tensor({1, d});
    p.log_sigma = rng.uniform_tensor({1, d}, -0.7, 0.4);
    p.context = rng.normal_tensor({1, 2});
    Tensor eps = rng.normal_tensor({1, d});

    PosteriorSample s = iaf_sample(p, flow, store, eps);

    // Jacobian of z w.r.t. eps, one backward pass per output coordinate
    Tensor jac = Tensor::zeros({d, d});
    for (int64_t i = 0; i < d; ++i) {
      Tape tape;
      BoundParams bp = bind_params(tape, store);
      Value eps_leaf = tape.input(eps);
      PosteriorRows rows =
          iaf_sample_rows(tape, flow, bp, tape.constant(p.mu), tape.constant(p.log_sigma),
                          tape.constant(p.context), eps_leaf);
      tape.backward(slice(rows.z, 0, 1, i, i + 1));
      for (int64_t k = 0; k < d; ++k) jac.at(i, k) = eps_leaf.grad()[k];
    }
    double expected_log_q = std_normal_logpdf(eps) - log_abs_det(jac);
    CHECK(std::abs(s.log_q - expected_log_q) < 1e-6);
  }
}

TEST_CASE("iaf inversion round-trip") {
  Rng rng(123);
  for (int rep = 0; rep < 8; ++rep) {
    FlowConfig fc{.d_z = 6, .d_c = 2, .hidden = 24, .layers = 4,
                  .reverse_alternate = rep % 2 == 0};
    IafStack flow("flow", fc);
    ParamStore store;
    flow.register_params(store, rng.child(static_cast<uint64_t>(rep)), /*identity_init=*/false);
    Tensor context = rng.normal_tensor({1, 2});
    Tensor z0 = rng.normal_tensor({1, 6});

    Tape tape;
    BoundParams p = bind_params(tape, store);
    IafStack::FlowOut out =
        flow.transform(tape, p, tape.constant(z0), tape.constant(context));
    Tensor back = flow.inverse(store, out.z.val(), context);
    CHECK(max_abs_diff(back, z0) < 1e-9);
  }
}

TEST_CASE("mask violation raises configuration error") {
  FlowConfig fc{.d_z = 4, .d_c = 0, .hidden = 8, .layers = 1};
  IafStack flow("flow", fc);
  Tensor m1 = flow.input_mask(0);
  Tensor m2 = flow.output_mask(0);
  std::vector<int> deg = {1, 2, 3, 4};
  validate_autoregressive_masks(m1, m2, deg, deg);  // intact masks pass

  Tensor bad = m1;
  bad.at(3, 0) = 1.0;  // highest-degree input reaches every hidden unit
  CHECK_THROWS_AS(validate_autoregressive_masks(bad, m2, deg, deg), ConfigError);
}

TEST_CASE("kl monte carlo examples") {
  Rng rng(77);
  // posterior == prior: expectation 0
  {
    TaskPosteriorParams p = TaskPosteriorParams::prior_init(3, 0);
    McStats st = mc_kl(p, 100000, rng);
    CHECK(std::abs(st.mean) < 0.01);
  }
  // mu=1, sigma=1, d=1: analytic KL = 0.5
  {
    TaskPosteriorParams p = TaskPosteriorParams::prior_init(1, 0);
    p.mu = Tensor::row({1.0});
    McStats st = mc_kl(p, 100000, rng);
    CHECK(std::abs(st.mean - 0.5) < 3.0 * st.se);
  }
  // mu=0, sigma=2, d=1: analytic 0.5*(4 - 1 - log 4)
  {
    TaskPosteriorParams p = TaskPosteriorParams::prior_init(1, 0);
    p.log_sigma = Tensor::row({std::log(2.0)});
    McStats st = mc_kl(p, 100000, rng);
    CHECK(std::abs(st.mean - 0.8068528194400547) < 3.0 * st.se);
    CHECK(kl_closed_form_gaussian(p) == doctest::Approx(0.8068528194400547).epsilon(1e-14));
  }
  CHECK_THROWS_AS(kl_monte_carlo({}), ContractError);
}

TEST_CASE("kl closed form analytic cases") {
  TaskPosteriorParams p = TaskPosteriorParams::prior_init(4, 0);
  CHECK(kl_closed_form_gaussian(p) == 0.0);
  TaskPosteriorParams p1 = TaskPosteriorParams::prior_init(1, 0);
  p1.mu = Tensor::row({1.0});
  CHECK(kl_closed_form_gaussian(p1) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("kl estimator is unbiased across random gaussians") {
  Rng rng(2025);
  for (int rep = 0; rep < 20; ++rep) {
    TaskPosteriorParams p = TaskPosteriorParams::prior_init(3, 0);
    p.mu = rng.normal_tensor({1, 3});
    p.log_sigma = rng.uniform_tensor({1, 3}, -0.8, 0.8);
    McStats st = mc_kl(p, 100000, rng);
    double analytic = kl_closed_form_gaussian(p);
    CHECK(std::abs(st.mean - analytic) < 3.0 * st.se);
    // statistical nonnegativity of the KL estimate
    CHECK(st.mean > -3.0 * st.se);
  }
}

TEST_CASE("kl_monte_carlo agrees with per-sample construction") {
  Rng rng(55);
  TaskPosteriorParams p = TaskPosteriorParams::prior_init(2, 0);
  p.mu = Tensor::row({0.4, -0.3});
  p.log_sigma = Tensor::row({0.2, -0.1});
  std::vector<PosteriorSample> samples;
  double oracle = 0.0;
  for (int i = 0; i < 500; ++i) {
    Tensor eps = rng.normal_tensor({1, 2});
    PosteriorSample s = gaussian_sample(p, eps);
    // independent recomputation of the summand
    double log_q = 0.0, log_prior = 0.0;
    for (int64_t j = 0; j < 2; ++j) {
      log_q += -0.5 * kLog2Pi - p.log_sigma[j] - 0.5 * eps[j] * eps[j];
      log_prior += -0.5 * kLog2Pi - 0.5 * s.z[j] * s.z[j];
    }
    oracle += log_q - log_prior;
    samples.push_back(std::move(s));
  }
  CHECK(kl_monte_carlo(samples) == doctest::Approx(oracle / 500.0).epsilon(1e-12));
}

TEST_CASE("context changes the flow output after a few training steps") {
  // two tasks with different contexts; train the flow so samples of task 0
  // shift up and task 1 shift down, then check the contexts steer z
  FlowConfig fc{.d_z = 2, .d_c = 2, .hidden = 8, .layers = 2};
  IafStack flow("flow", fc);
  ParamStore store;
  flow.register_params(store, Rng(3), /*identity_init=*/true);
  store.add("ctx", Tensor::from({2, 2}, {0.5, -0.5, -0.5, 0.5}));
  AdamState adam;
  Rng rng(9);
  for (int step = 0; step < 100; ++step) {
    Tape tape;
    BoundParams p = bind_params(tape, store);
    Tensor eps = rng.normal_tensor({2, 2});
    Value z0 = tape.constant(eps);
    IafStack::FlowOut out = flow.transform(tape, p, z0, p["ctx"]);
    Tensor target = Tensor::from({2, 2}, {2.0, 2.0, -2.0, -2.0});
    Value loss = mean(square(out.z - tape.constant(target)));
    tape.backward(loss);
    adam.step(store, collect_grads(p), {.lr = 0.05});
  }
  Tape tape;
  BoundParams p = bind_params(tape, store);
  Tensor eps = Tensor::from({2, 2}, {0.3, -0.4, 0.3, -0.4});  // identical base noise
  IafStack::FlowOut out = flow.transform(tape, p, tape.constant(eps), p["ctx"]);
  double dz = max_abs_diff(
      Tensor::row({out.z.val().at(0, 0), out.z.val().at(0, 1)}),
      Tensor::row({out.z.val().at(1, 0), out.z.val().at(1, 1)}));
  CHECK(dz > 0.5);  // contexts produce clearly different outputs
}
