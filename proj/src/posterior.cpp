#include "dp/posterior.hpp"

#include <cmath>

namespace dp {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;

std::vector<int> input_degrees(int64_t d_z, bool reversed) {
  std::vector<int> deg(static_cast<size_t>(d_z));
  for (int64_t j = 0; j < d_z; ++j)
    deg[static_cast<size_t>(j)] = reversed ? static_cast<int>(d_z - j) : static_cast<int>(j + 1);
  return deg;
}
}  // namespace

void validate_autoregressive_masks(const Tensor& m1, const Tensor& m2,
                                   const std::vector<int>& deg_in,
                                   const std::vector<int>& deg_out) {
  int64_t d = m1.rows(), h = m1.cols();
  if (m2.rows() != h || m2.cols() != static_cast<int64_t>(deg_out.size()) ||
      d != static_cast<int64_t>(deg_in.size()))
    throw ConfigError("mask dimensions inconsistent with degrees");
  for (int64_t j = 0; j < d; ++j)
    for (int64_t i = 0; i < m2.cols(); ++i) {
      double reach = 0.0;
      for (int64_t k = 0; k < h; ++k) reach += m1.at(j, k) * m2.at(k, i);
      if (reach > 0.0 && deg_in[static_cast<size_t>(j)] >= deg_out[static_cast<size_t>(i)])
        throw ConfigError("autoregressive mask violation: output " + std::to_string(i) +
                          " reachable from input " + std::to_string(j));
    }
}

IafStack::IafStack(std::string prefix, FlowConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {
  if (cfg_.d_z < 1) throw ConfigError(prefix_ + ": d_z must be >= 1");
  if (cfg_.hidden < 1) throw ConfigError(prefix_ + ": hidden width must be >= 1");
  if (cfg_.layers < 0) throw ConfigError(prefix_ + ": negative layer count");
  if (cfg_.d_c < 0) throw ConfigError(prefix_ + ": negative context dim");
  int max_hidden_degree = std::max<int>(1, static_cast<int>(cfg_.d_z) - 1);
  for (int64_t l = 0; l < cfg_.layers; ++l) {
    bool reversed = cfg_.reverse_alternate && (l % 2 == 1);
    std::vector<int> deg = input_degrees(cfg_.d_z, reversed);
    Tensor m1 = Tensor::zeros({cfg_.d_z, cfg_.hidden});
    Tensor m2 = Tensor::zeros({cfg_.hidden, cfg_.d_z});
    for (int64_t k = 0; k < cfg_.hidden; ++k) {
      int dh = 1 + static_cast<int>(k % max_hidden_degree);
      for (int64_t j = 0; j < cfg_.d_z; ++j)
        if (dh >= deg[static_cast<size_t>(j)]) m1.at(j, k) = 1.0;
      for (int64_t i = 0; i < cfg_.d_z; ++i)
        if (deg[static_cast<size_t>(i)] > dh) m2.at(k, i) = 1.0;
    }
    validate_autoregressive_masks(m1, m2, deg, deg);
    m1_.push_back(std::move(m1));
    m2_.push_back(std::move(m2));
    deg_in_.push_back(std::move(deg));
  }
}

std::vector<std::string> IafStack::param_names() const {
  std::vector<std::string> names;
  for (int64_t l = 0; l < cfg_.layers; ++l) {
    std::string base = prefix_ + "/l" + std::to_string(l) + "_";
    names.push_back(base + "w1");
    if (cfg_.d_c > 0) names.push_back(base + "v1");
    names.push_back(base + "b1");
    names.push_back(base + "wm");
    names.push_back(base + "bm");
    names.push_back(base + "ws");
    names.push_back(base + "bs");
  }
  return names;
}

void IafStack::register_params(ParamStore& store, Rng rng, bool identity_init) const {
  for (int64_t l = 0; l < cfg_.layers; ++l) {
    std::string base = prefix_ + "/l" + std::to_string(l) + "_";
    Rng sub = rng.child(static_cast<uint64_t>(l));
    double lim1 = std::sqrt(3.0 / static_cast<double>(cfg_.d_z));
    double limh = std::sqrt(3.0 / static_cast<double>(cfg_.hidden));
    store.add(base + "w1", sub.uniform_tensor({cfg_.d_z, cfg_.hidden}, -lim1, lim1));
    if (cfg_.d_c > 0) {
      double limc = std::sqrt(3.0 / static_cast<double>(cfg_.d_c));
      store.add(base + "v1", sub.uniform_tensor({cfg_.d_c, cfg_.hidden}, -limc, limc));
    }
    store.add(base + "b1", Tensor::zeros({1, cfg_.hidden}));
    if (identity_init) {
      store.add(base + "wm", Tensor::zeros({cfg_.hidden, cfg_.d_z}));
      store.add(base + "bm", Tensor::zeros({1, cfg_.d_z}));
      store.add(base + "ws", Tensor::zeros({cfg_.hidden, cfg_.d_z}));
      store.add(base + "bs", Tensor::full({1, cfg_.d_z}, scale_raw_identity_bias()));
    } else {
      store.add(base + "wm", sub.uniform_tensor({cfg_.hidden, cfg_.d_z}, -limh, limh));
      store.add(base + "bm", sub.uniform_tensor({1, cfg_.d_z}, -0.1, 0.1));
      store.add(base + "ws", sub.uniform_tensor({cfg_.hidden, cfg_.d_z}, -limh, limh));
      store.add(base + "bs", sub.uniform_tensor({1, cfg_.d_z}, -0.5, 0.5));
    }
  }
}

IafStack::FlowOut IafStack::transform(Tape& tape, const BoundParams& p, Value z0,
                                      std::optional<Value> context) const {
  if (z0.cols() != cfg_.d_z) throw ShapeError(prefix_ + ": z width != d_z");
  if (cfg_.d_c > 0) {
    if (!context.has_value()) throw ContractError(prefix_ + ": flow expects a context input");
    if (context->cols() != cfg_.d_c) throw ShapeError(prefix_ + ": context width != d_c");
  }
  Value z = z0;
  Value log_det = tape.constant(Tensor::zeros({z0.rows(), 1}));
  for (int64_t l = 0; l < cfg_.layers; ++l) {
    std::string base = prefix_ + "/l" + std::to_string(l) + "_";
    Value pre = masked_matmul(z, p[base + "w1"], m1_[static_cast<size_t>(l)]);
    if (cfg_.d_c > 0) pre = pre + matmul(*context, p[base + "v1"]);
    Value h = relu(pre + p[base + "b1"]);
    Value m = masked_matmul(h, p[base + "wm"], m2_[static_cast<size_t>(l)]) + p[base + "bm"];
    Value raw = masked_matmul(h, p[base + "ws"], m2_[static_cast<size_t>(l)]) + p[base + "bs"];
    Value s = sigmoid(raw + 1.5) + 0.1;
    z = m + mul(s, z);
    log_det = log_det + sum_axis(dp::log(s), 1);
  }
  return {z, log_det};
}

std::pair<Tensor, Tensor> IafStack::layer_m_s(const ParamStore& store, int layer, const Tensor& z,
                                              const Tensor& context) const {
  Tape tape;
  BoundParams p = bind_params(tape, store);
  std::string base = prefix_ + "/l" + std::to_string(layer) + "_";
  Value zv = tape.constant(z);
  Value pre = masked_matmul(zv, p[base + "w1"], m1_[static_cast<size_t>(layer)]);
  if (cfg_.d_c > 0) pre = pre + matmul(tape.constant(context), p[base + "v1"]);
  Value h = relu(pre + p[base + "b1"]);
  Value m = masked_matmul(h, p[base + "wm"], m2_[static_cast<size_t>(layer)]) + p[base + "bm"];
  Value raw = masked_matmul(h, p[base + "ws"], m2_[static_cast<size_t>(layer)]) + p[base + "bs"];
  Value s = sigmoid(raw + 1.5) + 0.1;
  return {m.val(), s.val()};
}

Tensor IafStack::inverse(const ParamStore& store, const Tensor& z, const Tensor& context) const {
  Tensor cur = z;
  for (int64_t l = cfg_.layers - 1; l >= 0; --l) {
    const std::vector<int>& deg = deg_in_[static_cast<size_t>(l)];
    Tensor zin = Tensor::zeros({1, cfg_.d_z});
    // coordinates resolve in degree order; outputs of degree d depend only on
    // inputs with degree < d, which are already final
    for (int pass = 1; pass <= static_cast<int>(cfg_.d_z); ++pass) {
      auto [m, s] = layer_m_s(store, static_cast<int>(l), zin, context);
      for (int64_t i = 0; i < cfg_.d_z; ++i)
        if (deg[static_cast<size_t>(i)] == pass) zin[i] = (cur[i] - m[i]) / s[i];
    }
    cur = zin;
  }
  return cur;
}

PosteriorRows gaussian_sample_rows(Tape& tape, Value mu, Value log_sigma, Value eps) {
  Value sigma = dp::exp(log_sigma);
  Value z = mu + mul(sigma, eps);
  Value log_q = sum_axis((0.0 - kHalfLog2Pi) - log_sigma - square(eps) / 2.0, 1);
  (void)tape;
  return {z, log_q};
}

PosteriorSample gaussian_sample(const TaskPosteriorParams& params, const Tensor& eps) {
  Tape tape;
  PosteriorRows rows = gaussian_sample_rows(tape, tape.constant(params.mu),
                                            tape.constant(params.log_sigma), tape.constant(eps));
  return {rows.z.val(), rows.log_q.val().item()};
}

PosteriorRows iaf_sample_rows(Tape& tape, const IafStack& flow, const BoundParams& p, Value mu,
                              Value log_sigma, std::optional<Value> context, Value eps) {
  PosteriorRows base = gaussian_sample_rows(tape, mu, log_sigma, eps);
  IafStack::FlowOut out = flow.transform(tape, p, base.z, context);
  return {out.z, base.log_q - out.log_det};
}

PosteriorSample iaf_sample(const TaskPosteriorParams& params, const IafStack& flow,
                           const ParamStore& store, const Tensor& eps) {
  Tape tape;
  BoundParams p = bind_params(tape, store);
  std::optional<Value> ctx;
  if (flow.config().d_c > 0) ctx = tape.constant(params.context);
  PosteriorRows rows = iaf_sample_rows(tape, flow, p, tape.constant(params.mu),
                                       tape.constant(params.log_sigma), ctx, tape.constant(eps));
  return {rows.z.val(), rows.log_q.val().item()};
}

Value std_normal_logpdf_rows(Value z) {
  return sum_axis((0.0 - kHalfLog2Pi) - square(z) / 2.0, 1);
}

double std_normal_logpdf(const Tensor& z) {
  double lp = 0.0;
  for (int64_t i = 0; i < z.size(); ++i) lp += -kHalfLog2Pi - 0.5 * z[i] * z[i];
  return lp;
}

Value kl_rows(Value log_q, Value z) { return log_q - std_normal_logpdf_rows(z); }

double kl_monte_carlo(const std::vector<PosteriorSample>& samples) {
  if (samples.empty()) throw ContractError("kl_monte_carlo: empty sample list");
  double acc = 0.0;
  for (const PosteriorSample& s : samples) acc += s.log_q - std_normal_logpdf(s.z);
  return acc / static_cast<double>(samples.size());
}

double kl_closed_form_gaussian(const Tensor& mu, const Tensor& log_sigma) {
  if (!mu.same_shape(log_sigma)) throw ShapeError("kl_closed_form_gaussian shape mismatch");
  double kl = 0.0;
  for (int64_t i = 0; i < mu.size(); ++i) {
    double s2 = std::exp(2.0 * log_sigma[i]);
    kl += 0.5 * (s2 + mu[i] * mu[i] - 1.0 - 2.0 * log_sigma[i]);
  }
  return kl;
}

double kl_closed_form_gaussian(const TaskPosteriorParams& params) {
  return kl_closed_form_gaussian(params.mu, params.log_sigma);
}

}  // namespace dp
