#include "dp/nets.hpp"

#include <cmath>

namespace dp {

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)

Tensor he_uniform(Rng& rng, int64_t fan_in, int64_t fan_out, double gain) {
  double limit = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  return rng.uniform_tensor({fan_in, fan_out}, -limit, limit);
}

}  // namespace

ResidualMlp::ResidualMlp(std::string prefix, MlpConfig cfg)
    : prefix_(std::move(prefix)), cfg_(cfg) {
  if (cfg_.layers % 2 != 0) throw ConfigError(prefix_ + ": residual layer count must be even");
  if (cfg_.in_dim < 1 || cfg_.hidden < 1 || cfg_.out_dim < 1)
    throw ConfigError(prefix_ + ": dimensions must be positive");
}

std::vector<std::string> ResidualMlp::param_names() const {
  std::vector<std::string> names;
  auto layer_names = [&](const std::string& tag) {
    names.push_back(prefix_ + "/" + tag + "_w");
    names.push_back(prefix_ + "/" + tag + "_b");
    if (cfg_.layer_norm) {
      names.push_back(prefix_ + "/" + tag + "_lng");
      names.push_back(prefix_ + "/" + tag + "_lnb");
    }
  };
  layer_names("proj");
  for (int64_t l = 0; l < cfg_.layers; ++l) layer_names("h" + std::to_string(l));
  names.push_back(prefix_ + "/out_w");
  names.push_back(prefix_ + "/out_b");
  return names;
}

void ResidualMlp::register_params(ParamStore& store, Rng rng) const {
  const double relu_gain = std::sqrt(2.0);
  auto add_layer = [&](const std::string& tag, int64_t in, int64_t out, double gain) {
    Rng sub = rng.child(tag);
    store.add(prefix_ + "/" + tag + "_w", he_uniform(sub, in, out, gain));
    store.add(prefix_ + "/" + tag + "_b", Tensor::zeros({1, out}));
    if (cfg_.layer_norm && tag != "out") {
      store.add(prefix_ + "/" + tag + "_lng", Tensor::full({1, out}, 1.0));
      store.add(prefix_ + "/" + tag + "_lnb", Tensor::zeros({1, out}));
    }
  };
  add_layer("proj", cfg_.in_dim, cfg_.hidden, relu_gain);
  for (int64_t l = 0; l < cfg_.layers; ++l)
    add_layer("h" + std::to_string(l), cfg_.hidden, cfg_.hidden, relu_gain);
  Rng sub = rng.child("out");
  store.add(prefix_ + "/out_w", he_uniform(sub, cfg_.hidden, cfg_.out_dim, 1.0));
  store.add(prefix_ + "/out_b", Tensor::zeros({1, cfg_.out_dim}));
}

Value ResidualMlp::layer(Tape& tape, const BoundParams& p, Value x, int index) const {
  std::string tag = index < 0 ? "proj" : "h" + std::to_string(index);
  try {
    Value pre = matmul(x, p[prefix_ + "/" + tag + "_w"]) + p[prefix_ + "/" + tag + "_b"];
    if (cfg_.layer_norm) {
      pre = layer_norm_rows(pre, 1e-5);
      pre = mul(pre, p[prefix_ + "/" + tag + "_lng"]) + p[prefix_ + "/" + tag + "_lnb"];
    }
    return relu(pre);
  } catch (const NumericError& e) {
    throw NumericError(prefix_ + " layer " + tag + ": " + e.what());
  }
  (void)tape;
}

Value ResidualMlp::forward(Tape& tape, const BoundParams& p, Value x) const {
  if (x.cols() != cfg_.in_dim)
    throw ShapeError(prefix_ + ": input width " + std::to_string(x.cols()) + " != " +
                     std::to_string(cfg_.in_dim));
  Value h = layer(tape, p, x, -1);
  for (int64_t block = 0; block < cfg_.layers / 2; ++block) {
    Value u = layer(tape, p, h, static_cast<int>(2 * block));
    Value u2 = layer(tape, p, u, static_cast<int>(2 * block + 1));
    h = h + u2;  // identity skip over the pair
  }
  try {
    return matmul(h, p[prefix_ + "/out_w"]) + p[prefix_ + "/out_b"];
  } catch (const NumericError& e) {
    throw NumericError(prefix_ + " layer out: " + e.what());
  }
}

double hetero_noise(double s) {
  if (!std::isfinite(s)) throw DomainError("hetero_noise: non-finite input");
  double sig = s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
  return sig * 0.1 + 0.001;
}

Value hetero_noise(Value s) { return sigmoid(s) * 0.1 + 0.001; }

double gaussian_loglik(double y, double mu, double sigma) {
  if (sigma <= 0.0) throw DomainError("gaussian_loglik: sigma must be positive");
  double d = (y - mu) / sigma;
  return -kHalfLog2Pi - std::log(sigma) - 0.5 * d * d;
}

Value gaussian_loglik_rows(Value y, Value mu, Value sigma) {
  Value d = y - mu;
  return (0.0 - kHalfLog2Pi) - dp::log(sigma) - square(d) / (2.0 * square(sigma));
}

std::pair<double, double> regress_forward(const ResidualMlp& net, const ParamStore& store,
                                          const Tensor& x, const Tensor& z) {
  Tape tape;
  BoundParams p = bind_params(tape, store);
  Tensor in = Tensor::zeros({1, x.size() + z.size()});
  for (int64_t i = 0; i < x.size(); ++i) in[i] = x[i];
  for (int64_t i = 0; i < z.size(); ++i) in[x.size() + i] = z[i];
  Value out = net.forward(tape, p, tape.constant(in));
  if (out.val().cols() != 2) throw ContractError("regress_forward: head must have 2 outputs");
  return {out.val().at(0, 0), out.val().at(0, 1)};
}

}  // namespace dp
