#pragma once
#include <string>

#include "dp/params.hpp"
#include "dp/rng.hpp"

namespace dp {

// Fully connected trunk with residual connections over every pair of hidden
// layers. The input projection sits outside the residual chain so widths
// match; each hidden layer is linear -> layer norm -> affine -> ReLU.
struct MlpConfig {
  int64_t in_dim = 1;
  int64_t hidden = 128;
  int64_t layers = 12;  // residual-chain layers, must be even
  int64_t out_dim = 2;
  bool layer_norm = true;
};

class ResidualMlp {
 public:
  ResidualMlp(std::string prefix, MlpConfig cfg);

  void register_params(ParamStore& store, Rng rng) const;
  // [n, in_dim] -> [n, out_dim]
  Value forward(Tape& tape, const BoundParams& p, Value x) const;

  const MlpConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  std::vector<std::string> param_names() const;

 private:
  Value layer(Tape& tape, const BoundParams& p, Value x, int index) const;
  std::string prefix_;
  MlpConfig cfg_;
};

// Heteroskedastic observation noise from the network's second output unit:
// sigma_y = sigmoid(s) * 0.1 + 0.001, bounded in (0.001, 0.101).
double hetero_noise(double s);
Value hetero_noise(Value s);

// log N(y; mu, sigma^2)
double gaussian_loglik(double y, double mu, double sigma);
// rowwise, all [n,1]
Value gaussian_loglik_rows(Value y, Value mu, Value sigma);

// Convenience single-point regression forward: returns (mu_y, s).
std::pair<double, double> regress_forward(const ResidualMlp& net, const ParamStore& store,
                                          const Tensor& x, const Tensor& z);

}  // namespace dp
