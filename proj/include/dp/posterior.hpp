#pragma once
#include <cmath>
#include <optional>
#include <string>

#include "dp/params.hpp"
#include "dp/rng.hpp"

namespace dp {

// Per-task variational parameters. All row vectors: mu and log_sigma are
// [1, d_z], context is [1, d_c].
struct TaskPosteriorParams {
  Tensor mu;
  Tensor log_sigma;
  Tensor context;

  static TaskPosteriorParams prior_init(int64_t d_z, int64_t d_c) {
    return {Tensor::zeros({1, d_z}), Tensor::zeros({1, d_z}), Tensor::zeros({1, d_c})};
  }
};

struct PosteriorSample {
  Tensor z;      // [1, d_z]
  double log_q;  // log-density of z under the sampling posterior
};

// Batched sample handles on a tape; log_q is a [n,1] column.
struct PosteriorRows {
  Value z;
  Value log_q;
};

struct FlowConfig {
  int64_t d_z = 16;
  int64_t d_c = 16;   // 0 disables context conditioning
  int64_t hidden = 64;
  int64_t layers = 4;
  bool reverse_alternate = false;  // odd layers use reversed coordinate order
};

// Throws ConfigError if the pair of masks admits a dependency of an output
// coordinate on an input coordinate of equal or higher degree.
void validate_autoregressive_masks(const Tensor& m1, const Tensor& m2,
                                   const std::vector<int>& deg_in,
                                   const std::vector<int>& deg_out);

// Stack of affine inverse-autoregressive steps. Each step is a one-hidden-
// layer MADE producing a shift m and a positive scale s = sigmoid(raw+1.5)+0.1
// from the previous z (strictly autoregressive) and the unmasked context:
//   z' = m + s * z,   log q loses sum(log s).
// With identity initialization the whole stack is the identity map.
class IafStack {
 public:
  IafStack(std::string prefix, FlowConfig cfg);

  void register_params(ParamStore& store, Rng rng, bool identity_init = true) const;

  struct FlowOut {
    Value z;
    Value log_det;  // [n,1], sum over layers and dims of log s
  };
  FlowOut transform(Tape& tape, const BoundParams& p, Value z0,
                    std::optional<Value> context) const;

  // Sequential inversion of the full stack for one vector (tests/diagnostics).
  Tensor inverse(const ParamStore& store, const Tensor& z, const Tensor& context) const;

  const FlowConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  const Tensor& input_mask(int layer) const { return m1_[static_cast<size_t>(layer)]; }
  const Tensor& output_mask(int layer) const { return m2_[static_cast<size_t>(layer)]; }
  std::vector<std::string> param_names() const;

  static double scale_raw_identity_bias() { return std::log(9.0) - 1.5; }

 private:
  // (m, s) heads of one MADE layer for a plain [n,d_z] input
  std::pair<Tensor, Tensor> layer_m_s(const ParamStore& store, int layer, const Tensor& z,
                                      const Tensor& context) const;

  std::string prefix_;
  FlowConfig cfg_;
  std::vector<Tensor> m1_, m2_;              // per-layer masks
  std::vector<std::vector<int>> deg_in_;     // per-layer input degrees
};

// Reparameterized Gaussian: z = mu + exp(log_sigma) * eps.
PosteriorRows gaussian_sample_rows(Tape& tape, Value mu, Value log_sigma, Value eps);
PosteriorSample gaussian_sample(const TaskPosteriorParams& params, const Tensor& eps);

// Gaussian base followed by the conditioned flow.
PosteriorRows iaf_sample_rows(Tape& tape, const IafStack& flow, const BoundParams& p, Value mu,
                              Value log_sigma, std::optional<Value> context, Value eps);
PosteriorSample iaf_sample(const TaskPosteriorParams& params, const IafStack& flow,
                           const ParamStore& store, const Tensor& eps);

Value std_normal_logpdf_rows(Value z);          // [n,d] -> [n,1]
double std_normal_logpdf(const Tensor& z);

// Monte-Carlo KL(q || N(0,I)) from reparameterized samples.
Value kl_rows(Value log_q, Value z);
double kl_monte_carlo(const std::vector<PosteriorSample>& samples);

double kl_closed_form_gaussian(const TaskPosteriorParams& params);
double kl_closed_form_gaussian(const Tensor& mu, const Tensor& log_sigma);

}  // namespace dp
