#pragma once
#include <string>
#include <unordered_map>
#include <vector>

#include "dp/tape.hpp"

namespace dp {

// Named persistent parameter tensors. Insertion order is preserved so
// serialization and checksums are stable.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return values_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }
  size_t count() const { return order_.size(); }

  uint64_t checksum() const;  // order- and content-sensitive

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> values_;
};

// Leaves created on a tape for one loss evaluation. `frozen` names are bound
// as constants: they join the graph but receive no parameter update.
struct BoundParams {
  std::unordered_map<std::string, Value> leaves;
  Value operator[](const std::string& name) const;
};

BoundParams bind_params(Tape& tape, const ParamStore& store,
                        const std::vector<std::string>& frozen = {});

// Gradients per parameter name after backward.
std::unordered_map<std::string, Tensor> collect_grads(const BoundParams& bound);

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction on a single tensor.
void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t,
                 const AdamConfig& cfg);

// Dense Adam over a ParamStore. Parameters without an entry in `grads` are
// treated as having zero gradient (their stale momentum still applies).
class AdamState {
 public:
  void step(ParamStore& params, const std::unordered_map<std::string, Tensor>& grads,
            const AdamConfig& cfg,
            const std::unordered_map<std::string, double>* lr_scale = nullptr);

  int64_t t() const { return t_; }
  bool has(const std::string& name) const { return moments_.count(name) > 0; }
  const Tensor& m(const std::string& name) const { return moments_.at(name).first; }
  const Tensor& v(const std::string& name) const { return moments_.at(name).second; }

  // checkpoint io
  void set(const std::string& name, Tensor m, Tensor v);
  void set_t(int64_t t) { t_ = t; }

 private:
  std::unordered_map<std::string, std::pair<Tensor, Tensor>> moments_;
  int64_t t_ = 0;
};

}  // namespace dp
