#include "dp/params.hpp"

#include <bit>
#include <cmath>

#include "dp/rng.hpp"

namespace dp {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (has(name)) throw ContractError("duplicate parameter: " + name);
  order_.push_back(name);
  return values_.emplace(name, std::move(init)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

uint64_t ParamStore::checksum() const {
  uint64_t h = 0xCBF29CE484222325ull;
  auto feed = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001B3ull;
    }
  };
  for (const std::string& name : order_) {
    h ^= Rng::hash_label(name);
    h *= 0x100000001B3ull;
    const Tensor& t = values_.at(name);
    for (int64_t i = 0; i < t.size(); ++i) feed(std::bit_cast<uint64_t>(t[i]));
  }
  return h;
}

Value BoundParams::operator[](const std::string& name) const {
  auto it = leaves.find(name);
  if (it == leaves.end()) throw ContractError("parameter not bound: " + name);
  return it->second;
}

BoundParams bind_params(Tape& tape, const ParamStore& store,
                        const std::vector<std::string>& frozen) {
  BoundParams out;
  for (const std::string& name : store.names()) {
    bool is_frozen = false;
    for (const std::string& f : frozen)
      if (name.rfind(f, 0) == 0) {
        is_frozen = true;
        break;
      }
    Value v = is_frozen ? tape.constant(store.get(name)) : tape.input(store.get(name));
    out.leaves.emplace(name, v);
  }
  return out;
}

std::unordered_map<std::string, Tensor> collect_grads(const BoundParams& bound) {
  std::unordered_map<std::string, Tensor> grads;
  for (const auto& [name, v] : bound.leaves) {
    if (v.tape->node(v.id).op == Op::Leaf) grads.emplace(name, v.grad());
  }
  return grads;
}

void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t,
                 const AdamConfig& cfg) {
  if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v))
    throw ShapeError("adam_update shape mismatch");
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (int64_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    double mhat = m[i] / bc1;
    double vhat = v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void AdamState::step(ParamStore& params, const std::unordered_map<std::string, Tensor>& grads,
                     const AdamConfig& cfg,
                     const std::unordered_map<std::string, double>* lr_scale) {
  ++t_;
  for (const std::string& name : params.names()) {
    Tensor& p = params.get(name);
    auto mv = moments_.find(name);
    if (mv == moments_.end())
      mv = moments_
               .emplace(name,
                        std::make_pair(Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
               .first;
    auto git = grads.find(name);
    AdamConfig c = cfg;
    if (lr_scale) {
      auto s = lr_scale->find(name);
      if (s != lr_scale->end()) c.lr *= s->second;
    }
    if (git != grads.end()) {
      adam_update(p, git->second, mv->second.first, mv->second.second, t_, c);
    } else {
      Tensor zero = Tensor::zeros(p.shape());
      adam_update(p, zero, mv->second.first, mv->second.second, t_, c);
    }
  }
}

void AdamState::set(const std::string& name, Tensor m, Tensor v) {
  moments_[name] = {std::move(m), std::move(v)};
}

}  // namespace dp
