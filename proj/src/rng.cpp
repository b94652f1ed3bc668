#include "dp/rng.hpp"

#include <cmath>

namespace dp {

uint64_t Rng::mix(uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

uint64_t Rng::hash_label(std::string_view label) {
  // FNV-1a 64
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

Rng Rng::child(std::string_view label) const {
  return Rng(mix(key_ ^ hash_label(label)), 0);
}

Rng Rng::child(uint64_t index) const {
  return Rng(mix(key_ ^ mix(index + kGamma)), 0);
}

uint64_t Rng::next_u64() {
  uint64_t v = mix(key_ + (++counter_) * kGamma);
  return v;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

uint64_t Rng::uniform_int(uint64_t n) {
  if (n == 0) throw ContractError("uniform_int(0)");
  uint64_t limit = ~0ull - (~0ull % n);
  uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(1.0 - u1));
  double theta = 2.0 * M_PI * u2;
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

Tensor Rng::normal_tensor(std::vector<int64_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = normal();
  return t;
}

Tensor Rng::uniform_tensor(std::vector<int64_t> shape, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
  return t;
}

void Rng::restore(const State& s) {
  key_ = s.key;
  counter_ = s.counter;
  has_cached_ = s.has_cached;
  cached_ = s.cached;
}

}  // namespace dp
