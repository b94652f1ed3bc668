#pragma once
#include <cstdint>
#include <string_view>

#include "dp/tensor.hpp"

namespace dp {

// Counter-based deterministic random stream (SplitMix64 finalizer applied to
// stream_key + counter * golden gamma). Substreams are derived by hashing a
// label or index into the key, so generation order never affects the values a
// substream produces. The exact construction is documented in the README so
// other implementations can reproduce the streams.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix(seed ^ kRootSalt)) {}

  Rng child(std::string_view label) const;
  Rng child(uint64_t index) const;

  uint64_t next_u64();

  double uniform();                         // [0, 1), 53-bit
  double uniform(double lo, double hi);     // lo + u * (hi - lo)
  uint64_t uniform_int(uint64_t n);         // [0, n), unbiased via rejection
  double normal();                          // N(0, 1), Box-Muller with cache

  Tensor normal_tensor(std::vector<int64_t> shape);
  Tensor uniform_tensor(std::vector<int64_t> shape, double lo, double hi);

  struct State {
    uint64_t key = 0;
    uint64_t counter = 0;
    bool has_cached = false;
    double cached = 0.0;
  };
  State state() const { return {key_, counter_, has_cached_, cached_}; }
  void restore(const State& s);

  static uint64_t mix(uint64_t x);  // SplitMix64 finalizer
  static uint64_t hash_label(std::string_view label);

 private:
  Rng(uint64_t key, int) : key_(key) {}  // raw-key constructor

  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr uint64_t kRootSalt = 0x5DEECE66DA6F3B21ull;

  uint64_t key_;
  uint64_t counter_ = 0;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace dp
