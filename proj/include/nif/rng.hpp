#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "nif/tensor.hpp"

namespace nif {

uint64_t splitmix64(uint64_t x);

// Seeded generator with platform-independent real-valued draws. Child
// streams are derived from (seed, key) so per-step and per-module streams
// never depend on how many draws another stream made.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n).
  int64_t below(int64_t n);

  Rng fork(uint64_t key) const { return Rng(splitmix64(seed_ ^ splitmix64(key + 0x9e3779b97f4a7c15ULL))); }
  Rng fork(std::string_view key) const;

  Tensor normal_tensor(const Shape& shape, double stddev = 1.0);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nif
