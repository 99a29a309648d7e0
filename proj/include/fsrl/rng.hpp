#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "fsrl/util.hpp"

namespace fsrl {

// Deterministic random stream. All randomness in a run flows from one root
// seed; independent streams are derived by name so that adding draws to one
// consumer never shifts another (keeps sweeps and paired runs reproducible).
//
// Distributions are implemented by hand: the std:: distribution objects are
// not pinned by the standard, and we need identical sequences everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  static Rng stream(uint64_t root_seed, std::string_view name) {
    uint64_t h = fnv1a64(name.data(), name.size());
    return Rng(root_seed ^ (h | 1ull));
  }

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller (no cached spare; sequence stays simple).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  uint64_t randbelow(uint64_t n) {
    if (n == 0) throw std::invalid_argument("randbelow: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r = gen_();
    while (r >= limit) r = gen_();
    return r % n;
  }

  // Chance in [0,1]; p >= 1 always true, p <= 0 always false.
  bool bernoulli(double p) { return uniform01() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randbelow(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace fsrl
