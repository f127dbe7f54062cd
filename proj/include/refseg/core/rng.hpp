#pragma once
// Deterministic random number generation.  One RunRng per training run,
// split into independent named streams (init / data / mask) so that adding
// or removing one consumer never shifts the draws of another.  SplitMix64
// keeps the state to a single u64 per stream, which makes checkpointing the
// generator trivial and platform-independent (no libstdc++ distribution
// internals involved).

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include "refseg/util/hash.hpp"

namespace refseg::core {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derive an independent seed for a named substream or an indexed item.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t s = seed ^ util::fnv1a64(name);
  return splitmix64(s);
}
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ull * (index + 1));
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }
  float next_float() { return float(next_u64() >> 40) * 0x1.0p-24f; }

  // unbiased integer in [0, n), rejection sampled
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::bounded: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // standard normal via Box-Muller (cos branch only, keeps state minimal)
  double normal() {
    double u1;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // N(0, sigma^2) truncated to [-2 sigma, 2 sigma]
  double trunc_normal(double sigma) {
    double x;
    do {
      x = normal();
    } while (std::fabs(x) > 2.0);
    return x * sigma;
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

class RunRng {
 public:
  explicit RunRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Rng& stream(const std::string& name) {
    auto it = streams_.find(name);
    if (it == streams_.end())
      it = streams_.emplace(name, Rng(derive_seed(seed_, name))).first;
    return it->second;
  }

  // sorted (name, state) view for checkpointing
  const std::map<std::string, Rng>& streams() const { return streams_; }
  void restore_stream(const std::string& name, std::uint64_t state) {
    streams_.insert_or_assign(name, Rng(0)).first->second.set_state(state);
  }

 private:
  std::uint64_t seed_;
  std::map<std::string, Rng> streams_;
};

}  // namespace refseg::core
