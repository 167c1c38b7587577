#pragma once

#include <cmath>
#include <cstdint>

namespace cde {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2));
}

/// SplitMix64 stream. Every source of randomness in the project is one of
/// these, derived from a root seed via stable tags, so runs replay exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix64(state_);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, one value per call (no cached spare): draw order stays stable.
  double gauss() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Derived independent stream; same (state, tag) gives the same stream.
  Rng split(std::uint64_t tag) const { return Rng(hash_combine(state_, tag)); }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

/// Counter-based stream keyed on (seed, episode, step); used for per-step
/// mask noise so the draw does not depend on call order elsewhere.
inline Rng keyed_rng(std::uint64_t seed, std::uint64_t episode, std::uint64_t step) {
  return Rng(hash_combine(hash_combine(seed, episode), step));
}

}  // namespace cde
