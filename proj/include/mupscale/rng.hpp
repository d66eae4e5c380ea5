#pragma once

#include <cmath>
#include <cstdint>

namespace mupscale {

// Counter-based random numbers: every draw is a pure function of a key
// tuple, so runs are reproducible, order-independent, and two specs that
// share (seed, purpose, layer, index) see identical base draws regardless of
// their exponent tables (coupled seeding for gauge comparisons).
namespace rng {

enum class Purpose : std::uint64_t {
  WeightInit = 1,
  TaskData = 2,
  TaskTeacher = 3,
  TaskNoise = 4,
  BatchOrder = 5,
  Heldout = 6,
  Probe = 7,
  FitRestart = 8,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline std::uint64_t key(std::uint64_t seed, Purpose purpose, std::uint64_t layer,
                         std::uint64_t index) {
  return mix(mix(mix(seed, static_cast<std::uint64_t>(purpose)), layer), index);
}

// Uniform in (0, 1]; never returns 0 so log() below is safe.
inline double uniform(std::uint64_t k) {
  return (static_cast<double>(k >> 11) + 1.0) * (1.0 / 9007199254740992.0);
}

inline double uniform(std::uint64_t seed, Purpose purpose, std::uint64_t layer,
                      std::uint64_t index) {
  return uniform(key(seed, purpose, layer, index));
}

// Standard normal via Box-Muller on two derived counters.
inline double normal(std::uint64_t seed, Purpose purpose, std::uint64_t layer,
                     std::uint64_t index) {
  const std::uint64_t k = key(seed, purpose, layer, index);
  const double u1 = uniform(k);
  const double u2 = uniform(splitmix64(k));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586232 * u2);
}

// Convenience stream for sequential draws from one (seed, purpose, layer).
class Stream {
public:
  Stream(std::uint64_t seed, Purpose purpose, std::uint64_t layer = 0)
      : seed_(seed), purpose_(purpose), layer_(layer) {}

  double uniform() { return rng::uniform(seed_, purpose_, layer_, counter_++); }
  double normal() { return rng::normal(seed_, purpose_, layer_, counter_++); }
  std::uint64_t bits() { return key(seed_, purpose_, layer_, counter_++); }
  // Uniform integer in [0, m).
  std::uint64_t below(std::uint64_t m) { return bits() % m; }

private:
  std::uint64_t seed_;
  Purpose purpose_;
  std::uint64_t layer_;
  std::uint64_t counter_ = 0;
};

}  // namespace rng
}  // namespace mupscale
