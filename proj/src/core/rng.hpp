#pragma once

#include <cmath>
#include <cstdint>

#include "core/common.hpp"

namespace pgns {

// Counter-based RNG (splitmix64 over a keyed counter). Streams are pure
// functions of (seed, stream, counter), so any draw is reproducible without
// carrying mutable state through checkpoints: training derives one stream per
// (step, purpose) and replays are bitwise identical.
class Rng {
 public:
  Rng(uint64_t seed, uint64_t stream) : state_(mix(mix(seed) ^ mix(stream ^ 0x9e3779b97f4a7c15ull))) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Standard normal via Box-Muller (pairs are drawn eagerly; no cached spare,
  // so the draw count per call is fixed).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
};

// Fixed stream ids so independent consumers never collide.
namespace streams {
constexpr uint64_t kRayPixels = 1;
constexpr uint64_t kRayStrata = 2;
constexpr uint64_t kImportance = 3;
constexpr uint64_t kPointBatch = 4;
constexpr uint64_t kInit = 5;
constexpr uint64_t kScenePoints = 6;
constexpr uint64_t kSceneNoise = 7;
constexpr uint64_t kEvalSample = 8;
}  // namespace streams

// Stream for a given training step and purpose.
inline Rng step_rng(uint64_t seed, uint64_t purpose, uint64_t step) {
  return Rng(seed, purpose * 0x100000001ull + step);
}

}  // namespace pgns
