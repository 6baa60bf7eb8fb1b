#pragma once

// Small self-contained PRNG so ensemble draws are reproducible bit-for-bit
// across platforms and stdlib versions. splitmix64 core, Box-Muller normals.
// Per-trajectory substreams are derived from (seed, index) so results do not
// depend on worker scheduling.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fermi {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Deterministic substream for trajectory `index` of a run seeded `seed`.
  static Rng substream(std::uint64_t seed, std::uint64_t index) {
    // decorrelate: run the index through one splitmix round before mixing
    Rng r(seed ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
    r.next_u64();
    r.next_u64();
    return r;
  }

  std::uint64_t next_u64() {
    std::uint64_t x = (state_ += 0x9e3779b97f4a7c15ULL);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1].
  double uniform_pos() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Standard normal, Box-Muller (pairs cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_pos()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace fermi
