#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace zeros {

/// Seeded counter-based generator (SplitMix64 finalizer over a keyed Weyl
/// sequence). The n-th output is a pure function of (seed, stream, n), so
/// streams can be split freely and replay is exact.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed, 0x5bf0363546469e35ull + stream)) {}

  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Order-independent seed derivation for sub-streams.
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    return finalize(a + 0x9e3779b97f4a7c15ull * finalize(b + 0x9e3779b97f4a7c15ull));
  }

  std::uint64_t next_u64() { return finalize(key_ + 0x9e3779b97f4a7c15ull * ++ctr_); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// i in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller; pairs are cached.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace zeros
