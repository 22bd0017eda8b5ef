#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tornet {

/// Seeded generator with named, independent sub-streams. Every random draw in
/// the project (init, dropout, shuffling, bootstrap, synthesis) comes from a
/// stream derived from one 64-bit run seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream keyed by name; does not advance this generator.
  Rng stream(std::string_view name) const;
  Rng stream(std::uint64_t key) const;

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal (Box-Muller, no cached second value).
  double normal();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace tornet
