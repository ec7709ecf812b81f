#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fsml {

/// 64-bit FNV-1a. Used for stream labels and config fingerprints.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

std::uint64_t splitmix64_mix(std::uint64_t x) noexcept;

/// Seed of the stream for `purpose` (and optional `index`) under a root seed:
/// seed ^ hash(purpose) ^ mix(index). New consumers never perturb old ones.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose,
                          std::uint64_t index = 0) noexcept;

/// SplitMix64 stream. All randomness in the library flows through this type so
/// results depend only on (seed, call sequence) and not on the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) noexcept { return uniform() < p; }
  /// Standard normal (Box-Muller, one draw per call).
  double normal() noexcept;
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Indices [0, n) shuffled (Fisher-Yates).
  std::vector<std::size_t> permutation(std::size_t n);
  /// k distinct values from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> choose(std::size_t n, std::size_t k);

  Rng derive(std::string_view purpose, std::uint64_t index = 0) const noexcept {
    return Rng(derive_seed(state_, purpose, index));
  }

 private:
  std::uint64_t state_;
};

}  // namespace fsml
