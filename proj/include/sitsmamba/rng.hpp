#pragma once

#include <cstdint>
#include <random>

namespace sitsmamba {

/// The single seeded generator that drives initialization, shuffling,
/// sampling and synthetic data. Wraps mt19937_64 so every consumer draws
/// from one reproducible stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(engine_); }
  /// Uniform integer in [lo, hi].
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(engine_);
  }
  /// Derives an independent child seed, e.g. one per sample.
  std::uint64_t fork() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sitsmamba
