#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace loopsoup {

/// SplitMix64 finalizer; used to spread (seed, index) pairs over the state space.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// xoshiro256++ (Blackman & Vigna). Satisfies UniformRandomBitGenerator.
class Xoshiro256pp {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256pp(std::uint64_t seed = 0) noexcept { reseed(seed); }

  void reseed(std::uint64_t seed) noexcept {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  friend bool operator==(const Xoshiro256pp&, const Xoshiro256pp&) = default;

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  std::array<std::uint64_t, 4> s_{};
};

/// A random stream: one engine plus the variate helpers the samplers need.
///
/// Streams are cheap to construct and never shared between replicas. All the
/// samplers in this library take a `RngStream&` explicitly.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : engine_(seed) {}

  Xoshiro256pp& engine() noexcept { return engine_; }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1].
  double uniform_open0() noexcept { return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

  double gaussian() { return normal_(engine_); }

  /// Unit-mean exponential.
  double exponential() noexcept { return -std::log(uniform_open0()); }

  double gamma(double shape, double scale) {
    if (shape <= 0.0) return 0.0;
    return std::gamma_distribution<double>(shape, scale)(engine_);
  }

  std::uint64_t poisson(double mean) {
    if (!(mean > 0.0)) return 0;
    return std::poisson_distribution<std::uint64_t>(mean)(engine_);
  }

  bool coin() noexcept { return (engine_() >> 63) != 0; }

  int sign() noexcept { return coin() ? 1 : -1; }

 private:
  Xoshiro256pp engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Replica stream derivation: a pure function of (masterSeed, replicaIndex).
///
/// The pair is hashed through two SplitMix64 rounds so that neighbouring
/// indices land on unrelated xoshiro states.
inline RngStream derive_stream(std::uint64_t master_seed, std::uint64_t replica_index) {
  std::uint64_t h = master_seed;
  const std::uint64_t a = splitmix64(h);
  std::uint64_t g = replica_index ^ 0xD1B54A32D192ED03ull;
  const std::uint64_t b = splitmix64(g);
  std::uint64_t mix = a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2));
  return RngStream(splitmix64(mix));
}

/// Sub-stream for a named sub-task of a replica (e.g. the second estimate of a paired check).
inline RngStream derive_stream(std::uint64_t master_seed, std::uint64_t replica_index, std::uint64_t channel) {
  std::uint64_t c = channel * 0x9E3779B97F4A7C15ull ^ master_seed;
  return derive_stream(splitmix64(c), replica_index);
}

}  // namespace loopsoup
