#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace histovit {

/// SplitMix64 finaliser. Used to derive independent seeds from a tuple of
/// integers so that a stream depends only on (seed, epoch, sample) and never
/// on scheduling order.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed) noexcept { return mix64(seed); }

template <typename... Rest>
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t first, Rest... rest) noexcept {
  return derive_seed(mix64(seed ^ mix64(first)), static_cast<std::uint64_t>(rest)...);
}

/// FNV-1a, for turning stream names into seed components.
constexpr std::uint64_t tag(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Random stream with platform-independent distributions. The standard
/// library's distribution objects are implementation-defined, so every draw
/// here is built directly on the bits of mt19937_64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::size_t below(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return static_cast<std::size_t>(r % bound);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Normal(0, stddev) truncated to [-2 stddev, 2 stddev] by rejection.
  double truncated_normal(double stddev) {
    double z;
    do {
      z = normal();
    } while (z < -2.0 || z > 2.0);
    return z * stddev;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Named sub-seeds derived from one global seed. Every random decision in a
/// run (initialisation, splitting, shuffling, dropout, augmentation) draws
/// from one of these streams.
struct SeedStreams {
  std::uint64_t global = 0;
  std::uint64_t init = 0;
  std::uint64_t split = 0;
  std::uint64_t shuffle = 0;
  std::uint64_t dropout = 0;
  std::uint64_t augment = 0;
  std::uint64_t bootstrap = 0;
};

inline SeedStreams set_global_seed(std::uint64_t seed) {
  return SeedStreams{
      .global = seed,
      .init = derive_seed(seed, tag("init")),
      .split = derive_seed(seed, tag("split")),
      .shuffle = derive_seed(seed, tag("shuffle")),
      .dropout = derive_seed(seed, tag("dropout")),
      .augment = derive_seed(seed, tag("augment")),
      .bootstrap = derive_seed(seed, tag("bootstrap")),
  };
}

}  // namespace histovit
