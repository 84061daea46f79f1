#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace relflow {

/// splitmix64 finalizer; used to mix stream keys into seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_label(std::string_view label) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent seed from a root seed, a stream label and any number of integer keys.
/// All randomness in the library flows through this, so each subsystem can be replayed alone.
template <typename... Keys>
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view label, Keys... keys) noexcept {
  std::uint64_t h = mix64(root ^ mix64(hash_label(label)));
  ((h = mix64(h ^ mix64(static_cast<std::uint64_t>(keys) + 0x632be59bd9b4e019ULL))), ...);
  return h;
}

/// Thin wrapper over mt19937_64 with the handful of draws the library needs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  template <typename... Keys>
  static Rng stream(std::uint64_t root, std::string_view label, Keys... keys) {
    return Rng(derive_seed(root, label, keys...));
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  double normal() { return normal_(engine_); }

  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace relflow
