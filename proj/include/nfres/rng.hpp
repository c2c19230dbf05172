#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace nfres {

/// SplitMix64 finalizer; used to decorrelate (seed, stream) pairs.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// FNV-1a over the bytes of a name. Stable across builds and platforms.
constexpr std::uint64_t stable_hash(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// A reproducible random stream identified by (seed, stream_id).
///
/// Two streams with the same pair produce the same sequence within one build.
/// Each stream is meant to be owned by one logical task at a time.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id), engine_(make_seed(seed, stream_id)) {}

  RngStream(std::uint64_t seed, std::string_view stream_name)
      : RngStream(seed, stable_hash(stream_name)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  double gaussian(double mean, double stddev) {
    return mean + stddev * normal_(engine_);
  }

  double uniform() { return uniform_(engine_); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  static std::uint64_t make_seed(std::uint64_t seed, std::uint64_t stream_id) {
    return mix64(mix64(seed) ^ mix64(stream_id + 0x632be59bd9b4e019ULL));
  }

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace nfres
