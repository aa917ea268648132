#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "mpdrop/tensor.hpp"

namespace mpd {

// Probability that a unit survives dropout. q() is the dropout probability.
class RetainProb {
 public:
  explicit RetainProb(double p) : p_(p) {
    if (!(p > 0.0 && p <= 1.0)) {
      throw ParameterError("retaining probability must lie in (0, 1], got " + std::to_string(p));
    }
  }

  [[nodiscard]] double p() const { return p_; }
  [[nodiscard]] double q() const { return 1.0 - p_; }

  friend bool operator==(const RetainProb&, const RetainProb&) = default;

 private:
  double p_;
};

// Counter-based generator: draw k of a stream with key K is
// splitmix64(K + k * golden). Any stream can derive independent child
// streams, so per-example randomness inside a batch stays reproducible no
// matter how the examples are scheduled.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc908ULL)) {}

  [[nodiscard]] std::uint64_t next_u64() { return mix(key_ + (counter_++) * kGolden); }

  // Uniform on [0, 1) with 53 random bits.
  [[nodiscard]] double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound). Lemire's multiply-shift with rejection.
  [[nodiscard]] std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw ParameterError("RngStream::below needs a positive bound");
    const std::uint64_t threshold = (0 - bound) % bound;
    while (true) {
      const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * bound;
      if (static_cast<std::uint64_t>(m) >= threshold) {
        return static_cast<std::uint64_t>(m >> 64);
      }
    }
  }

  [[nodiscard]] bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; consumes two draws per sample.
  [[nodiscard]] double gaussian(double mean, double stddev) {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return mean + stddev * z;
  }

  // Child stream keyed off the next draw; advances this stream by one.
  [[nodiscard]] RngStream fork() { return RngStream(Key{mix(next_u64() ^ kForkSalt)}); }

  // Child stream number `index`, without advancing this stream.
  [[nodiscard]] RngStream substream(std::uint64_t index) const {
    return RngStream(Key{mix(key_ ^ mix(index + kForkSalt))});
  }

  [[nodiscard]] std::uint64_t counter() const { return counter_; }

 private:
  struct Key {
    std::uint64_t value;
  };
  explicit RngStream(Key k) : key_(k.value) {}

  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  static constexpr std::uint64_t kForkSalt = 0xd1b54a32d192ed03ULL;

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += kGolden;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Tensor of independent Bernoulli(p) draws in {0, 1}.
template <std::floating_point T = double>
[[nodiscard]] Tensor4<T> rng_bernoulli_mask(RngStream& rng, Shape4 shape, RetainProb p) {
  Tensor4<T> mask(shape);
  for (auto& v : mask.data()) v = rng.bernoulli(p.p()) ? T(1) : T(0);
  return mask;
}

template <std::floating_point T = double>
[[nodiscard]] Tensor4<T> rng_gaussian(RngStream& rng, Shape4 shape, double mean, double stddev) {
  if (!(stddev >= 0.0)) {
    throw ParameterError("gaussian std must be non-negative, got " + std::to_string(stddev));
  }
  Tensor4<T> out(shape);
  for (auto& v : out.data()) v = static_cast<T>(rng.gaussian(mean, stddev));
  return out;
}

}  // namespace mpd
