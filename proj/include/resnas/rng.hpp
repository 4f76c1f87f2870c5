// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace resnas {

/// Seeded random stream. Wraps mt19937_64 with stateless samplers so that
/// serializing the engine state alone fully captures the stream (the standard
/// distributions may cache values, which would break checkpoint resume).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int uniform_int(int n);

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached second value).
  double gaussian();

  /// Normal clipped to [-2s, 2s] by resampling.
  double truncated_normal(double stddev);

  /// Gamma(shape, 1) via Marsaglia-Tsang.
  double gamma(double shape);

  /// Beta(a, b) from two gamma draws.
  double beta(double a, double b);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 eng_;
};

}  // namespace resnas
