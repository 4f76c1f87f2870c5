// SPDX-License-Identifier: Apache-2.0
#include "resnas/rng.hpp"

#include <cmath>
#include <sstream>

#include "resnas/common.hpp"

namespace resnas {

int Rng::uniform_int(int n) {
  if (n <= 0) throw ContractError("Rng::uniform_int: n must be positive");
  // Rejection sampling keeps the draw exactly uniform.
  const std::uint64_t bound = UINT64_MAX - UINT64_MAX % static_cast<std::uint64_t>(n);
  std::uint64_t v = eng_();
  while (v >= bound) v = eng_();
  return static_cast<int>(v % static_cast<std::uint64_t>(n));
}

double Rng::gaussian() {
  // Box-Muller; u1 in (0,1] so log is finite.
  double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::truncated_normal(double stddev) {
  for (;;) {
    double z = gaussian();
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

double Rng::gamma(double shape) {
  if (shape <= 0.0) throw ContractError("Rng::gamma: shape must be positive");
  if (shape < 1.0) {
    // Boost to shape+1 and scale back.
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = gaussian();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double Rng::beta(double a, double b) {
  double x = gamma(a);
  double y = gamma(b);
  return x / (x + y);
}

std::string Rng::state() const {
  std::ostringstream ss;
  ss << eng_;
  return ss.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream ss(s);
  ss >> eng_;
  if (ss.fail()) throw FormatError("Rng::set_state: malformed engine state");
}

}  // namespace resnas
