// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace resnas {

/// Scalar precision of tensor storage. F32 is the training default; F64 is
/// used for gradient checks where 32-bit tolerances are unreachable.
enum class Dtype { F32, F64 };

Dtype default_dtype();
void set_default_dtype(Dtype dt);
std::size_t dtype_size(Dtype dt);
const char* dtype_name(Dtype dt);
Dtype dtype_from_name(const std::string& name);

/// Shape disagreement between operands (or an op producing an empty extent).
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A caller violated a documented precondition.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data (dataset records, checkpoints, config files).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A resource constraint cannot be satisfied by any sampled candidate.
struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergedError : std::runtime_error {
  long long step;
  DivergedError(const std::string& msg, long long step_index)
      : std::runtime_error(msg), step(step_index) {}
};

/// Non-finite value detected by the forward NaN/Inf hook.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// When enabled, every tensor op scans its output for NaN/Inf and throws
/// NumericError naming the op. Off by default (it is a debugging hook).
void set_finite_check(bool enabled);
bool finite_check_enabled();

/// Mixes two 64-bit values into a fresh seed (splitmix64 finalizer). Used to
/// derive independent counter-based random streams, e.g. per (epoch, index).
std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b);

}  // namespace resnas
