// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <type_traits>
#include <vector>

#include "resnas/common.hpp"

namespace resnas {

using i64 = long long;

/// Flat scalar storage in one of the two supported precisions.
class Buffer {
 public:
  Buffer() = default;
  Buffer(std::size_t n, Dtype dt);

  std::size_t size() const { return dtype_ == Dtype::F32 ? f_.size() : d_.size(); }
  Dtype dtype() const { return dtype_; }

  template <class T>
  T* ptr() {
    if constexpr (std::is_same_v<T, float>) {
      return f_.data();
    } else {
      return d_.data();
    }
  }
  template <class T>
  const T* ptr() const {
    if constexpr (std::is_same_v<T, float>) {
      return f_.data();
    } else {
      return d_.data();
    }
  }

  double at(std::size_t i) const;
  void set(std::size_t i, double v);
  void fill(double v);

 private:
  Dtype dtype_ = Dtype::F32;
  std::vector<float> f_;
  std::vector<double> d_;
};

/// Invokes f.operator()<T>() with T = float or double matching dt.
template <class F>
decltype(auto) dispatch(Dtype dt, F&& f) {
  if (dt == Dtype::F64) {
    return f.template operator()<double>();
  }
  return f.template operator()<float>();
}

struct TensorNode;
using BackwardFn = std::function<void(TensorNode&)>;

/// One node of the autodiff tape: a value, its optional gradient, and the
/// recipe for pushing its gradient into the nodes it was computed from.
struct TensorNode {
  std::vector<i64> shape;
  Buffer data;
  std::optional<Buffer> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;  // tape position; inputs always carry smaller ids
  std::vector<std::shared_ptr<TensorNode>> parents;
  BackwardFn backward_fn;

  i64 numel() const;
  Buffer& ensure_grad();
};

/// Dense n-dimensional value, a shared handle onto a tape node. Copying a
/// Tensor aliases the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<i64> shape, bool requires_grad = false);
  static Tensor zeros(std::vector<i64> shape, bool requires_grad, Dtype dt);
  static Tensor full(std::vector<i64> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<i64> shape, const std::vector<double>& values,
                          bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const std::vector<i64>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  i64 dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  i64 numel() const { return n_->numel(); }
  Dtype dtype() const { return n_->data.dtype(); }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }

  Buffer& buf() { return n_->data; }
  const Buffer& buf() const { return n_->data; }
  bool has_grad() const { return n_->grad.has_value(); }
  Buffer& grad_buf() { return n_->ensure_grad(); }
  const Buffer& grad_buf() const;
  void zero_grad() { n_->grad.reset(); }

  /// Value of a scalar (1-element) tensor.
  double item() const;
  double value_at(std::size_t flat_index) const { return n_->data.at(flat_index); }
  double grad_at(std::size_t flat_index) const;
  std::vector<double> to_vector() const;
  std::vector<double> grad_to_vector() const;

  std::shared_ptr<TensorNode> node() const { return n_; }

  /// Leaf copy of the same values, detached from the tape.
  Tensor detach_copy() const;

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}
  std::shared_ptr<TensorNode> n_;
  friend Tensor finish_op(const char* name, Tensor out, std::vector<Tensor> parents,
                          BackwardFn fn);
  friend class TensorFactory;
};

/// Ordered record of the operations reachable from a root, ascending by
/// execution time. backward() walks it once, in reverse.
struct Tape {
  std::vector<TensorNode*> nodes;
  static Tape from(const Tensor& root);
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively;
/// callers zero them between steps.
void backward(const Tensor& loss);

/// While alive on a thread, ops on that thread do not record tape entries.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

/// Shared op epilogue: optional NaN/Inf scan, then tape registration when
/// grads are enabled and some parent requires them.
Tensor finish_op(const char* name, Tensor out, std::vector<Tensor> parents, BackwardFn fn);

}  // namespace resnas
