// SPDX-License-Identifier: Apache-2.0
#include "resnas/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace resnas {

namespace {

Dtype g_default_dtype = Dtype::F32;
bool g_finite_check = false;
thread_local int g_no_grad_depth = 0;
thread_local std::uint64_t g_seq_counter = 0;

}  // namespace

Dtype default_dtype() { return g_default_dtype; }
void set_default_dtype(Dtype dt) { g_default_dtype = dt; }

std::size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& name) {
  if (name == "f32") return Dtype::F32;
  if (name == "f64") return Dtype::F64;
  throw FormatError("unknown dtype name: " + name);
}

void set_finite_check(bool enabled) { g_finite_check = enabled; }
bool finite_check_enabled() { return g_finite_check; }

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Buffer::Buffer(std::size_t n, Dtype dt) : dtype_(dt) {
  if (dt == Dtype::F32) {
    f_.assign(n, 0.0f);
  } else {
    d_.assign(n, 0.0);
  }
}

double Buffer::at(std::size_t i) const {
  return dtype_ == Dtype::F32 ? static_cast<double>(f_[i]) : d_[i];
}

void Buffer::set(std::size_t i, double v) {
  if (dtype_ == Dtype::F32) {
    f_[i] = static_cast<float>(v);
  } else {
    d_[i] = v;
  }
}

void Buffer::fill(double v) {
  if (dtype_ == Dtype::F32) {
    std::fill(f_.begin(), f_.end(), static_cast<float>(v));
  } else {
    std::fill(d_.begin(), d_.end(), v);
  }
}

i64 TensorNode::numel() const {
  i64 n = 1;
  for (i64 d : shape) n *= d;
  return n;
}

Buffer& TensorNode::ensure_grad() {
  if (!grad) grad.emplace(static_cast<std::size_t>(numel()), data.dtype());
  return *grad;
}

namespace {

std::shared_ptr<TensorNode> make_node(std::vector<i64> shape, Dtype dt) {
  for (i64 d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive");
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = Buffer(static_cast<std::size_t>(n->numel()), dt);
  n->seq = ++g_seq_counter;
  return n;
}

}  // namespace

class TensorFactory {
 public:
  static Tensor wrap(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }
};

Tensor Tensor::zeros(std::vector<i64> shape, bool requires_grad) {
  return zeros(std::move(shape), requires_grad, g_default_dtype);
}

Tensor Tensor::zeros(std::vector<i64> shape, bool requires_grad, Dtype dt) {
  auto n = make_node(std::move(shape), dt);
  n->requires_grad = requires_grad;
  return TensorFactory::wrap(std::move(n));
}

Tensor Tensor::full(std::vector<i64> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  t.buf().fill(value);
  return t;
}

Tensor Tensor::from_data(std::vector<i64> shape, const std::vector<double>& values,
                         bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  if (static_cast<std::size_t>(t.numel()) != values.size()) {
    throw DimensionError("from_data: value count does not match shape");
  }
  for (std::size_t i = 0; i < values.size(); ++i) t.buf().set(i, values[i]);
  return t;
}

const Buffer& Tensor::grad_buf() const {
  if (!n_->grad) throw ContractError("tensor has no gradient");
  return *n_->grad;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a 1-element tensor");
  return n_->data.at(0);
}

double Tensor::grad_at(std::size_t flat_index) const { return grad_buf().at(flat_index); }

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = n_->data.at(i);
  return out;
}

std::vector<double> Tensor::grad_to_vector() const {
  const Buffer& g = grad_buf();
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g.at(i);
  return out;
}

Tensor Tensor::detach_copy() const {
  Tensor t = zeros(n_->shape, false, dtype());
  dispatch(dtype(), [&]<class T>() {
    const T* src = n_->data.ptr<T>();
    T* dst = t.buf().ptr<T>();
    std::copy(src, src + numel(), dst);
  });
  return t;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor finish_op(const char* name, Tensor out, std::vector<Tensor> parents, BackwardFn fn) {
  if (g_finite_check) {
    bool ok = dispatch(out.dtype(), [&]<class T>() {
      const T* p = out.buf().ptr<T>();
      const i64 n = out.numel();
      for (i64 i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(p[i]))) return false;
      }
      return true;
    });
    if (!ok) throw NumericError(std::string("non-finite value produced by op ") + name);
  }
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const Tensor& p : parents) {
    if (p.defined() && p.requires_grad()) {
      needs = true;
      break;
    }
  }
  if (!needs) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->parents.reserve(parents.size());
  for (const Tensor& p : parents) {
    if (p.defined()) node->parents.push_back(p.node());
  }
  node->backward_fn = std::move(fn);
  return out;
}

Tape Tape::from(const Tensor& root) {
  Tape tape;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    tape.nodes.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(tape.nodes.begin(), tape.nodes.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->seq < b->seq; });
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not attached to the tape");
  }
  Tape tape = Tape::from(loss);
  loss.node()->ensure_grad().fill(1.0);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && n->grad) n->backward_fn(*n);
  }
}

}  // namespace resnas
