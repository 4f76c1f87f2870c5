// SPDX-License-Identifier: Apache-2.0
#include "resnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace resnas {

namespace {

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

void check_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": mixed dtypes");
  }
}

i64 leading_rows(const std::vector<i64>& shape) {
  i64 r = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

std::string shape_str(const std::vector<i64>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
void acc(const T* src, T* dst, i64 n) {
  for (i64 i = 0; i < n; ++i) dst[i] += src[i];
}

// C (+)= A.B with A[m,k], B[k,n].
template <class T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (i64 i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (i64 l = 0; l < k; ++l) {
      const T av = arow[l];
      if (av == T(0)) continue;
      const T* brow = b + l * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (+)= A.B^T with A[m,k], B[n,k].
template <class T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (i64 j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T s = 0;
      for (i64 l = 0; l < k; ++l) s += arow[l] * brow[l];
      if (accumulate) {
        crow[j] += s;
      } else {
        crow[j] = s;
      }
    }
  }
}

// C (+)= A^T.B with A[k,m], B[k,n].
template <class T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (i64 l = 0; l < k; ++l) {
    const T* arow = a + l * m;
    const T* brow = b + l * n;
    for (i64 i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_dtype(a, b, "add");
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape(), false, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.buf().ptr<T>();
    const T* pb = b.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  });
  return finish_op("add", out, {a, b}, [a, b](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const i64 n = self.numel();
      if (a.requires_grad()) acc(g, a.node()->ensure_grad().ptr<T>(), n);
      if (b.requires_grad()) acc(g, b.node()->ensure_grad().ptr<T>(), n);
    });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_dtype(a, b, "sub");
  if (a.shape() != b.shape()) throw DimensionError("sub: shape mismatch");
  Tensor out = Tensor::zeros(a.shape(), false, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.buf().ptr<T>();
    const T* pb = b.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 i = 0; i < a.numel(); ++i) po[i] = pa[i] - pb[i];
  });
  return finish_op("sub", out, {a, b}, [a, b](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const i64 n = self.numel();
      if (a.requires_grad()) acc(g, a.node()->ensure_grad().ptr<T>(), n);
      if (b.requires_grad()) {
        T* gb = b.node()->ensure_grad().ptr<T>();
        for (i64 i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_dtype(a, b, "mul");
  if (a.shape() != b.shape()) throw DimensionError("mul: shape mismatch");
  Tensor out = Tensor::zeros(a.shape(), false, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.buf().ptr<T>();
    const T* pb = b.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
  });
  return finish_op("mul", out, {a, b}, [a, b](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const i64 n = self.numel();
      if (a.requires_grad()) {
        T* ga = a.node()->ensure_grad().ptr<T>();
        const T* pb = b.buf().ptr<T>();
        for (i64 i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
      }
      if (b.requires_grad()) {
        T* gb = b.node()->ensure_grad().ptr<T>();
        const T* pa = a.buf().ptr<T>();
        for (i64 i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
      }
    });
  });
}

Tensor scale(const Tensor& x, double s) {
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    const T ts = static_cast<T>(s);
    for (i64 i = 0; i < x.numel(); ++i) po[i] = px[i] * ts;
  });
  return finish_op("scale", out, {x}, [x, s](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      const T ts = static_cast<T>(s);
      for (i64 i = 0; i < self.numel(); ++i) gx[i] += g[i] * ts;
    });
  });
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 i = 0; i < x.numel(); ++i) {
      const double v = static_cast<double>(px[i]);
      const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
      po[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
    }
  });
  return finish_op("gelu", out, {x}, [x](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const T* px = x.buf().ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 i = 0; i < self.numel(); ++i) {
        const double v = static_cast<double>(px[i]);
        const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
        const double t = std::tanh(u);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * v * v);
        gx[i] += g[i] * static_cast<T>(d);
      }
    });
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  check_dtype(x, b, "add_bias");
  if (b.rank() != 1 || b.dim(0) != x.shape().back()) {
    throw DimensionError("add_bias: bias must match the trailing dim");
  }
  const i64 rows = leading_rows(x.shape());
  const i64 c = x.shape().back();
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    const T* pb = b.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 r = 0; r < rows; ++r) {
      for (i64 j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] + pb[j];
    }
  });
  return finish_op("add_bias", out, {x, b}, [x, b, rows, c](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      if (x.requires_grad()) acc(g, x.node()->ensure_grad().ptr<T>(), self.numel());
      if (b.requires_grad()) {
        T* gb = b.node()->ensure_grad().ptr<T>();
        for (i64 r = 0; r < rows; ++r) {
          for (i64 j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
      }
    });
  });
}

Tensor add_broadcast_batch(const Tensor& x, const Tensor& t) {
  check_dtype(x, t, "add_broadcast_batch");
  if (x.rank() < 2) throw DimensionError("add_broadcast_batch: x must have a batch dim");
  std::vector<i64> rest(x.shape().begin() + 1, x.shape().end());
  if (t.shape() != rest) {
    throw DimensionError("add_broadcast_batch: t shape must equal x shape without batch");
  }
  const i64 batch = x.dim(0);
  const i64 inner = t.numel();
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    const T* pt = t.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 bi = 0; bi < batch; ++bi) {
      const T* xr = px + bi * inner;
      T* orow = po + bi * inner;
      for (i64 j = 0; j < inner; ++j) orow[j] = xr[j] + pt[j];
    }
  });
  return finish_op("add_broadcast_batch", out, {x, t}, [x, t, batch, inner](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      if (x.requires_grad()) acc(g, x.node()->ensure_grad().ptr<T>(), self.numel());
      if (t.requires_grad()) {
        T* gt = t.node()->ensure_grad().ptr<T>();
        for (i64 bi = 0; bi < batch; ++bi) acc(g + bi * inner, gt, inner);
      }
    });
  });
}

Tensor broadcast_batch(const Tensor& t, i64 batch) {
  if (batch <= 0) throw DimensionError("broadcast_batch: batch must be positive");
  std::vector<i64> shape{batch};
  shape.insert(shape.end(), t.shape().begin(), t.shape().end());
  const i64 inner = t.numel();
  Tensor out = Tensor::zeros(shape, false, t.dtype());
  dispatch(t.dtype(), [&]<class T>() {
    const T* pt = t.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 bi = 0; bi < batch; ++bi) std::copy(pt, pt + inner, po + bi * inner);
  });
  return finish_op("broadcast_batch", out, {t}, [t, batch, inner](TensorNode& self) {
    if (!t.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gt = t.node()->ensure_grad().ptr<T>();
      for (i64 bi = 0; bi < batch; ++bi) acc(g + bi * inner, gt, inner);
    });
  });
}

Tensor reshape(const Tensor& x, std::vector<i64> shape) {
  i64 n = 1;
  for (i64 d : shape) n *= d;
  if (n != x.numel()) throw DimensionError("reshape: element count mismatch");
  Tensor out = Tensor::zeros(std::move(shape), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    std::copy(x.buf().ptr<T>(), x.buf().ptr<T>() + x.numel(), out.buf().ptr<T>());
  });
  return finish_op("reshape", out, {x}, [x](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      acc(self.grad->ptr<T>(), x.node()->ensure_grad().ptr<T>(), self.numel());
    });
  });
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  check_dtype(a, b, "concat");
  if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
  if (axis < 0 || axis >= a.rank()) throw DimensionError("concat: axis out of range");
  for (int i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw DimensionError("concat: shapes differ off the concat axis");
    }
  }
  std::vector<i64> shape = a.shape();
  shape[static_cast<std::size_t>(axis)] += b.dim(axis);
  i64 outer = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  i64 inner = 1;
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const i64 a_block = a.dim(axis) * inner;
  const i64 b_block = b.dim(axis) * inner;
  Tensor out = Tensor::zeros(shape, false, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.buf().ptr<T>();
    const T* pb = b.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 o = 0; o < outer; ++o) {
      std::copy(pa + o * a_block, pa + (o + 1) * a_block, po + o * (a_block + b_block));
      std::copy(pb + o * b_block, pb + (o + 1) * b_block,
                po + o * (a_block + b_block) + a_block);
    }
  });
  return finish_op("concat", out, {a, b},
                   [a, b, outer, a_block, b_block](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const i64 stride = a_block + b_block;
      if (a.requires_grad()) {
        T* ga = a.node()->ensure_grad().ptr<T>();
        for (i64 o = 0; o < outer; ++o) acc(g + o * stride, ga + o * a_block, a_block);
      }
      if (b.requires_grad()) {
        T* gb = b.node()->ensure_grad().ptr<T>();
        for (i64 o = 0; o < outer; ++o) {
          acc(g + o * stride + a_block, gb + o * b_block, b_block);
        }
      }
    });
  });
}

Tensor slice(const Tensor& x, int axis, i64 start, i64 len) {
  if (axis < 0 || axis >= x.rank()) throw DimensionError("slice: axis out of range");
  if (start < 0 || len <= 0 || start + len > x.dim(axis)) {
    throw DimensionError("slice: range out of bounds");
  }
  std::vector<i64> shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = len;
  i64 outer = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  i64 inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const i64 in_block = x.dim(axis) * inner;
  const i64 out_block = len * inner;
  const i64 off = start * inner;
  Tensor out = Tensor::zeros(shape, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 o = 0; o < outer; ++o) {
      std::copy(px + o * in_block + off, px + o * in_block + off + out_block,
                po + o * out_block);
    }
  });
  return finish_op("slice", out, {x}, [x, outer, in_block, out_block, off](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 o = 0; o < outer; ++o) {
        acc(g + o * out_block, gx + o * in_block + off, out_block);
      }
    });
  });
}

Tensor zero_pad_channels(const Tensor& x, i64 target) {
  const i64 c = x.shape().back();
  if (target < c) throw DimensionError("zero_pad_channels: target narrower than input");
  if (target == c) {
    // Still a distinct node so the op composes uniformly.
    return reshape(x, x.shape());
  }
  std::vector<i64> shape = x.shape();
  shape.back() = target;
  const i64 rows = leading_rows(x.shape());
  Tensor out = Tensor::zeros(shape, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 r = 0; r < rows; ++r) std::copy(px + r * c, px + (r + 1) * c, po + r * target);
  });
  return finish_op("zero_pad_channels", out, {x}, [x, rows, c, target](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 r = 0; r < rows; ++r) acc(g + r * target, gx + r * c, c);
    });
  });
}

Tensor slice_channels(const Tensor& x, i64 c) {
  const i64 full = x.shape().back();
  if (c <= 0 || c > full) throw DimensionError("slice_channels: width out of range");
  std::vector<i64> shape = x.shape();
  shape.back() = c;
  const i64 rows = leading_rows(x.shape());
  Tensor out = Tensor::zeros(shape, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 r = 0; r < rows; ++r) std::copy(px + r * full, px + r * full + c, po + r * c);
  });
  return finish_op("slice_channels", out, {x}, [x, rows, c, full](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 r = 0; r < rows; ++r) acc(g + r * c, gx + r * full, c);
    });
  });
}

namespace {

i64 int_sqrt(i64 n) {
  i64 g = static_cast<i64>(std::llround(std::sqrt(static_cast<double>(n))));
  while (g * g > n) --g;
  while ((g + 1) * (g + 1) <= n) ++g;
  return g;
}

}  // namespace

Tensor seq_to_grid(const Tensor& seq) {
  if (seq.rank() != 3) throw DimensionError("seq_to_grid: expected [B, N, d]");
  const i64 batch = seq.dim(0), n = seq.dim(1), d = seq.dim(2);
  const i64 g = int_sqrt(n);
  if (g * g != n) throw DimensionError("seq_to_grid: token count is not a perfect square");
  Tensor out = Tensor::zeros({batch, d, g, g}, false, seq.dtype());
  dispatch(seq.dtype(), [&]<class T>() {
    const T* ps = seq.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 b = 0; b < batch; ++b) {
      for (i64 t = 0; t < n; ++t) {
        const T* tok = ps + (b * n + t) * d;
        for (i64 c = 0; c < d; ++c) po[((b * d + c) * n) + t] = tok[c];
      }
    }
  });
  return finish_op("seq_to_grid", out, {seq}, [seq, batch, n, d](TensorNode& self) {
    if (!seq.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* go = self.grad->ptr<T>();
      T* gs = seq.node()->ensure_grad().ptr<T>();
      for (i64 b = 0; b < batch; ++b) {
        for (i64 t = 0; t < n; ++t) {
          T* tok = gs + (b * n + t) * d;
          for (i64 c = 0; c < d; ++c) tok[c] += go[((b * d + c) * n) + t];
        }
      }
    });
  });
}

Tensor grid_to_seq(const Tensor& grid) {
  if (grid.rank() != 4) throw DimensionError("grid_to_seq: expected [B, d, g, g]");
  const i64 batch = grid.dim(0), d = grid.dim(1), gh = grid.dim(2), gw = grid.dim(3);
  if (gh != gw) throw DimensionError("grid_to_seq: grid must be square");
  const i64 n = gh * gw;
  Tensor out = Tensor::zeros({batch, n, d}, false, grid.dtype());
  dispatch(grid.dtype(), [&]<class T>() {
    const T* pg = grid.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 b = 0; b < batch; ++b) {
      for (i64 c = 0; c < d; ++c) {
        const T* plane = pg + (b * d + c) * n;
        for (i64 t = 0; t < n; ++t) po[(b * n + t) * d + c] = plane[t];
      }
    }
  });
  return finish_op("grid_to_seq", out, {grid}, [grid, batch, d, n](TensorNode& self) {
    if (!grid.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* go = self.grad->ptr<T>();
      T* gg = grid.node()->ensure_grad().ptr<T>();
      for (i64 b = 0; b < batch; ++b) {
        for (i64 c = 0; c < d; ++c) {
          T* plane = gg + (b * d + c) * n;
          for (i64 t = 0; t < n; ++t) plane[t] += go[(b * n + t) * d + c];
        }
      }
    });
  });
}

Tensor heads_split(const Tensor& x, int heads) {
  if (x.rank() != 3) throw DimensionError("heads_split: expected [B, N, h*dh]");
  const i64 batch = x.dim(0), n = x.dim(1), w = x.dim(2);
  if (heads <= 0 || w % heads != 0) {
    throw DimensionError("heads_split: width not divisible by head count");
  }
  const i64 dh = w / heads;
  Tensor out = Tensor::zeros({batch * heads, n, dh}, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 b = 0; b < batch; ++b) {
      for (i64 h = 0; h < heads; ++h) {
        for (i64 t = 0; t < n; ++t) {
          const T* src = px + (b * n + t) * w + h * dh;
          T* dst = po + ((b * heads + h) * n + t) * dh;
          std::copy(src, src + dh, dst);
        }
      }
    }
  });
  return finish_op("heads_split", out, {x}, [x, batch, n, w, heads, dh](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 b = 0; b < batch; ++b) {
        for (i64 h = 0; h < heads; ++h) {
          for (i64 t = 0; t < n; ++t) {
            const T* src = g + ((b * heads + h) * n + t) * dh;
            T* dst = gx + (b * n + t) * w + h * dh;
            for (i64 c = 0; c < dh; ++c) dst[c] += src[c];
          }
        }
      }
    });
  });
}

Tensor heads_merge(const Tensor& x, int heads) {
  if (x.rank() != 3) throw DimensionError("heads_merge: expected [B*h, N, dh]");
  const i64 groups = x.dim(0), n = x.dim(1), dh = x.dim(2);
  if (heads <= 0 || groups % heads != 0) {
    throw DimensionError("heads_merge: group count not divisible by head count");
  }
  const i64 batch = groups / heads;
  const i64 w = dh * heads;
  Tensor out = Tensor::zeros({batch, n, w}, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 b = 0; b < batch; ++b) {
      for (i64 h = 0; h < heads; ++h) {
        for (i64 t = 0; t < n; ++t) {
          const T* src = px + ((b * heads + h) * n + t) * dh;
          T* dst = po + (b * n + t) * w + h * dh;
          std::copy(src, src + dh, dst);
        }
      }
    }
  });
  return finish_op("heads_merge", out, {x}, [x, batch, n, w, heads, dh](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 b = 0; b < batch; ++b) {
        for (i64 h = 0; h < heads; ++h) {
          for (i64 t = 0; t < n; ++t) {
            const T* src = g + (b * n + t) * w + h * dh;
            T* dst = gx + ((b * heads + h) * n + t) * dh;
            for (i64 c = 0; c < dh; ++c) dst[c] += src[c];
          }
        }
      }
    });
  });
}

Tensor sum_all(const Tensor& x) {
  Tensor out = Tensor::zeros({1}, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T s = 0;
    for (i64 i = 0; i < x.numel(); ++i) s += px[i];
    out.buf().ptr<T>()[0] = s;
  });
  return finish_op("sum_all", out, {x}, [x](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T g = self.grad->ptr<T>()[0];
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_dtype(a, b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: expected rank-2 operands");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n}, false, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    gemm_nn(a.buf().ptr<T>(), b.buf().ptr<T>(), out.buf().ptr<T>(), m, k, n, false);
  });
  return finish_op("matmul", out, {a, b}, [a, b, m, k, n](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      if (a.requires_grad()) {
        gemm_nt(g, b.buf().ptr<T>(), a.node()->ensure_grad().ptr<T>(), m, n, k, true);
      }
      if (b.requires_grad()) {
        gemm_tn(a.buf().ptr<T>(), g, b.node()->ensure_grad().ptr<T>(), k, m, n, true);
      }
    });
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  check_dtype(a, b, "bmm");
  if (a.rank() != 3 || b.rank() != 3) throw DimensionError("bmm: expected rank-3 operands");
  if (a.dim(0) != b.dim(0)) throw DimensionError("bmm: group counts differ");
  const i64 groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const i64 n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) {
    throw DimensionError("bmm: inner extents differ");
  }
  Tensor out = Tensor::zeros({groups, m, n}, false, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.buf().ptr<T>();
    const T* pb = b.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 gix = 0; gix < groups; ++gix) {
      if (transpose_b) {
        gemm_nt(pa + gix * m * k, pb + gix * n * k, po + gix * m * n, m, k, n, false);
      } else {
        gemm_nn(pa + gix * m * k, pb + gix * k * n, po + gix * m * n, m, k, n, false);
      }
    }
  });
  return finish_op("bmm", out, {a, b}, [a, b, groups, m, k, n, transpose_b](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const T* pa = a.buf().ptr<T>();
      const T* pb = b.buf().ptr<T>();
      for (i64 gix = 0; gix < groups; ++gix) {
        const T* gg = g + gix * m * n;
        if (a.requires_grad()) {
          T* ga = a.node()->ensure_grad().ptr<T>() + gix * m * k;
          if (transpose_b) {
            // dA = dC.B with B[n, k]
            gemm_nn(gg, pb + gix * n * k, ga, m, n, k, true);
          } else {
            gemm_nt(gg, pb + gix * k * n, ga, m, n, k, true);
          }
        }
        if (b.requires_grad()) {
          T* gb = b.node()->ensure_grad().ptr<T>();
          if (transpose_b) {
            // dB[j, l] = sum_i dC[i, j] A[i, l]
            gemm_tn(gg, pa + gix * m * k, gb + gix * n * k, n, m, k, true);
          } else {
            gemm_tn(pa + gix * m * k, gg, gb + gix * k * n, k, m, n, true);
          }
        }
      }
    });
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_dtype(x, w, "linear");
  if (w.rank() != 2) throw DimensionError("linear: weight must be rank-2");
  const i64 din = x.shape().back();
  if (w.dim(0) != din) {
    throw DimensionError("linear: input dim " + std::to_string(din) +
                         " does not match weight rows " + std::to_string(w.dim(0)));
  }
  const i64 dout = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw DimensionError("linear: bias shape mismatch");
  }
  const i64 rows = leading_rows(x.shape());
  std::vector<i64> shape = x.shape();
  shape.back() = dout;
  Tensor out = Tensor::zeros(shape, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    gemm_nn(x.buf().ptr<T>(), w.buf().ptr<T>(), out.buf().ptr<T>(), rows, din, dout, false);
    if (bias.defined()) {
      const T* pb = bias.buf().ptr<T>();
      T* po = out.buf().ptr<T>();
      for (i64 r = 0; r < rows; ++r) {
        for (i64 j = 0; j < dout; ++j) po[r * dout + j] += pb[j];
      }
    }
  });
  return finish_op("linear", out, {x, w, bias}, [x, w, bias, rows, din, dout](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      if (x.requires_grad()) {
        gemm_nt(g, w.buf().ptr<T>(), x.node()->ensure_grad().ptr<T>(), rows, dout, din, true);
      }
      if (w.requires_grad()) {
        gemm_tn(x.buf().ptr<T>(), g, w.node()->ensure_grad().ptr<T>(), din, rows, dout, true);
      }
      if (bias.defined() && bias.requires_grad()) {
        T* gb = bias.node()->ensure_grad().ptr<T>();
        for (i64 r = 0; r < rows; ++r) {
          for (i64 j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
        }
      }
    });
  });
}

Tensor softmax_rows(const Tensor& x) {
  const i64 rows = leading_rows(x.shape());
  const i64 c = x.shape().back();
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 r = 0; r < rows; ++r) {
      const T* xr = px + r * c;
      T* orow = po + r * c;
      T mx = xr[0];
      for (i64 j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
      T denom = 0;
      for (i64 j = 0; j < c; ++j) {
        orow[j] = static_cast<T>(std::exp(static_cast<double>(xr[j] - mx)));
        denom += orow[j];
      }
      for (i64 j = 0; j < c; ++j) orow[j] /= denom;
    }
  });
  return finish_op("softmax_rows", out, {x}, [x, rows, c](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const T* y = self.data.ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 r = 0; r < rows; ++r) {
        const T* yr = y + r * c;
        const T* gr = g + r * c;
        T dot = 0;
        for (i64 j = 0; j < c; ++j) dot += gr[j] * yr[j];
        T* gxr = gx + r * c;
        for (i64 j = 0; j < c; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  });
}

namespace {

// Shared layer-norm core. Statistics are sums over the full trailing width
// divided by `active` (zeros beyond the active prefix contribute nothing),
// so the plain op (active == C) and the masked op are the same computation.
template <class T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, i64 rows, i64 c,
                        const i64* active_per_row, double eps) {
  for (i64 r = 0; r < rows; ++r) {
    const i64 a = active_per_row[r];
    const T* xr = x + r * c;
    T* yr = y + r * c;
    double s1 = 0, s2 = 0;
    for (i64 j = 0; j < c; ++j) {
      const double v = static_cast<double>(xr[j]);
      s1 += v;
      s2 += v * v;
    }
    const double mu = s1 / static_cast<double>(a);
    const double var = std::max(0.0, s2 / static_cast<double>(a) - mu * mu);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (i64 j = 0; j < a; ++j) {
      const double xh = (static_cast<double>(xr[j]) - mu) * inv;
      yr[j] = static_cast<T>(xh * static_cast<double>(gamma[j]) + static_cast<double>(beta[j]));
    }
    for (i64 j = a; j < c; ++j) yr[j] = 0;
  }
}

template <class T>
void layer_norm_backward(const T* x, const T* gamma, const T* g, T* gx, T* ggamma, T* gbeta,
                         i64 rows, i64 c, const i64* active_per_row, double eps) {
  for (i64 r = 0; r < rows; ++r) {
    const i64 a = active_per_row[r];
    const T* xr = x + r * c;
    const T* gr = g + r * c;
    double s1 = 0, s2 = 0;
    for (i64 j = 0; j < c; ++j) {
      const double v = static_cast<double>(xr[j]);
      s1 += v;
      s2 += v * v;
    }
    const double mu = s1 / static_cast<double>(a);
    const double var = std::max(0.0, s2 / static_cast<double>(a) - mu * mu);
    const double inv = 1.0 / std::sqrt(var + eps);
    double mean_dxh = 0, mean_dxh_xh = 0;
    for (i64 j = 0; j < a; ++j) {
      const double xh = (static_cast<double>(xr[j]) - mu) * inv;
      const double dxh = static_cast<double>(gr[j]) * static_cast<double>(gamma[j]);
      mean_dxh += dxh;
      mean_dxh_xh += dxh * xh;
      if (ggamma) ggamma[j] += static_cast<T>(static_cast<double>(gr[j]) * xh);
      if (gbeta) gbeta[j] += gr[j];
    }
    mean_dxh /= static_cast<double>(a);
    mean_dxh_xh /= static_cast<double>(a);
    if (gx) {
      for (i64 j = 0; j < a; ++j) {
        const double xh = (static_cast<double>(xr[j]) - mu) * inv;
        const double dxh = static_cast<double>(gr[j]) * static_cast<double>(gamma[j]);
        gx[r * c + j] += static_cast<T>(inv * (dxh - mean_dxh - xh * mean_dxh_xh));
      }
    }
  }
}

Tensor layer_norm_impl(const char* name, const Tensor& x, std::vector<i64> active_rows,
                       const Tensor& gamma, const Tensor& beta, double eps) {
  const i64 c = x.shape().back();
  const i64 rows = leading_rows(x.shape());
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
    throw DimensionError("layer_norm: gamma/beta must match the trailing dim");
  }
  auto active = std::make_shared<std::vector<i64>>(std::move(active_rows));
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    layer_norm_forward(x.buf().ptr<T>(), gamma.buf().ptr<T>(), beta.buf().ptr<T>(),
                       out.buf().ptr<T>(), rows, c, active->data(), eps);
  });
  return finish_op(name, out, {x, gamma, beta},
                   [x, gamma, beta, active, rows, c, eps](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.requires_grad() ? x.node()->ensure_grad().ptr<T>() : nullptr;
      T* gg = gamma.requires_grad() ? gamma.node()->ensure_grad().ptr<T>() : nullptr;
      T* gb = beta.requires_grad() ? beta.node()->ensure_grad().ptr<T>() : nullptr;
      layer_norm_backward(x.buf().ptr<T>(), gamma.buf().ptr<T>(), g, gx, gg, gb, rows, c,
                          active->data(), eps);
    });
  });
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const i64 c = x.shape().back();
  if (c < 1) throw DimensionError("layer_norm: empty trailing dim");
  std::vector<i64> active(static_cast<std::size_t>(leading_rows(x.shape())), c);
  return layer_norm_impl("layer_norm", x, std::move(active), gamma, beta, eps);
}

Tensor masked_layer_norm(const Tensor& x, i64 active, const Tensor& gamma, const Tensor& beta,
                         double eps) {
  const i64 c = x.shape().back();
  if (active < 1 || active > c) {
    throw ContractError("masked_layer_norm: active width out of range");
  }
  std::vector<i64> widths(static_cast<std::size_t>(leading_rows(x.shape())), active);
  return layer_norm_impl("masked_layer_norm", x, std::move(widths), gamma, beta, eps);
}

Tensor masked_layer_norm(const Tensor& x, const std::vector<i64>& active_per_example,
                         const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 2) throw DimensionError("masked_layer_norm: expected a batch dim");
  const i64 batch = x.dim(0);
  const i64 c = x.shape().back();
  if (static_cast<i64>(active_per_example.size()) != batch) {
    throw ContractError("masked_layer_norm: one active width per example required");
  }
  const i64 rows = leading_rows(x.shape());
  const i64 rows_per_example = rows / batch;
  std::vector<i64> widths(static_cast<std::size_t>(rows));
  for (i64 b = 0; b < batch; ++b) {
    const i64 a = active_per_example[static_cast<std::size_t>(b)];
    if (a < 1 || a > c) throw ContractError("masked_layer_norm: active width out of range");
    for (i64 r = 0; r < rows_per_example; ++r) {
      widths[static_cast<std::size_t>(b * rows_per_example + r)] = a;
    }
  }
  return layer_norm_impl("masked_layer_norm", x, std::move(widths), gamma, beta, eps);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
  check_dtype(x, w, "conv2d");
  if (x.rank() != 4 || w.rank() != 4) throw DimensionError("conv2d: expected [B,C,H,W] input");
  if (stride < 1 || padding < 0) throw ContractError("conv2d: bad stride/padding");
  const i64 batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const i64 cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) throw DimensionError("conv2d: input channels do not match kernel");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias shape mismatch");
  }
  const i64 oh = (h + 2 * padding - kh) / stride + 1;
  const i64 ow = (wd + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || wd + 2 * padding < kw || oh < 1 || ow < 1) {
    throw DimensionError("conv2d: nonpositive output extent");
  }
  Tensor out = Tensor::zeros({batch, cout, oh, ow}, false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    const T* pw = w.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 b = 0; b < batch; ++b) {
      for (i64 co = 0; co < cout; ++co) {
        const T bv = bias.defined() ? bias.buf().ptr<T>()[co] : T(0);
        for (i64 y = 0; y < oh; ++y) {
          for (i64 xo = 0; xo < ow; ++xo) {
            T s = bv;
            for (i64 ci = 0; ci < cin; ++ci) {
              const T* xplane = px + (b * cin + ci) * h * wd;
              const T* wplane = pw + (co * cin + ci) * kh * kw;
              for (i64 dy = 0; dy < kh; ++dy) {
                const i64 iy = y * stride - padding + dy;
                if (iy < 0 || iy >= h) continue;
                for (i64 dx = 0; dx < kw; ++dx) {
                  const i64 ix = xo * stride - padding + dx;
                  if (ix < 0 || ix >= wd) continue;
                  s += xplane[iy * wd + ix] * wplane[dy * kw + dx];
                }
              }
            }
            po[((b * cout + co) * oh + y) * ow + xo] = s;
          }
        }
      }
    }
  });
  return finish_op("conv2d", out, {x, w, bias},
                   [x, w, bias, batch, cin, h, wd, cout, kh, kw, oh, ow, stride,
                    padding](TensorNode& self) {
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      const T* px = x.buf().ptr<T>();
      const T* pw = w.buf().ptr<T>();
      T* gx = x.requires_grad() ? x.node()->ensure_grad().ptr<T>() : nullptr;
      T* gw = w.requires_grad() ? w.node()->ensure_grad().ptr<T>() : nullptr;
      T* gb = (bias.defined() && bias.requires_grad()) ? bias.node()->ensure_grad().ptr<T>()
                                                       : nullptr;
      for (i64 b = 0; b < batch; ++b) {
        for (i64 co = 0; co < cout; ++co) {
          for (i64 y = 0; y < oh; ++y) {
            for (i64 xo = 0; xo < ow; ++xo) {
              const T go = g[((b * cout + co) * oh + y) * ow + xo];
              if (go == T(0)) continue;
              if (gb) gb[co] += go;
              for (i64 ci = 0; ci < cin; ++ci) {
                const T* xplane = px + (b * cin + ci) * h * wd;
                const T* wplane = pw + (co * cin + ci) * kh * kw;
                T* gxplane = gx ? gx + (b * cin + ci) * h * wd : nullptr;
                T* gwplane = gw ? gw + (co * cin + ci) * kh * kw : nullptr;
                for (i64 dy = 0; dy < kh; ++dy) {
                  const i64 iy = y * stride - padding + dy;
                  if (iy < 0 || iy >= h) continue;
                  for (i64 dx = 0; dx < kw; ++dx) {
                    const i64 ix = xo * stride - padding + dx;
                    if (ix < 0 || ix >= wd) continue;
                    if (gxplane) gxplane[iy * wd + ix] += go * wplane[dy * kw + dx];
                    if (gwplane) gwplane[dy * kw + dx] += go * xplane[iy * wd + ix];
                  }
                }
              }
            }
          }
        }
      }
    });
  });
}

Tensor avg_pool2d(const Tensor& x, int k, int stride) {
  if (x.rank() != 4) throw DimensionError("avg_pool2d: expected [B,C,H,W] input");
  if (k < 1 || stride < 1) throw ContractError("avg_pool2d: bad window");
  const i64 batch = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (h % k != 0 || wd % k != 0 || stride != k) {
    throw DimensionError("avg_pool2d: extents must be divisible by the window");
  }
  const i64 oh = h / k, ow = wd / k;
  Tensor out = Tensor::zeros({batch, c, oh, ow}, false, x.dtype());
  const double inv = 1.0 / static_cast<double>(k * k);
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 bc = 0; bc < batch * c; ++bc) {
      const T* plane = px + bc * h * wd;
      T* oplane = po + bc * oh * ow;
      for (i64 y = 0; y < oh; ++y) {
        for (i64 xo = 0; xo < ow; ++xo) {
          T s = 0;
          for (i64 dy = 0; dy < k; ++dy) {
            for (i64 dx = 0; dx < k; ++dx) {
              s += plane[(y * k + dy) * wd + (xo * k + dx)];
            }
          }
          oplane[y * ow + xo] = static_cast<T>(s * static_cast<T>(inv));
        }
      }
    }
  });
  return finish_op("avg_pool2d", out, {x}, [x, batch, c, h, wd, oh, ow, k, inv](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 bc = 0; bc < batch * c; ++bc) {
        const T* gplane = g + bc * oh * ow;
        T* gxplane = gx + bc * h * wd;
        for (i64 y = 0; y < oh; ++y) {
          for (i64 xo = 0; xo < ow; ++xo) {
            const T share = static_cast<T>(gplane[y * ow + xo] * static_cast<T>(inv));
            for (i64 dy = 0; dy < k; ++dy) {
              for (i64 dx = 0; dx < k; ++dx) {
                gxplane[(y * k + dy) * wd + (xo * k + dx)] += share;
              }
            }
          }
        }
      }
    });
  });
}

Tensor mask_channels(const Tensor& x, const std::vector<i64>& widths) {
  if (x.rank() < 2) throw DimensionError("mask_channels: expected a batch dim");
  const i64 batch = x.dim(0);
  const i64 c = x.shape().back();
  if (static_cast<i64>(widths.size()) != batch) {
    throw ContractError("mask_channels: one width per example required");
  }
  for (i64 w : widths) {
    if (w < 0 || w > c) throw ContractError("mask_channels: width out of range");
  }
  const i64 rows = leading_rows(x.shape());
  const i64 rows_per_example = rows / batch;
  auto keep = std::make_shared<std::vector<i64>>(widths);
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 b = 0; b < batch; ++b) {
      const i64 w = (*keep)[static_cast<std::size_t>(b)];
      for (i64 r = 0; r < rows_per_example; ++r) {
        const i64 base = (b * rows_per_example + r) * c;
        std::copy(px + base, px + base + w, po + base);
        // slots >= w stay zero
      }
    }
  });
  return finish_op("mask_channels", out, {x},
                   [x, keep, batch, rows_per_example, c](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 b = 0; b < batch; ++b) {
        const i64 w = (*keep)[static_cast<std::size_t>(b)];
        for (i64 r = 0; r < rows_per_example; ++r) {
          const i64 base = (b * rows_per_example + r) * c;
          for (i64 j = 0; j < w; ++j) gx[base + j] += g[base + j];
        }
      }
    });
  });
}

Tensor scale_examples(const Tensor& x, const std::vector<double>& coeff) {
  if (x.rank() < 1) throw DimensionError("scale_examples: empty tensor");
  const i64 batch = x.dim(0);
  if (static_cast<i64>(coeff.size()) != batch) {
    throw ContractError("scale_examples: one coefficient per example required");
  }
  const i64 inner = x.numel() / batch;
  auto cs = std::make_shared<std::vector<double>>(coeff);
  Tensor out = Tensor::zeros(x.shape(), false, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.buf().ptr<T>();
    T* po = out.buf().ptr<T>();
    for (i64 b = 0; b < batch; ++b) {
      const T cv = static_cast<T>((*cs)[static_cast<std::size_t>(b)]);
      for (i64 j = 0; j < inner; ++j) po[b * inner + j] = px[b * inner + j] * cv;
    }
  });
  return finish_op("scale_examples", out, {x}, [x, cs, batch, inner](TensorNode& self) {
    if (!x.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const T* g = self.grad->ptr<T>();
      T* gx = x.node()->ensure_grad().ptr<T>();
      for (i64 b = 0; b < batch; ++b) {
        const T cv = static_cast<T>((*cs)[static_cast<std::size_t>(b)]);
        for (i64 j = 0; j < inner; ++j) gx[b * inner + j] += g[b * inner + j] * cv;
      }
    });
  });
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets) {
  check_dtype(logits, targets, "soft_cross_entropy");
  if (logits.shape() != targets.shape()) {
    throw DimensionError("soft_cross_entropy: logits/targets shape mismatch");
  }
  if (logits.rank() != 2) throw DimensionError("soft_cross_entropy: expected [rows, classes]");
  const i64 rows = logits.dim(0), c = logits.dim(1);
  Tensor out = Tensor::zeros({1}, false, logits.dtype());
  dispatch(logits.dtype(), [&]<class T>() {
    const T* pz = logits.buf().ptr<T>();
    const T* pt = targets.buf().ptr<T>();
    double total = 0;
    for (i64 r = 0; r < rows; ++r) {
      const T* zr = pz + r * c;
      const T* tr = pt + r * c;
      double mx = static_cast<double>(zr[0]);
      for (i64 j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(zr[j]));
      double denom = 0;
      for (i64 j = 0; j < c; ++j) denom += std::exp(static_cast<double>(zr[j]) - mx);
      const double lse = mx + std::log(denom);
      double row = 0;
      for (i64 j = 0; j < c; ++j) {
        row += static_cast<double>(tr[j]) * (lse - static_cast<double>(zr[j]));
      }
      total += row;
    }
    out.buf().set(0, total / static_cast<double>(rows));
  });
  return finish_op("soft_cross_entropy", out, {logits, targets},
                   [logits, targets, rows, c](TensorNode& self) {
    if (!logits.requires_grad()) return;
    dispatch(self.data.dtype(), [&]<class T>() {
      const double g = static_cast<double>(self.grad->ptr<T>()[0]);
      const T* pz = logits.buf().ptr<T>();
      const T* pt = targets.buf().ptr<T>();
      T* gz = logits.node()->ensure_grad().ptr<T>();
      for (i64 r = 0; r < rows; ++r) {
        const T* zr = pz + r * c;
        const T* tr = pt + r * c;
        double mx = static_cast<double>(zr[0]);
        for (i64 j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(zr[j]));
        double denom = 0;
        for (i64 j = 0; j < c; ++j) denom += std::exp(static_cast<double>(zr[j]) - mx);
        double tsum = 0;
        for (i64 j = 0; j < c; ++j) tsum += static_cast<double>(tr[j]);
        for (i64 j = 0; j < c; ++j) {
          const double p = std::exp(static_cast<double>(zr[j]) - mx) / denom;
          gz[r * c + j] += static_cast<T>(g * (tsum * p - static_cast<double>(tr[j])) /
                                          static_cast<double>(rows));
        }
      }
    });
  });
}

}  // namespace resnas
