// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "resnas/tensor.hpp"

namespace resnas {

// ---- elementwise and structural ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor gelu(const Tensor& x);

/// Broadcast-add a bias over the trailing dimension: x[..., C] + b[C].
Tensor add_bias(const Tensor& x, const Tensor& b);

/// Broadcast-add over the batch dimension: x[B, rest...] + t[rest...].
Tensor add_broadcast_batch(const Tensor& x, const Tensor& t);

/// Replicate t[rest...] into [B, rest...]; backward sums over the batch.
Tensor broadcast_batch(const Tensor& t, i64 batch);

Tensor reshape(const Tensor& x, std::vector<i64> shape);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& x, int axis, i64 start, i64 len);

/// Append zero channels on the trailing dim up to target width.
Tensor zero_pad_channels(const Tensor& x, i64 target);

/// Keep the first c channels of the trailing dim.
Tensor slice_channels(const Tensor& x, i64 c);

/// [B, N, d] -> [B, d, g, g] with g = sqrt(N); tokens laid out row-major.
Tensor seq_to_grid(const Tensor& seq);

/// [B, d, g, g] -> [B, g*g, d]; inverse of seq_to_grid.
Tensor grid_to_seq(const Tensor& grid);

/// [B, N, h*dh] -> [B*h, N, dh]; head i of example b lands in group b*h + i.
Tensor heads_split(const Tensor& x, int heads);
Tensor heads_merge(const Tensor& x, int heads);

Tensor sum_all(const Tensor& x);

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b);

/// Grouped matmul: a[G, m, k] x b[G, k, n] -> [G, m, n]. With transpose_b,
/// b is [G, n, k] and multiplied transposed (the QK^T case).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// x[..., d_in] x w[d_in, d_out] (+ bias[d_out] when defined), applied to
/// every row of the flattened leading dims.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// ---- normalization and softmax ----

Tensor softmax_rows(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Layer norm whose statistics divide by `active` instead of the allocated
/// width; slots >= active must be zero on input and are re-zeroed on output.
Tensor masked_layer_norm(const Tensor& x, i64 active, const Tensor& gamma,
                         const Tensor& beta, double eps);

/// Per-example variant for multi-architectural batches: x[B, ..., C] with
/// active widths per example.
Tensor masked_layer_norm(const Tensor& x, const std::vector<i64>& active_per_example,
                         const Tensor& gamma, const Tensor& beta, double eps);

// ---- convolution and pooling ----

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
Tensor avg_pool2d(const Tensor& x, int k = 2, int stride = 2);

// ---- per-example masking (channel masking / ordered dropout) ----

/// Zero channels >= widths[b] on the trailing dim of example b; x[B, ..., C].
Tensor mask_channels(const Tensor& x, const std::vector<i64>& widths);

/// Multiply every element of example b by coeff[b] (drop path, block skip).
/// Coefficients are constants; no gradient flows into them.
Tensor scale_examples(const Tensor& x, const std::vector<double>& coeff);

// ---- loss ----

/// Mean over rows of -sum(target * log_softmax(logits)); logits/targets are
/// [R, C]. Targets receive no gradient.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets);

}  // namespace resnas
