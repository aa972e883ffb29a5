#pragma once

// Differentiable tensor ops. Every op validates shapes, computes its value, and
// registers a backward closure when any input requires a gradient and gradient
// recording is enabled. Meta inputs yield meta outputs of the right shape.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mmchat/tensor.hpp"

namespace mmchat::ops {

using Range = std::pair<std::size_t, std::size_t>;  // half-open [begin, end)

// [m,k] x [k,n] -> [m,n]
template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b);

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b);

template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b);

template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& x, double factor);

// Adds a [D] vector to every row of a [..., D] tensor.
template <typename Real>
BasicTensor<Real> add_row(const BasicTensor<Real>& x, const BasicTensor<Real>& row);

template <typename Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& x);

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape);

// Max-subtracted softmax along `axis`.
template <typename Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x, std::size_t axis);

// Normalises over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <typename Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gain,
                             const BasicTensor<Real>& bias, double eps);

// Tanh approximation:
//   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
template <typename Real>
BasicTensor<Real> gelu(const BasicTensor<Real>& x);

// Row gather from a [V, D] table.
template <typename Real>
BasicTensor<Real> embed(const BasicTensor<Real>& table, std::span<const std::int32_t> ids);

template <typename Real>
BasicTensor<Real> concat(const std::vector<BasicTensor<Real>>& parts, std::size_t axis);

// One range per axis.
template <typename Real>
BasicTensor<Real> slice(const BasicTensor<Real>& x, const std::vector<Range>& ranges);

// Rotary position embedding on a [T, D] tensor split into `heads` heads.
// Within each head, pair (2i, 2i+1) at position p = offset + t is rotated by
// angle p * base^(-2i / head_dim).
template <typename Real>
BasicTensor<Real> rope(const BasicTensor<Real>& x, std::size_t heads, std::size_t offset,
                       double base);

// Multi-head scaled dot-product attention over [Tq, D] queries and [Tk, D]
// keys/values. With `causal`, query i may attend to key j only when
// j <= i + (Tk - Tq), so a query block appended after cached keys lines up.
template <typename Real>
BasicTensor<Real> attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                            const BasicTensor<Real>& v, std::size_t heads, bool causal);

// Mean over masked positions of -log softmax(logits[t])[targets[t]].
// Unmasked positions are never read; an all-false mask raises EmptyLossError.
template <typename Real>
BasicTensor<Real> masked_cross_entropy(const BasicTensor<Real>& logits,
                                       std::span<const std::int32_t> targets,
                                       std::span<const std::uint8_t> mask);

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x);

}  // namespace mmchat::ops
