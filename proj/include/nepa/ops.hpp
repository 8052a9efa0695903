#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "nepa/tensor.hpp"

namespace nepa {

// Differentiable primitives. Binary elementwise ops accept `b` with the same
// shape as `a`, or with a shape equal to a trailing suffix of `a`'s shape
// (broadcast over leading dims). No other broadcasting is supported.

/// [..., m, k] x [..., k, n]. `b` may also be rank 2 and shared across the
/// batch dims of `a`.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor gelu(const Tensor& x);  // tanh approximation
Tensor silu(const Tensor& x);

/// Copies into a new shape; one extent may be -1.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> order);
Tensor transpose(const Tensor& x, int dim0, int dim1);
/// Half-open [start, end) along `axis`.
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces `axis` away.
Tensor sum_dim(const Tensor& x, int axis);
Tensor mean_dim(const Tensor& x, int axis);

/// Row gather from a [N, D] table: out[i] = table[indices[i]].
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices);

/// Softmax over the last dim with max subtraction; -inf entries map to 0.
Tensor softmax_lastdim(const Tensor& x);

/// Normalises the last dim to zero mean and unit variance; `gamma`/`beta`
/// (shape [D]) may be undefined tensors.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-6);

/// x / ||x|| for rows with norm > eps, x / (||x|| + eps) otherwise.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

/// Forward identity, gradient barrier.
Tensor stop_gradient(const Tensor& x);

/// Rotates consecutive pairs of the last dim of x [..., T, d]. `angles` is a
/// row-major [T, d/2] table of rotation angles.
Tensor rotate_pairs(const Tensor& x, std::span<const double> angles);

/// Mean over rows of -sum_k target_k log softmax(logits)_k. `target` is a
/// constant [B, K] distribution.
Tensor cross_entropy(const Tensor& logits, const Tensor& target);

/// out[b, t] = mask[b*T + t] ? token : x[b, t] for x [B, T, D], token [D].
Tensor replace_rows(const Tensor& x, const Tensor& token,
                    std::span<const std::uint8_t> mask);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of the tape gradient of scalar `f` at `x`.
/// Returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-8). `x` is restored before returning.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double h = 1e-5);

}  // namespace nepa
