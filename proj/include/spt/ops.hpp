#pragma once

// Differentiable tensor ops. Shapes are row-major; "rows" always means the
// last dimension.

#include <cstdint>
#include <span>
#include <vector>

#include "spt/tensor.hpp"

namespace spt {

// Elementwise with suffix broadcasting: b's shape must equal a trailing
// slice of a's shape (scalars and bias vectors included).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] @ w[in, out] (+ bias[out] when defined).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});
// Batched over all leading dims: a[..., m, k] @ b[..., k, n], or b[..., n, k]ᵀ.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor transpose(const Tensor& a, int d0, int d1);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int dim, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int dim);
Tensor flip(const Tensor& a, int dim);

Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// table[V, D] gathered at ids; output shape ids_shape + [D].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape);
// Inverted dropout. The keep mask is a pure function of seed.
Tensor dropout(const Tensor& x, double p, std::uint64_t seed, bool training);

// Rows of x[..., D] with keep[r] == 0 are replaced by fill[D] (zeros when
// fill is undefined).
Tensor select_rows(const Tensor& x, std::span<const std::uint8_t> keep, const Tensor& fill = {});

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

enum class Pooling { Mean, Max, Last };
// x[B, L, D] reduced over the first lengths[b] positions of each sequence.
Tensor pool(const Tensor& x, Pooling kind, std::span<const std::size_t> lengths);

Tensor softmax_rows(const Tensor& x);
// scores[B, H, Lq, Lk]; allow[B, Lq, Lk] (shared across heads). Disallowed
// entries get weight exactly 0; a row with nothing allowed is all zeros.
Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> allow);

// Rotary position embedding on x[..., L, head_dim]; position of row i is
// offset + i. Pair (2j, 2j+1) rotates by pos · 10000^(-2j/head_dim).
Tensor rotary(const Tensor& x, std::size_t offset = 0);

}  // namespace spt
