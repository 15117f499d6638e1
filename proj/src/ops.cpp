#include "spt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "spt/error.hpp"

namespace spt {

namespace {

std::size_t norm_dim(const Tensor& a, int d) {
    int r = static_cast<int>(a.dim());
    int i = d < 0 ? r + d : d;
    if (i < 0 || i >= r) throw DimensionError("dimension " + std::to_string(d) + " out of range for " + shape_str(a.shape()));
    return static_cast<std::size_t>(i);
}

// Number of times b repeats inside a under suffix broadcasting.
std::size_t broadcast_repeats(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    bool ok = sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()));
    if (!ok) throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
    return a.numel() / std::max<std::size_t>(b.numel(), 1);
}

// Row-major accumulate kernels with a fixed summation order, so results do
// not depend on buffer alignment or on the contents of other rows.
using v8d = double __attribute__((vector_size(64)));

// C[m,n] += A[m,k] B[k,n]. Tiles of 4×16 outputs stay in registers; every
// element still sums over k in ascending order.
void gemm_nn(const double* __restrict A, const double* __restrict B, double* __restrict C, std::size_t m,
             std::size_t k, std::size_t n) {
    const std::size_t m4 = m - m % 4, n16 = n - n % 16;
    for (std::size_t i = 0; i < m4; i += 4) {
        for (std::size_t j = 0; j < n16; j += 16) {
            v8d acc[4][2];
            for (std::size_t r = 0; r < 4; ++r) {
                std::memcpy(&acc[r][0], C + (i + r) * n + j, sizeof(v8d));
                std::memcpy(&acc[r][1], C + (i + r) * n + j + 8, sizeof(v8d));
            }
            for (std::size_t p = 0; p < k; ++p) {
                v8d b0, b1;
                std::memcpy(&b0, B + p * n + j, sizeof(v8d));
                std::memcpy(&b1, B + p * n + j + 8, sizeof(v8d));
                for (std::size_t r = 0; r < 4; ++r) {
                    const double av = A[(i + r) * k + p];
                    acc[r][0] += av * b0;
                    acc[r][1] += av * b1;
                }
            }
            for (std::size_t r = 0; r < 4; ++r) {
                std::memcpy(C + (i + r) * n + j, &acc[r][0], sizeof(v8d));
                std::memcpy(C + (i + r) * n + j + 8, &acc[r][1], sizeof(v8d));
            }
        }
    }
    // Ragged right edge and bottom rows.
    auto plain = [&](std::size_t i0, std::size_t i1, std::size_t j0) {
        for (std::size_t i = i0; i < i1; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                for (std::size_t j = j0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
            }
    };
    if (n16 < n) plain(0, m4, n16);
    plain(m4, m, 0);
}

// C[m,n] += A[m,k] Bᵀ with B stored [n,k]
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
    gemm_nn(A, bt.data(), C, m, k, n);
}

// C[k,n] += Aᵀ B with A stored [m,k], B stored [m,n]. Rows of A are taken
// in chunks so the transposed slice and B's rows stay in cache.
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t chunk = 128;
    std::vector<double> at(k * chunk);
    for (std::size_t r0 = 0; r0 < m; r0 += chunk) {
        const std::size_t rows = std::min(chunk, m - r0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < k; ++i) at[i * rows + r] = A[(r0 + r) * k + i];
        gemm_nn(at.data(), B + r0 * n, C, k, rows, n);
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t reps = broadcast_repeats(a, b, "add");
    const std::size_t nb = b.numel();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(ad.begin(), ad.end());
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] += bd[j];
    return custom_op("add", a.shape(), std::move(out), {a, b}, [reps, nb](std::span<const double> g, GradSpans& gi) {
        if (!gi[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
        if (!gi[1].empty())
            for (std::size_t r = 0; r < reps; ++r)
                for (std::size_t j = 0; j < nb; ++j) gi[1][j] += g[r * nb + j];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const std::size_t reps = broadcast_repeats(a, b, "sub");
    const std::size_t nb = b.numel();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(ad.begin(), ad.end());
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] -= bd[j];
    return custom_op("sub", a.shape(), std::move(out), {a, b}, [reps, nb](std::span<const double> g, GradSpans& gi) {
        if (!gi[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
        if (!gi[1].empty())
            for (std::size_t r = 0; r < reps; ++r)
                for (std::size_t j = 0; j < nb; ++j) gi[1][j] -= g[r * nb + j];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t reps = broadcast_repeats(a, b, "mul");
    const std::size_t nb = b.numel();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] = ad[r * nb + j] * bd[j];
    return custom_op("mul", a.shape(), std::move(out), {a, b}, [a, b, reps, nb](std::span<const double> g, GradSpans& gi) {
        auto ad = a.data();
        auto bd = b.data();
        for (std::size_t r = 0; r < reps; ++r)
            for (std::size_t j = 0; j < nb; ++j) {
                const std::size_t i = r * nb + j;
                if (!gi[0].empty()) gi[0][i] += g[i] * bd[j];
                if (!gi[1].empty()) gi[1][j] += g[i] * ad[i];
            }
    });
}

Tensor scale(const Tensor& a, double s) {
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * s;
    return custom_op("scale", a.shape(), std::move(out), {a}, [s](std::span<const double> g, GradSpans& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * s;
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + s;
    return custom_op("add_scalar", a.shape(), std::move(out), {a}, [](std::span<const double> g, GradSpans& gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
    std::vector<double> out(m * n);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return custom_op("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g, GradSpans& gi) {
        if (!gi[0].empty()) gemm_nt(g.data(), b.data().data(), gi[0].data(), m, n, k);
        if (!gi[1].empty()) gemm_tn(a.data().data(), g.data(), gi[1].data(), m, k, n);
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.dim() < 1 || w.dim() != 2 || x.size(-1) != w.size(0))
        throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " @ " + shape_str(w.shape()));
    const std::size_t in = w.size(0), outd = w.size(1), rows = x.numel() / w.size(0);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.dim() != 1 || bias.size(0) != w.size(1)))
        throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
    Shape shape = x.shape();
    shape.back() = outd;
    std::vector<double> out(rows * outd);
    if (has_bias) {
        auto bd = bias.data();
        for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + static_cast<long>(r * outd));
    }
    gemm_nn(x.data().data(), w.data().data(), out.data(), rows, in, outd);
    std::vector<Tensor> inputs{x, w};
    if (has_bias) inputs.push_back(bias);
    return custom_op("linear", std::move(shape), std::move(out), inputs,
                     [x, w, rows, in, outd, has_bias](std::span<const double> g, GradSpans& gi) {
                         if (!gi[0].empty()) gemm_nt(g.data(), w.data().data(), gi[0].data(), rows, outd, in);
                         if (!gi[1].empty()) gemm_tn(x.data().data(), g.data(), gi[1].data(), rows, in, outd);
                         if (has_bias && !gi[2].empty()) {
                             double* gb = gi[2].data();
                             for (std::size_t r = 0; r < rows; ++r) {
                                 const double* gr = g.data() + r * outd;
                                 for (std::size_t j = 0; j < outd; ++j) gb[j] += gr[j];
                             }
                         }
                     });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.dim() < 2 || a.dim() != b.dim())
        throw DimensionError("bmm: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (std::size_t i = 0; i + 2 < a.dim(); ++i)
        if (a.shape()[i] != b.shape()[i])
            throw DimensionError("bmm: batch dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.size(-2), k = a.size(-1);
    const std::size_t kb = transpose_b ? b.size(-1) : b.size(-2);
    const std::size_t n = transpose_b ? b.size(-2) : b.size(-1);
    if (k != kb) throw DimensionError("bmm: inner dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t batch = a.numel() / (m * k);
    Shape shape = a.shape();
    shape.back() = n;
    std::vector<double> out(batch * m * n);
    const std::size_t sa = m * k, sb = k * n, sc = m * n;
    for (std::size_t t = 0; t < batch; ++t) {
        const double* A = a.data().data() + t * sa;
        const double* B = b.data().data() + t * sb;
        if (transpose_b)
            gemm_nt(A, B, out.data() + t * sc, m, k, n);
        else
            gemm_nn(A, B, out.data() + t * sc, m, k, n);
    }
    return custom_op("bmm", std::move(shape), std::move(out), {a, b},
                     [a, b, transpose_b, batch, m, k, n, sa, sb, sc](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t t = 0; t < batch; ++t) {
                             const double* G = g.data() + t * sc;
                             const double* A = a.data().data() + t * sa;
                             const double* B = b.data().data() + t * sb;
                             if (transpose_b) {
                                 // C = A Bᵀ with B [n, k]
                                 if (!gi[0].empty()) gemm_nn(G, B, gi[0].data() + t * sa, m, n, k);
                                 if (!gi[1].empty()) gemm_tn(G, A, gi[1].data() + t * sb, m, n, k);
                             } else {
                                 if (!gi[0].empty()) gemm_nt(G, B, gi[0].data() + t * sa, m, n, k);
                                 if (!gi[1].empty()) gemm_tn(A, G, gi[1].data() + t * sb, m, k, n);
                             }
                         }
                     });
}

Tensor transpose(const Tensor& a, int d0, int d1) {
    const std::size_t i0 = norm_dim(a, d0), i1 = norm_dim(a, d1);
    const Shape& in_shape = a.shape();
    const std::size_t rank = in_shape.size();
    Shape out_shape = in_shape;
    std::swap(out_shape[i0], out_shape[i1]);
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    // map[out_flat] = in_flat
    const std::size_t n = a.numel();
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < rank; ++d) {
            std::size_t src_d = d == i0 ? i1 : (d == i1 ? i0 : d);
            off += idx[d] * in_strides[src_d];
        }
        map[o] = off;
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    auto ad = a.data();
    std::vector<double> out(n);
    for (std::size_t o = 0; o < n; ++o) out[o] = ad[map[o]];
    return custom_op("transpose", std::move(out_shape), std::move(out), {a},
                     [map = std::move(map)](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t o = 0; o < g.size(); ++o) gi[0][map[o]] += g[o];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto ad = a.data();
    return custom_op("reshape", std::move(shape), std::vector<double>(ad.begin(), ad.end()), {a},
                     [](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor slice(const Tensor& a, int dim, std::size_t begin, std::size_t end) {
    const std::size_t d = norm_dim(a, dim);
    const Shape& s = a.shape();
    if (begin > end || end > s[d])
        throw DimensionError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                             shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < d; ++i) outer *= s[i];
    for (std::size_t i = d + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = end - begin;
    Shape out_shape = s;
    out_shape[d] = len;
    auto ad = a.data();
    std::vector<double> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(ad.begin() + static_cast<long>((o * s[d] + begin) * inner), len * inner,
                    out.begin() + static_cast<long>(o * len * inner));
    const std::size_t full = s[d];
    return custom_op("slice", std::move(out_shape), std::move(out), {a},
                     [outer, inner, len, full, begin](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < len * inner; ++i)
                                 gi[0][(o * full + begin) * inner + i] += g[o * len * inner + i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const std::size_t d = norm_dim(parts[0], dim);
    Shape out_shape = parts[0].shape();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != d && s[i] != out_shape[i]) throw DimensionError("concat: shape mismatch " + shape_str(s));
        widths.push_back(s[d]);
        total += s[d];
    }
    out_shape[d] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < d; ++i) outer *= out_shape[i];
    for (std::size_t i = d + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
    std::vector<double> out(outer * total * inner);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto pd = parts[p].data();
        const std::size_t w = widths[p];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pd.begin() + static_cast<long>(o * w * inner), w * inner,
                        out.begin() + static_cast<long>((o * total + offset) * inner));
        offset += w;
    }
    return custom_op("concat", std::move(out_shape), std::move(out), parts,
                     [widths, outer, inner, total](std::span<const double> g, GradSpans& gi) {
                         std::size_t offset = 0;
                         for (std::size_t p = 0; p < widths.size(); ++p) {
                             const std::size_t w = widths[p];
                             if (!gi[p].empty())
                                 for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < w * inner; ++i)
                                         gi[p][o * w * inner + i] += g[(o * total + offset) * inner + i];
                             offset += w;
                         }
                     });
}

Tensor flip(const Tensor& a, int dim) {
    const std::size_t d = norm_dim(a, dim);
    const Shape& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < d; ++i) outer *= s[i];
    for (std::size_t i = d + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[d];
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
            std::copy_n(ad.begin() + static_cast<long>((o * len + l) * inner), inner,
                        out.begin() + static_cast<long>((o * len + (len - 1 - l)) * inner));
    return custom_op("flip", s, std::move(out), {a}, [outer, inner, len](std::span<const double> g, GradSpans& gi) {
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < len; ++l)
                for (std::size_t i = 0; i < inner; ++i)
                    gi[0][(o * len + l) * inner + i] += g[(o * len + (len - 1 - l)) * inner + i];
    });
}

Tensor gelu(const Tensor& a) {
    auto ad = a.data();
    std::vector<double> out(ad.size());
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = 0.5 * ad[i] * (1.0 + std::erf(ad[i] * inv_sqrt2));
    return custom_op("gelu", a.shape(), std::move(out), {a}, [a](std::span<const double> g, GradSpans& gi) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        auto ad = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = ad[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            gi[0][i] += g[i] * (cdf + x * pdf);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.size(-1);
    if (gamma.numel() != d || beta.numel() != d) throw DimensionError("layer_norm: affine size mismatch");
    const std::size_t rows = x.numel() / d;
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    std::vector<double> out(xd.size());
    std::vector<double> xhat(xd.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gd[j] + bd[j];
        }
    }
    return custom_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](std::span<const double> g,
                                                                                            GradSpans& gi) {
                         auto gd = gamma.data();
                         std::vector<double> gh(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                             const double* h = xhat.data() + r * d;
                             const double* gr = g.data() + r * d;
                             if (!gi[1].empty())
                                 for (std::size_t j = 0; j < d; ++j) gi[1][j] += gr[j] * h[j];
                             if (!gi[2].empty())
                                 for (std::size_t j = 0; j < d; ++j) gi[2][j] += gr[j];
                             if (gi[0].empty()) continue;
                             double m1 = 0.0, m2 = 0.0;
                             for (std::size_t j = 0; j < d; ++j) {
                                 gh[j] = gr[j] * gd[j];
                                 m1 += gh[j];
                                 m2 += gh[j] * h[j];
                             }
                             m1 /= static_cast<double>(d);
                             m2 /= static_cast<double>(d);
                             for (std::size_t j = 0; j < d; ++j)
                                 gi[0][r * d + j] += inv_std[r] * (gh[j] - m1 - h[j] * m2);
                         }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
    if (table.dim() != 2) throw DimensionError("embedding: table must be 2-D");
    if (numel_of(ids_shape) != ids.size()) throw DimensionError("embedding: ids shape mismatch");
    const std::size_t vocab = table.size(0), d = table.size(1);
    auto td = table.data();
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw VocabularyError("unknown token id " + std::to_string(ids[i]) + " (vocabulary size " +
                                  std::to_string(vocab) + ")");
        std::copy_n(td.begin() + static_cast<long>(static_cast<std::size_t>(ids[i]) * d), d,
                    out.begin() + static_cast<long>(i * d));
    }
    Shape shape = ids_shape;
    shape.push_back(d);
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return custom_op("embedding", std::move(shape), std::move(out), {table},
                     [idv = std::move(idv), d](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t i = 0; i < idv.size(); ++i)
                             for (std::size_t j = 0; j < d; ++j)
                                 gi[0][static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
                     });
}

Tensor dropout(const Tensor& x, double p, std::uint64_t seed, bool training) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
    if (!training || p == 0.0) return x;
    Rng rng(seed);
    std::bernoulli_distribution keep(1.0 - p);
    const double s = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = keep(rng) ? s : 0.0;
    auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * mask[i];
    return custom_op("dropout", x.shape(), std::move(out), {x},
                     [mask = std::move(mask)](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * mask[i];
                     });
}

Tensor sum(const Tensor& a) {
    auto ad = a.data();
    double s = std::accumulate(ad.begin(), ad.end(), 0.0);
    return custom_op("sum", {}, {s}, {a}, [](std::span<const double> g, GradSpans& gi) {
        for (auto& v : gi[0]) v += g[0];
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw NumericError("mean of an empty tensor");
    const double n = static_cast<double>(a.numel());
    auto ad = a.data();
    double s = std::accumulate(ad.begin(), ad.end(), 0.0) / n;
    return custom_op("mean", {}, {s}, {a}, [n](std::span<const double> g, GradSpans& gi) {
        for (auto& v : gi[0]) v += g[0] / n;
    });
}

Tensor select_rows(const Tensor& x, std::span<const std::uint8_t> keep, const Tensor& fill) {
    const std::size_t d = x.size(-1);
    const std::size_t rows = x.numel() / d;
    if (keep.size() != rows) throw DimensionError("select_rows: one flag per row required");
    if (fill.defined() && fill.numel() != d) throw DimensionError("select_rows: fill width mismatch");
    auto xd = x.data();
    std::vector<double> out(xd.begin(), xd.end());
    for (std::size_t r = 0; r < rows; ++r)
        if (!keep[r])
            for (std::size_t j = 0; j < d; ++j) out[r * d + j] = fill.defined() ? fill.data()[j] : 0.0;
    std::vector<std::uint8_t> flags(keep.begin(), keep.end());
    std::vector<Tensor> inputs{x};
    if (fill.defined()) inputs.push_back(fill);
    return custom_op("select_rows", x.shape(), std::move(out), inputs,
                     [flags = std::move(flags), rows, d](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t r = 0; r < rows; ++r) {
                             const std::size_t k = flags[r] ? 0 : 1;
                             if (k >= gi.size() || gi[k].empty()) continue;
                             for (std::size_t j = 0; j < d; ++j) gi[k][(k == 0 ? r * d : 0) + j] += g[r * d + j];
                         }
                     });
}

Tensor pool(const Tensor& x, Pooling kind, std::span<const std::size_t> lengths) {
    if (x.dim() != 3) throw DimensionError("pool: expected [B, L, D], got " + shape_str(x.shape()));
    const std::size_t B = x.size(0), L = x.size(1), D = x.size(2);
    if (lengths.size() != B) throw DimensionError("pool: one length per batch element required");
    for (auto len : lengths)
        if (len == 0 || len > L) throw DimensionError("pool: sequence length out of range");
    auto xd = x.data();
    std::vector<double> out(B * D, 0.0);
    std::vector<std::size_t> src;  // Max/Last: source position per output entry
    if (kind != Pooling::Mean) src.resize(B * D);
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t n = lengths[b];
        const double* base = xd.data() + b * L * D;
        for (std::size_t j = 0; j < D; ++j) {
            double* o = &out[b * D + j];
            switch (kind) {
                case Pooling::Mean: {
                    double s = 0.0;
                    for (std::size_t l = 0; l < n; ++l) s += base[l * D + j];
                    *o = s / static_cast<double>(n);
                    break;
                }
                case Pooling::Max: {
                    std::size_t best = 0;
                    for (std::size_t l = 1; l < n; ++l)
                        if (base[l * D + j] > base[best * D + j]) best = l;
                    *o = base[best * D + j];
                    src[b * D + j] = best;
                    break;
                }
                case Pooling::Last:
                    *o = base[(n - 1) * D + j];
                    src[b * D + j] = n - 1;
                    break;
            }
        }
    }
    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    return custom_op("pool", {B, D}, std::move(out), {x},
                     [kind, L, D, lens = std::move(lens), src = std::move(src)](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t b = 0; b < lens.size(); ++b)
                             for (std::size_t j = 0; j < D; ++j) {
                                 const double gv = g[b * D + j];
                                 if (kind == Pooling::Mean) {
                                     const double w = gv / static_cast<double>(lens[b]);
                                     for (std::size_t l = 0; l < lens[b]; ++l) gi[0][(b * L + l) * D + j] += w;
                                 } else {
                                     gi[0][(b * L + src[b * D + j]) * D + j] += gv;
                                 }
                             }
                     });
}

namespace {

void softmax_backward(std::span<const double> y, std::span<const double> g, std::span<double> gx, std::size_t n) {
    const std::size_t rows = y.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * n;
        const double* gr = g.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
    const std::size_t n = x.size(-1);
    const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
    auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * n;
        double* o = out.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (o[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return custom_op("softmax_rows", x.shape(), std::move(out), {x}, [y, n](std::span<const double> g, GradSpans& gi) {
        softmax_backward(*y, g, gi[0], n);
    });
}

Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> allow) {
    if (scores.dim() != 4) throw DimensionError("masked_softmax: expected [B, H, Lq, Lk]");
    const std::size_t B = scores.size(0), H = scores.size(1), Lq = scores.size(2), Lk = scores.size(3);
    if (allow.size() != B * Lq * Lk) throw DimensionError("masked_softmax: mask size mismatch");
    auto sd = scores.data();
    std::vector<double> out(sd.size(), 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t q = 0; q < Lq; ++q) {
                const std::size_t row = ((b * H + h) * Lq + q) * Lk;
                const std::uint8_t* al = allow.data() + (b * Lq + q) * Lk;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t k = 0; k < Lk; ++k)
                    if (al[k]) mx = std::max(mx, sd[row + k]);
                if (!std::isfinite(mx)) continue;
                double s = 0.0;
                for (std::size_t k = 0; k < Lk; ++k)
                    if (al[k]) s += (out[row + k] = std::exp(sd[row + k] - mx));
                for (std::size_t k = 0; k < Lk; ++k) out[row + k] /= s;
            }
    auto y = std::make_shared<std::vector<double>>(out);
    return custom_op("masked_softmax", scores.shape(), std::move(out), {scores},
                     [y, Lk](std::span<const double> g, GradSpans& gi) { softmax_backward(*y, g, gi[0], Lk); });
}

Tensor rotary(const Tensor& x, std::size_t offset) {
    if (x.dim() < 2) throw DimensionError("rotary: expected [..., L, head_dim]");
    const std::size_t L = x.size(-2), hd = x.size(-1);
    if (hd % 2 != 0) throw ConfigError("rotary: head_dim must be even, got " + std::to_string(hd));
    const std::size_t outer = x.numel() / (L * hd);
    const std::size_t half = hd / 2;
    std::vector<double> cs(L * half), sn(L * half);
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < half; ++j) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
            const double ang = static_cast<double>(offset + l) * freq;
            cs[l * half + j] = std::cos(ang);
            sn[l * half + j] = std::sin(ang);
        }
    auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t base = (o * L + l) * hd;
            for (std::size_t j = 0; j < half; ++j) {
                const double c = cs[l * half + j], s = sn[l * half + j];
                const double a = xd[base + 2 * j], b = xd[base + 2 * j + 1];
                out[base + 2 * j] = a * c - b * s;
                out[base + 2 * j + 1] = a * s + b * c;
            }
        }
    return custom_op("rotary", x.shape(), std::move(out), {x},
                     [cs = std::move(cs), sn = std::move(sn), outer, L, hd, half](std::span<const double> g, GradSpans& gi) {
                         for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t l = 0; l < L; ++l) {
                                 const std::size_t base = (o * L + l) * hd;
                                 for (std::size_t j = 0; j < half; ++j) {
                                     const double c = cs[l * half + j], s = sn[l * half + j];
                                     const double ga = g[base + 2 * j], gb = g[base + 2 * j + 1];
                                     gi[0][base + 2 * j] += ga * c + gb * s;
                                     gi[0][base + 2 * j + 1] += -ga * s + gb * c;
                                 }
                             }
                     });
}

}  // namespace spt
