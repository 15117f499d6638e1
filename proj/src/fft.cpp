#include "spt/fft.hpp"

#include <cmath>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "spt/error.hpp"
#include "spt/ops.hpp"

namespace spt {

using cd = std::complex<double>;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

namespace {

const std::vector<cd>& roots(std::size_t n) {
    thread_local std::unordered_map<std::size_t, std::vector<cd>> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    std::vector<cd> w(n / 2);
    for (std::size_t j = 0; j < n / 2; ++j) {
        const double ang = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
        w[j] = cd(std::cos(ang), std::sin(ang));
    }
    return cache.emplace(n, std::move(w)).first->second;
}

}  // namespace

void fft_inplace(std::span<cd> x, bool inverse) {
    const std::size_t n = x.size();
    if (!is_pow2(n)) throw LengthError("fft: length " + std::to_string(n) + " is not a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(x[i], x[j]);
    }
    const auto& w = roots(n);
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t half = len / 2;
        const std::size_t step = n / len;
        for (std::size_t i = 0; i < n; i += len)
            for (std::size_t k = 0; k < half; ++k) {
                cd t = inverse ? std::conj(w[k * step]) : w[k * step];
                t *= x[i + k + half];
                x[i + k + half] = x[i + k] - t;
                x[i + k] += t;
            }
    }
    if (inverse) {
        const double s = 1.0 / static_cast<double>(n);
        for (auto& v : x) v *= s;
    }
}

namespace {

// One [2, L] op holding (re, im); callers slice it apart.
Tensor dft_op(const ComplexTensor& x, bool inverse) {
    if (x.re.dim() != 1 || x.im.dim() != 1 || x.re.numel() != x.im.numel())
        throw DimensionError("fft: expects two 1-D tensors of equal length");
    const std::size_t n = x.re.numel();
    if (!is_pow2(n)) throw LengthError("fft: length " + std::to_string(n) + " is not a power of two");
    std::vector<cd> buf(n);
    for (std::size_t i = 0; i < n; ++i) buf[i] = cd(x.re.data()[i], x.im.data()[i]);
    fft_inplace(buf, inverse);
    std::vector<double> out(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = buf[i].real();
        out[n + i] = buf[i].imag();
    }
    return custom_op(inverse ? "ifft" : "fft", {2, n}, std::move(out), {x.re, x.im},
                     [n, inverse](std::span<const double> g, GradSpans& gi) {
                         // Forward y = F x gives G_x = conj(F) G_y = n·ifft(G_y);
                         // inverse y = conj(F) x / n gives G_x = fft(G_y) / n.
                         std::vector<cd> b(n);
                         for (std::size_t i = 0; i < n; ++i) b[i] = cd(g[i], g[n + i]);
                         fft_inplace(b, !inverse);
                         const double s = static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                             cd v = inverse ? b[i] / s : b[i] * s;
                             if (!gi[0].empty()) gi[0][i] += v.real();
                             if (!gi[1].empty()) gi[1][i] += v.imag();
                         }
                     });
}

ComplexTensor split(const Tensor& packed) {
    const std::size_t n = packed.size(1);
    return {reshape(slice(packed, 0, 0, 1), {n}), reshape(slice(packed, 0, 1, 2), {n})};
}

// Spectra of two real length-L series zero-padded to N, sharing one complex FFT.
void real_pair_fft(const double* a, const double* b, std::size_t L, std::size_t stride, std::size_t N, cd* fa, cd* fb,
                   std::vector<cd>& scratch) {
    scratch.assign(N, cd(0.0, 0.0));
    for (std::size_t l = 0; l < L; ++l) scratch[l] = cd(a[l * stride], b ? b[l * stride] : 0.0);
    fft_inplace(scratch);
    for (std::size_t k = 0; k < N; ++k) {
        const cd z = scratch[k];
        const cd zc = std::conj(scratch[(N - k) & (N - 1)]);
        fa[k] = 0.5 * (z + zc);
        if (fb) fb[k] = cd(0.0, -0.5) * (z - zc);
    }
}

// Inverse of two spectra known to have real time-domain signals; writes the
// first L samples of each.
void real_pair_ifft(const std::vector<cd>& fa, const std::vector<cd>* fb, std::size_t N, std::size_t L, double* ya,
                    double* yb, std::size_t stride, std::vector<cd>& scratch) {
    scratch.resize(N);
    for (std::size_t k = 0; k < N; ++k) scratch[k] = fb ? fa[k] + cd(0.0, 1.0) * (*fb)[k] : fa[k];
    fft_inplace(scratch, true);
    for (std::size_t l = 0; l < L; ++l) {
        ya[l * stride] += scratch[l].real();
        if (yb) yb[l * stride] += scratch[l].imag();
    }
}

}  // namespace

ComplexTensor fft(const ComplexTensor& x) { return split(dft_op(x, false)); }
ComplexTensor ifft(const ComplexTensor& x) { return split(dft_op(x, true)); }

Tensor causal_conv(const Tensor& u, const Tensor& k) {
    if (u.dim() != 3 || k.dim() != 2 || u.size(2) != k.size(0) || u.size(1) != k.size(1))
        throw DimensionError("causal_conv: u[B, L, H] and k[H, L] required, got " + shape_str(u.shape()) + " and " +
                             shape_str(k.shape()));
    const std::size_t B = u.size(0), L = u.size(1), H = u.size(2);
    const std::size_t N = next_pow2(2 * L);
    auto kd = k.data();
    auto ud = u.data();

    auto kf = std::make_shared<std::vector<cd>>(H * N);
    auto uf = std::make_shared<std::vector<cd>>(B * H * N);
    std::vector<cd> scratch;
    for (std::size_t h = 0; h < H; h += 2) {
        const bool pair = h + 1 < H;
        real_pair_fft(kd.data() + h * L, pair ? kd.data() + (h + 1) * L : nullptr, L, 1, N, kf->data() + h * N,
                      pair ? kf->data() + (h + 1) * N : nullptr, scratch);
    }
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; h += 2) {
            const bool pair = h + 1 < H;
            const double* base = ud.data() + b * L * H;
            real_pair_fft(base + h, pair ? base + h + 1 : nullptr, L, H, N, uf->data() + (b * H + h) * N,
                          pair ? uf->data() + (b * H + h + 1) * N : nullptr, scratch);
        }

    std::vector<double> out(B * L * H, 0.0);
    std::vector<cd> pa(N), pb(N);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; h += 2) {
            const bool pair = h + 1 < H;
            for (std::size_t f = 0; f < N; ++f) {
                pa[f] = (*uf)[(b * H + h) * N + f] * (*kf)[h * N + f];
                if (pair) pb[f] = (*uf)[(b * H + h + 1) * N + f] * (*kf)[(h + 1) * N + f];
            }
            double* base = out.data() + b * L * H;
            real_pair_ifft(pa, pair ? &pb : nullptr, N, L, base + h, pair ? base + h + 1 : nullptr, H, scratch);
        }

    return custom_op("causal_conv", u.shape(), std::move(out), {u, k},
                     [kf, uf, B, L, H, N](std::span<const double> g, GradSpans& gi) {
                         std::vector<cd> scratch, gf(B * H * N), pa(N), pb(N);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t h = 0; h < H; h += 2) {
                                 const bool pair = h + 1 < H;
                                 const double* base = g.data() + b * L * H;
                                 real_pair_fft(base + h, pair ? base + h + 1 : nullptr, L, H, N,
                                               gf.data() + (b * H + h) * N,
                                               pair ? gf.data() + (b * H + h + 1) * N : nullptr, scratch);
                             }
                         if (!gi[0].empty())
                             for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t h = 0; h < H; h += 2) {
                                     const bool pair = h + 1 < H;
                                     for (std::size_t f = 0; f < N; ++f) {
                                         pa[f] = gf[(b * H + h) * N + f] * std::conj((*kf)[h * N + f]);
                                         if (pair) pb[f] = gf[(b * H + h + 1) * N + f] * std::conj((*kf)[(h + 1) * N + f]);
                                     }
                                     double* base = gi[0].data() + b * L * H;
                                     real_pair_ifft(pa, pair ? &pb : nullptr, N, L, base + h, pair ? base + h + 1 : nullptr,
                                                    H, scratch);
                                 }
                         if (!gi[1].empty())
                             for (std::size_t h = 0; h < H; h += 2) {
                                 const bool pair = h + 1 < H;
                                 std::fill(pa.begin(), pa.end(), cd(0.0, 0.0));
                                 std::fill(pb.begin(), pb.end(), cd(0.0, 0.0));
                                 for (std::size_t b = 0; b < B; ++b)
                                     for (std::size_t f = 0; f < N; ++f) {
                                         pa[f] += gf[(b * H + h) * N + f] * std::conj((*uf)[(b * H + h) * N + f]);
                                         if (pair)
                                             pb[f] += gf[(b * H + h + 1) * N + f] * std::conj((*uf)[(b * H + h + 1) * N + f]);
                                     }
                                 real_pair_ifft(pa, pair ? &pb : nullptr, N, L, gi[1].data() + h * L,
                                                pair ? gi[1].data() + (h + 1) * L : nullptr, 1, scratch);
                             }
                     });
}

Tensor conv_causal(const Tensor& u, const Tensor& k) {
    if (u.dim() != 1 || k.dim() != 1 || u.numel() != k.numel())
        throw DimensionError("conv_causal: u and k must be 1-D of equal length, got " + shape_str(u.shape()) + " and " +
                             shape_str(k.shape()));
    const std::size_t L = u.numel();
    return reshape(causal_conv(reshape(u, {1, L, 1}), reshape(k, {1, L})), {L});
}

}  // namespace spt
