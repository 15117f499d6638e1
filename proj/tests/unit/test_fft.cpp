#include <cmath>
#include <complex>
#include <numbers>

#include "doctest.h"
#include "spt/error.hpp"
#include "spt/fft.hpp"
#include "spt/gradcheck.hpp"
#include "spt/ops.hpp"

using namespace spt;
using cd = std::complex<double>;

namespace {

std::vector<cd> direct_dft(const std::vector<cd>& x) {
    const std::size_t n = x.size();
    std::vector<cd> y(n);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j) {
            const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * j % n) / static_cast<double>(n);
            y[k] += x[j] * cd(std::cos(ang), std::sin(ang));
        }
    return y;
}

std::vector<double> direct_conv(const std::vector<double>& u, const std::vector<double>& k) {
    std::vector<double> y(u.size(), 0.0);
    for (std::size_t n = 0; n < u.size(); ++n)
        for (std::size_t l = 0; l <= n; ++l) y[n] += k[l] * u[n - l];
    return y;
}

std::vector<double> randv(std::size_t n, std::uint64_t seed) {
    Rng rng = make_rng(seed, "fft-test");
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

}  // namespace

TEST_CASE("fft of a delta and a constant") {
    std::vector<cd> delta{1, 0, 0, 0};
    fft_inplace(delta);
    for (auto v : delta) CHECK(std::abs(v - cd(1, 0)) < 1e-15);
    std::vector<cd> ones{1, 1, 1, 1};
    fft_inplace(ones);
    CHECK(std::abs(ones[0] - cd(4, 0)) < 1e-15);
    for (std::size_t i = 1; i < 4; ++i) CHECK(std::abs(ones[i]) < 1e-15);
}

TEST_CASE("fft rejects non power-of-two lengths") {
    std::vector<cd> x(6);
    CHECK_THROWS_AS(fft_inplace(x), LengthError);
}

TEST_CASE("fft matches the direct DFT sum at L=16") {
    auto re = randv(16, 1), im = randv(16, 2);
    std::vector<cd> x(16);
    for (std::size_t i = 0; i < 16; ++i) x[i] = cd(re[i], im[i]);
    auto expected = direct_dft(x);
    auto y = x;
    fft_inplace(y);
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(y[i] - expected[i]) <= 1e-10);

    auto t = fft({Tensor::from({16}, re), Tensor::from({16}, im)});
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(std::abs(t.re.data()[i] - expected[i].real()) <= 1e-10);
        CHECK(std::abs(t.im.data()[i] - expected[i].imag()) <= 1e-10);
    }
}

TEST_CASE("ifft inverts fft for every power of two up to 4096") {
    for (std::size_t n = 1; n <= 4096; n *= 2) {
        auto re = randv(n, n), im = randv(n, n + 7);
        std::vector<cd> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = cd(re[i], im[i]);
        auto y = x;
        fft_inplace(y);
        fft_inplace(y, true);
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(y[i] - x[i]));
        CHECK(err <= 1e-10);
    }
}

TEST_CASE("tensor fft and ifft are differentiable") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto r = grad_check(
            [](const auto& in) {
                auto y = fft({in[0], in[1]});
                return concat({y.re, y.im}, 0);
            },
            {Tensor::from({8}, randv(8, s)), Tensor::from({8}, randv(8, s + 50))});
        CHECK(r.max_rel_error <= 1e-4);
        auto q = grad_check(
            [](const auto& in) {
                auto y = ifft({in[0], in[1]});
                return concat({y.re, y.im}, 0);
            },
            {Tensor::from({8}, randv(8, s)), Tensor::from({8}, randv(8, s + 50))});
        CHECK(q.max_rel_error <= 1e-4);
    }
}

TEST_CASE("conv_causal examples") {
    auto y = conv_causal(Tensor::from({3}, {1, 0, 0}), Tensor::from({3}, {1, 0.5, 0.25})).to_vector();
    CHECK(y[0] == doctest::Approx(1.0));
    CHECK(y[1] == doctest::Approx(0.5));
    CHECK(y[2] == doctest::Approx(0.25));
    auto z = conv_causal(Tensor::from({2}, {1, 2}), Tensor::from({2}, {1, 1})).to_vector();
    CHECK(z[0] == doctest::Approx(1.0));
    CHECK(z[1] == doctest::Approx(3.0));
    CHECK_THROWS_AS(conv_causal(Tensor::zeros({3}), Tensor::zeros({4})), DimensionError);
}

TEST_CASE("conv_causal equals the direct double-loop sum") {
    for (std::size_t L : {1, 2, 17, 32, 64}) {
        auto u = randv(L, L), k = randv(L, L + 1);
        auto expected = direct_conv(u, k);
        auto y = conv_causal(Tensor::from({L}, u), Tensor::from({L}, k)).to_vector();
        for (std::size_t i = 0; i < L; ++i) CHECK(std::abs(y[i] - expected[i]) <= 1e-8);
    }
}

TEST_CASE("channel-wise causal_conv matches per-channel direct sums") {
    const std::size_t B = 2, L = 13, H = 3;
    auto u = randv(B * L * H, 3), k = randv(H * L, 4);
    auto y = causal_conv(Tensor::from({B, L, H}, u), Tensor::from({H, L}, k)).to_vector();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h) {
            std::vector<double> us(L), ks(k.begin() + static_cast<long>(h * L), k.begin() + static_cast<long>((h + 1) * L));
            for (std::size_t l = 0; l < L; ++l) us[l] = u[(b * L + l) * H + h];
            auto e = direct_conv(us, ks);
            for (std::size_t l = 0; l < L; ++l) CHECK(std::abs(y[(b * L + l) * H + h] - e[l]) <= 1e-8);
        }
}

TEST_CASE("causal_conv gradients w.r.t. input and kernel") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto r = grad_check([](const auto& in) { return causal_conv(in[0], in[1]); },
                            {Tensor::from({2, 7, 3}, randv(42, s)), Tensor::from({3, 7}, randv(21, s + 9))});
        CHECK(r.max_rel_error <= 1e-4);
        auto q = grad_check([](const auto& in) { return conv_causal(in[0], in[1]); },
                            {Tensor::from({5}, randv(5, s)), Tensor::from({5}, randv(5, s + 3))});
        CHECK(q.max_rel_error <= 1e-4);
    }
}
