#include <cmath>
#include <numeric>

#include "doctest.h"
#include "spt/error.hpp"
#include "spt/gradcheck.hpp"
#include "spt/loss.hpp"
#include "spt/ops.hpp"
#include "spt/optim.hpp"

using namespace spt;

namespace {

Tensor rand_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
    Rng rng = make_rng(seed, "test");
    return Tensor::randn(std::move(shape), stddev, rng);
}

void check_grad(const GradCheckFn& f, std::vector<Tensor> inputs, double tol = 1e-4) {
    auto r = grad_check(f, std::move(inputs));
    CHECK(r.max_rel_error <= tol);
}

}  // namespace

TEST_CASE("matmul identity and scalar") {
    auto i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto b = Tensor::from({2, 2}, {3, 4, 5, 6});
    CHECK(matmul(i2, b).to_vector() == std::vector<double>{3, 4, 5, 6});
    CHECK(matmul(Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3})).item() == 6.0);
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient matches central differences") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto r = grad_check([](const auto& in) { return matmul(in[0], in[1]); },
                            {rand_tensor({4, 5}, s), rand_tensor({5, 3}, s + 100)});
        CHECK(r.max_rel_error <= 1e-6);
    }
}

TEST_CASE("backward of x squared") {
    auto x = Tensor::scalar(3.0);
    x.set_requires_grad();
    mul(x, x).backward();
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward requires a scalar") {
    auto x = Tensor::from({2}, {1, 2});
    x.set_requires_grad();
    CHECK_THROWS_AS(scale(x, 2.0).backward(), UsageError);
}

TEST_CASE("shared subexpression is visited once") {
    auto x = Tensor::from({3}, {1, 2, 3});
    x.set_requires_grad();
    auto y = add(x, x);
    auto z = sum(mul(y, y));  // Σ 4x² → grad 8x
    z.backward();
    CHECK(x.grad()[0] == doctest::Approx(8.0));
    CHECK(x.grad()[2] == doctest::Approx(24.0));
}

TEST_CASE("elementwise and shape ops pass grad_check over five seeds") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        check_grad([](const auto& in) { return add(in[0], in[1]); }, {rand_tensor({3, 4}, s), rand_tensor({4}, s + 1)});
        check_grad([](const auto& in) { return sub(in[0], in[1]); }, {rand_tensor({3, 4}, s), rand_tensor({3, 4}, s + 1)});
        check_grad([](const auto& in) { return mul(in[0], in[1]); }, {rand_tensor({2, 3, 4}, s), rand_tensor({3, 4}, s + 1)});
        check_grad([](const auto& in) { return gelu(in[0]); }, {rand_tensor({5, 3}, s)});
        check_grad([](const auto& in) { return linear(in[0], in[1], in[2]); },
                   {rand_tensor({2, 3, 4}, s), rand_tensor({4, 5}, s + 1), rand_tensor({5}, s + 2)});
        check_grad([](const auto& in) { return bmm(in[0], in[1]); }, {rand_tensor({2, 3, 4}, s), rand_tensor({2, 4, 2}, s + 1)});
        check_grad([](const auto& in) { return bmm(in[0], in[1], true); },
                   {rand_tensor({2, 3, 4}, s), rand_tensor({2, 5, 4}, s + 1)});
        check_grad([](const auto& in) { return transpose(in[0], 0, 2); }, {rand_tensor({2, 3, 4}, s)});
        check_grad([](const auto& in) { return reshape(in[0], {6, 2}); }, {rand_tensor({3, 4}, s)});
        check_grad([](const auto& in) { return slice(in[0], 1, 1, 3); }, {rand_tensor({3, 4, 2}, s)});
        check_grad([](const auto& in) { return concat({in[0], in[1]}, 1); },
                   {rand_tensor({2, 3}, s), rand_tensor({2, 2}, s + 1)});
        check_grad([](const auto& in) { return flip(in[0], 1); }, {rand_tensor({2, 5, 3}, s)});
        check_grad([](const auto& in) { return softmax_rows(in[0]); }, {rand_tensor({3, 6}, s)});
        check_grad([](const auto& in) { return rotary(in[0], 3); }, {rand_tensor({2, 5, 4}, s)});
        check_grad([](const auto& in) { return mean(in[0]); }, {rand_tensor({3, 3}, s)});
        check_grad([](const auto& in) { return scale(add_scalar(in[0], 2.0), -3.0); }, {rand_tensor({4}, s)});
    }
}

TEST_CASE("select_rows replaces dropped rows and routes gradients") {
    std::vector<std::uint8_t> keep{1, 0, 1};
    auto x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(select_rows(x, keep).to_vector() == std::vector<double>{1, 2, 0, 0, 5, 6});
    auto f = Tensor::from({2}, {9, 8});
    CHECK(select_rows(x, keep, f).to_vector() == std::vector<double>{1, 2, 9, 8, 5, 6});
    for (std::uint64_t s = 0; s < 5; ++s)
        check_grad([&](const auto& in) { return select_rows(in[0], keep, in[1]); },
                   {rand_tensor({3, 2}, s), rand_tensor({2}, s + 1)});
}

TEST_CASE("product kernels agree with a direct triple loop") {
    auto a = rand_tensor({7, 5}, 3), b = rand_tensor({5, 9}, 4);
    auto c = matmul(a, b).to_vector();
    double worst = 0.0;
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 9; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < 5; ++p) acc += a.data()[i * 5 + p] * b.data()[p * 9 + j];
            worst = std::max(worst, std::abs(acc - c[i * 9 + j]));
        }
    CHECK(worst <= 1e-12);
}

TEST_CASE("layer_norm grad_check on 4x8 input") {
    for (std::uint64_t s = 0; s < 5; ++s)
        check_grad([](const auto& in) { return layer_norm(in[0], in[1], in[2]); },
                   {rand_tensor({4, 8}, s), rand_tensor({8}, s + 1), rand_tensor({8}, s + 2)});
}

TEST_CASE("pooling gradients and values") {
    const std::vector<std::size_t> lens{3, 2};
    for (auto kind : {Pooling::Mean, Pooling::Max, Pooling::Last})
        for (std::uint64_t s = 0; s < 5; ++s)
            check_grad([&](const auto& in) { return pool(in[0], kind, lens); }, {rand_tensor({2, 4, 3}, s)});
    auto x = Tensor::from({1, 3, 1}, {1, 5, 2});
    std::vector<std::size_t> l3{3};
    CHECK(pool(x, Pooling::Mean, l3).item() == doctest::Approx(8.0 / 3.0));
    CHECK(pool(x, Pooling::Max, l3).item() == 5.0);
    CHECK(pool(x, Pooling::Last, l3).item() == 2.0);
}

TEST_CASE("embedding gathers rows and rejects unknown ids") {
    auto table = Tensor::from({3, 2}, {0, 1, 2, 3, 4, 5});
    std::vector<std::int32_t> ids{2, 0};
    CHECK(embedding(table, ids, {2}).to_vector() == std::vector<double>{4, 5, 0, 1});
    std::vector<std::int32_t> bad{3};
    CHECK_THROWS_AS(embedding(table, bad, {1}), VocabularyError);
    for (std::uint64_t s = 0; s < 5; ++s)
        check_grad([&](const auto& in) { return embedding(in[0], ids, {2}); }, {rand_tensor({3, 2}, s)});
}

TEST_CASE("dropout is reproducible from its seed") {
    auto x = Tensor::full({100}, 1.0);
    auto a = dropout(x, 0.3, 42, true).to_vector();
    auto b = dropout(x, 0.3, 42, true).to_vector();
    CHECK(a == b);
    CHECK(dropout(x, 0.3, 42, false).to_vector() == x.to_vector());
    for (std::uint64_t s = 0; s < 5; ++s)
        check_grad([](const auto& in) { return dropout(in[0], 0.5, 7, true); }, {rand_tensor({10}, s)});
}

TEST_CASE("softmax examples") {
    CHECK(softmax_rows(Tensor::from({1, 2}, {0, 0})).to_vector() == std::vector<double>{0.5, 0.5});
    auto big = softmax_rows(Tensor::from({1, 2}, {1000, 1000})).to_vector();
    CHECK(big[0] == doctest::Approx(0.5));
    auto r = softmax_rows(Tensor::from({1, 2}, {0, std::log(3.0)})).to_vector();
    CHECK(r[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
    auto x = rand_tensor({6, 9}, 3, 5.0);
    auto y = softmax_rows(x).to_vector();
    auto shifted = softmax_rows(add_scalar(x, 123.0)).to_vector();
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
            CHECK(y[r * 9 + j] >= 0.0);
            s += y[r * 9 + j];
            CHECK(std::abs(y[r * 9 + j] - shifted[r * 9 + j]) <= 1e-12);
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("masked softmax zeroes disallowed keys") {
    auto s = rand_tensor({1, 2, 2, 3}, 1);
    std::vector<std::uint8_t> allow{1, 0, 1, 0, 0, 0};
    auto y = masked_softmax(s, allow).to_vector();
    CHECK(y[1] == 0.0);
    CHECK(y[0] + y[2] == doctest::Approx(1.0));
    CHECK(y[3] == 0.0);
    CHECK(y[4] == 0.0);
    std::vector<std::uint8_t> allow2{1, 1, 0, 1, 0, 1};
    for (std::uint64_t k = 0; k < 5; ++k)
        check_grad([&](const auto& in) { return masked_softmax(in[0], allow2); }, {rand_tensor({1, 2, 2, 3}, k)});
}

TEST_CASE("cross entropy and l1 examples") {
    std::vector<std::int32_t> t0{0};
    std::vector<std::uint8_t> m1{1};
    CHECK(cross_entropy(Tensor::from({1, 2}, {0, 0}), t0, m1).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    std::vector<double> tgt{1, 2};
    std::vector<std::uint8_t> m2{1, 1};
    CHECK(l1_loss(Tensor::from({2, 1}, {1, 2}), tgt, m2).item() == 0.0);

    std::vector<std::uint8_t> empty{0, 0};
    CHECK_THROWS_AS(l1_loss(Tensor::from({2, 1}, {1, 2}), tgt, empty), NumericError);
}

TEST_CASE("masked cross entropy equals mean of selected per-position values") {
    auto logits = rand_tensor({8, 5}, 11);
    std::vector<std::int32_t> targets{0, 1, 2, 3, 4, 0, 1, 2};
    std::vector<std::uint8_t> mask{0, 0, 1, 0, 0, 0, 1, 0};
    auto ld = logits.data();
    auto per_position = [&](std::size_t r) {
        double mx = -1e300, s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) mx = std::max(mx, ld[r * 5 + j]);
        for (std::size_t j = 0; j < 5; ++j) s += std::exp(ld[r * 5 + j] - mx);
        return -(ld[r * 5 + static_cast<std::size_t>(targets[r])] - mx - std::log(s));
    };
    double expected = 0.5 * (per_position(2) + per_position(6));
    CHECK(cross_entropy(logits, targets, mask).item() == doctest::Approx(expected).epsilon(1e-12));
    for (std::uint64_t s = 0; s < 5; ++s)
        check_grad([&](const auto& in) { return cross_entropy(in[0], targets, mask); }, {rand_tensor({8, 5}, s)});
    std::vector<double> reg(16);
    std::iota(reg.begin(), reg.end(), 0.0);
    for (std::uint64_t s = 0; s < 5; ++s) {
        check_grad([&](const auto& in) { return mse_loss(in[0], reg, mask); }, {rand_tensor({8, 2}, s)});
        check_grad([&](const auto& in) { return l1_loss(in[0], reg, mask); }, {rand_tensor({8, 2}, s)});
    }
}

TEST_CASE("one AdamW step from zero moments") {
    auto p = Tensor::from({1}, {1.0});
    p.set_requires_grad();
    AdamW opt({ParamGroup{"all", {p}, 0.1, 0.0}});
    p.mutable_grad()[0] = 1.0;
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("AdamW with weight decay 0 is deterministic") {
    auto run = [] {
        Rng rng = make_rng(5, "adam");
        auto w = Tensor::randn({4, 3}, 1.0, rng);
        w.set_requires_grad();
        auto x = Tensor::randn({6, 4}, 1.0, rng);
        AdamW opt({ParamGroup{"all", {w}, 0.01, 0.0}});
        for (int i = 0; i < 20; ++i) {
            opt.zero_grad();
            auto loss = mean(mul(matmul(x, w), matmul(x, w)));
            loss.backward();
            opt.step(warmup_cosine(static_cast<std::size_t>(i), 20));
        }
        return w.to_vector();
    };
    CHECK(run() == run());
}

TEST_CASE("warmup cosine schedule shape") {
    CHECK(warmup_cosine(0, 100) == doctest::Approx(0.1));
    CHECK(warmup_cosine(9, 100) == doctest::Approx(1.0));
    CHECK(warmup_cosine(10, 100) == doctest::Approx(1.0));
    CHECK(warmup_cosine(100, 100) == doctest::Approx(0.0));
}

TEST_CASE("float32 mode rounds op outputs") {
    PrecisionScope scope(Precision::Float32);
    auto x = Tensor::from({1}, {0.1});
    CHECK(x.data()[0] == static_cast<double>(0.1f));
    auto y = scale(x, 3.0);
    CHECK(y.data()[0] == static_cast<double>(static_cast<float>(static_cast<double>(0.1f) * 3.0)));
}

TEST_CASE("non-finite forward output is an error") {
    auto x = Tensor::from({1}, {1e308});
    CHECK_THROWS_AS(scale(x, 10.0), NumericError);
}
