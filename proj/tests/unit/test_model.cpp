#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "spt/error.hpp"
#include "spt/gradcheck.hpp"
#include "spt/model.hpp"

using namespace spt;

namespace {

std::vector<double> randv(std::size_t n, std::uint64_t seed) {
    Rng rng = make_rng(seed, "model-test");
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

Tensor rand_tensor(Shape s, std::uint64_t seed, double sd = 1.0) {
    auto v = randv(numel_of(s), seed);
    for (auto& x : v) x *= sd;
    return Tensor::from(std::move(s), std::move(v));
}

ModelInput continuous_input(std::size_t b, std::size_t l, std::size_t d, std::uint64_t seed) {
    ModelInput in;
    in.batch = b;
    in.length = l;
    in.values = randv(b * l * d, seed);
    in.lengths.assign(b, l);
    return in;
}

ModelConfig small(Family f, bool bidir) {
    ModelConfig c;
    c.family = f;
    c.depth = 2;
    c.width = 8;
    c.ffn = 16;
    c.heads = 2;
    c.state_size = 4;
    c.bidirectional = bidir;
    c.vocab_size = 0;
    c.input_dim = 2;
    c.max_len = 32;
    c.num_outputs = 3;
    c.positional = f == Family::Transformer ? Positional::Learned : Positional::None;
    return c;
}

TransformerBlockWeights tblock(const std::vector<Tensor>& in) {
    return {in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8], in[9], in[10], in[11], in[12], in[13]};
}

std::vector<Tensor> tblock_inputs(std::size_t w, std::size_t f, std::uint64_t s) {
    const double sw = 1.0 / std::sqrt(static_cast<double>(w));
    return {rand_tensor({1, 6, w}, s),
            add_scalar(rand_tensor({w}, s + 1, 0.1), 1.0).detach(),
            rand_tensor({w}, s + 2, 0.1),
            rand_tensor({w, w}, s + 3, sw),
            rand_tensor({w, w}, s + 4, sw),
            rand_tensor({w, w}, s + 5, sw),
            rand_tensor({w, w}, s + 6, sw),
            rand_tensor({w}, s + 7, 0.1),
            add_scalar(rand_tensor({w}, s + 8, 0.1), 1.0).detach(),
            rand_tensor({w}, s + 9, 0.1),
            rand_tensor({w, f}, s + 10, sw),
            rand_tensor({f}, s + 11, 0.1),
            rand_tensor({f, w}, s + 12, 1.0 / std::sqrt(static_cast<double>(f))),
            rand_tensor({w}, s + 13, 0.1)};
}

}  // namespace

TEST_CASE("zero attention and FFN weights make the transformer block an identity") {
    auto in = tblock_inputs(8, 16, 1);
    for (std::size_t i : {4u, 5u, 6u, 7u, 8u, 11u, 12u, 13u, 14u}) in[i - 1] = Tensor::zeros(in[i - 1].shape());
    auto allow = attention_mask(1, 6, std::vector<std::size_t>{6}, false, 0);
    auto y = transformer_block(in[0], tblock(in), 2, allow, false);
    CHECK(y.to_vector() == in[0].to_vector());
}

TEST_CASE("transformer block grad check, 1 head, width 8, L=6") {
    for (std::uint64_t s = 0; s < 5; ++s)
        for (bool causal : {false, true}) {
            auto allow = attention_mask(1, 6, std::vector<std::size_t>{6}, causal, 0);
            auto r = grad_check([&](const auto& in) { return transformer_block(in[0], tblock(in), 1, allow, false); },
                                tblock_inputs(8, 16, s * 31));
            CHECK(r.max_rel_error <= 1e-4);
        }
}

TEST_CASE("rotary transformer block grad check") {
    auto allow = attention_mask(1, 6, std::vector<std::size_t>{6}, true, 0);
    auto r = grad_check([&](const auto& in) { return transformer_block(in[0], tblock(in), 2, allow, true); },
                        tblock_inputs(8, 16, 77));
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("causal transformer block: future perturbation leaves the past unchanged") {
    auto in = tblock_inputs(8, 16, 5);
    auto allow = attention_mask(1, 6, std::vector<std::size_t>{6}, true, 0);
    auto base = transformer_block(in[0], tblock(in), 2, allow, true).to_vector();
    for (std::size_t t = 0; t < 6; ++t) {
        auto x = in[0].to_vector();
        for (std::size_t j = 0; j < 8; ++j) x[t * 8 + j] += 0.5;
        auto inp = in;
        inp[0] = Tensor::from({1, 6, 8}, x);
        auto y = transformer_block(inp[0], tblock(inp), 2, allow, true).to_vector();
        for (std::size_t p = 0; p < t; ++p)
            for (std::size_t j = 0; j < 8; ++j) CHECK(y[p * 8 + j] == base[p * 8 + j]);
        double changed = 0.0;
        for (std::size_t j = 0; j < 8; ++j) changed += std::abs(y[t * 8 + j] - base[t * 8 + j]);
        CHECK(changed > 0.0);
    }
}

TEST_CASE("rotary: identity at position 0, norm preserving, relative") {
    auto q = rand_tensor({1, 4}, 3), k = rand_tensor({1, 4}, 4);
    CHECK(rotary(q, 0).to_vector() == q.to_vector());
    auto rq = rotary(q, 17).to_vector();
    double n0 = 0.0, n1 = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
        n0 += q.data()[j] * q.data()[j];
        n1 += rq[j] * rq[j];
    }
    CHECK(std::abs(n0 - n1) <= 1e-12);
    CHECK_THROWS_AS(rotary(rand_tensor({1, 3}, 1), 2), ConfigError);
    auto dot_at = [&](std::size_t i, std::size_t j) {
        auto a = rotary(q, i).to_vector(), b = rotary(k, j).to_vector();
        double s = 0.0;
        for (std::size_t t = 0; t < 4; ++t) s += a[t] * b[t];
        return s;
    };
    const double ref = dot_at(3, 1);
    for (std::size_t s : {0, 5, 100}) CHECK(std::abs(dot_at(3 + s, 1 + s) - ref) <= 1e-9);
}

TEST_CASE("block-local mask follows the neighbour policy") {
    std::vector<std::size_t> len{8};
    auto m = attention_mask(1, 8, len, false, 4);
    for (std::size_t j = 0; j < 8; ++j) CHECK(m[1 * 8 + j] == 1);
    std::vector<std::size_t> len12{12};
    auto m12 = attention_mask(1, 12, len12, false, 4);
    for (std::size_t j = 0; j < 12; ++j) {
        CHECK(m12[0 * 12 + j] == (j < 8 ? 1 : 0));
        CHECK(m12[5 * 12 + j] == 1);
        CHECK(m12[11 * 12 + j] == (j >= 4 ? 1 : 0));
    }
}

TEST_CASE("block-local attention: locality and block=L equals full attention") {
    auto in = tblock_inputs(8, 16, 9);
    const std::size_t L = 16;
    in[0] = rand_tensor({1, L, 8}, 10);
    std::vector<std::size_t> len{L};
    auto local = attention_mask(1, L, len, false, 4);
    auto base = transformer_block(in[0], tblock(in), 2, local, false).to_vector();
    auto x = in[0].to_vector();
    for (std::size_t j = 0; j < 8; ++j) x[j] += 1.0;
    auto inp = in;
    inp[0] = Tensor::from({1, L, 8}, x);
    auto y = transformer_block(inp[0], tblock(inp), 2, local, false).to_vector();
    for (std::size_t p = 8; p < L; ++p)
        for (std::size_t j = 0; j < 8; ++j) CHECK(y[p * 8 + j] == base[p * 8 + j]);

    auto full = transformer_block(in[0], tblock(in), 2, attention_mask(1, L, len, false, 0), false).to_vector();
    auto whole = transformer_block(in[0], tblock(in), 2, attention_mask(1, L, len, false, L), false).to_vector();
    for (std::size_t i = 0; i < full.size(); ++i) CHECK(std::abs(full[i] - whole[i]) <= 1e-9);
}

TEST_CASE("ssm block: zero kernels and FFN give the identity") {
    const std::size_t w = 4, L = 8;
    auto x = rand_tensor({1, L, w}, 1);
    SsmBlockWeights sw{Tensor::full({w}, 1.0), Tensor::zeros({w}), rand_tensor({w, w}, 2), Tensor::zeros({w}),
                       rand_tensor({w, w}, 3), Tensor::zeros({w}), Tensor::full({w}, 1.0), Tensor::zeros({w}),
                       Tensor::zeros({w, 8}), Tensor::zeros({8}), Tensor::zeros({8, w}), Tensor::zeros({w})};
    std::vector<std::uint8_t> valid(L, 1);
    auto y = ssm_block(x, Tensor::zeros({2, w, L}), sw, valid);
    CHECK(y.to_vector() == x.to_vector());
}

TEST_CASE("ssm block grad check through DPLR kernels, width 4, N 4, L 8") {
    const std::size_t w = 4, L = 8;
    std::vector<std::uint8_t> valid(L, 1);
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto sp = draw_stable_dplr(4, w, 2, s);
        std::vector<Tensor> in{rand_tensor({1, L, w}, s),
                               add_scalar(rand_tensor({w}, s + 1, 0.1), 1.0).detach(),
                               rand_tensor({w}, s + 2, 0.1),
                               rand_tensor({w, w}, s + 3, 0.5),
                               rand_tensor({w}, s + 4, 0.1),
                               rand_tensor({w, w}, s + 5, 0.5),
                               rand_tensor({w}, s + 6, 0.1),
                               add_scalar(rand_tensor({w}, s + 7, 0.1), 1.0).detach(),
                               rand_tensor({w}, s + 8, 0.1),
                               rand_tensor({w, 8}, s + 9, 0.5),
                               rand_tensor({8}, s + 10, 0.1),
                               rand_tensor({8, w}, s + 11, 0.35),
                               rand_tensor({w}, s + 12, 0.1),
                               sp.lambda.detach(),
                               sp.p.detach(),
                               sp.q.detach(),
                               sp.b.detach(),
                               sp.c.detach(),
                               sp.log_dt.detach()};
        auto r = grad_check(
            [&](const auto& t) {
                DplrParams q{4, w, 2, t[13], t[14], t[15], t[16], t[17], t[18]};
                SsmBlockWeights bw{t[1], t[2], t[3], t[4], t[5], t[6], t[7], t[8], t[9], t[10], t[11], t[12]};
                return ssm_block(t[0], dplr_kernel(q, L), bw, valid);
            },
            in);
        CHECK(r.max_rel_error <= 1e-3);
    }
}

TEST_CASE("bidirectional SSM flip symmetry is exact") {
    const std::size_t L = 13, H = 3;
    auto h = rand_tensor({2, L, H}, 1);
    auto k = rand_tensor({2, H, L}, 2);
    auto swapped = concat({slice(k, 0, 1, 2), slice(k, 0, 0, 1)}, 0);
    auto y = ssm_convolve(h, k).to_vector();
    auto yr = flip(ssm_convolve(flip(h, 1), swapped), 1).to_vector();
    CHECK(y == yr);
}

TEST_CASE("causality for every unidirectional family") {
    for (auto fam : {Family::Transformer, Family::S4, Family::Dlr}) {
        auto cfg = small(fam, false);
        if (fam == Family::Transformer) cfg.positional = Positional::Rotary;
        Model m(cfg, 3);
        const std::size_t L = 10;
        auto in = continuous_input(1, L, 2, 4);
        auto base = m.forward(in).sequence_states.to_vector();
        for (std::size_t t = 0; t < L; ++t) {
            auto pert = in;
            pert.values[t * 2] += 1.0;
            auto y = m.forward(pert).sequence_states.to_vector();
            // Attention is exact; FFT convolution leaves float64 rounding noise.
            const double tol = fam == Family::Transformer ? 0.0 : 1e-12;
            double past = 0.0, future = 0.0;
            for (std::size_t p = 0; p < t * 8; ++p) past = std::max(past, std::abs(y[p] - base[p]));
            for (std::size_t p = t * 8; p < L * 8; ++p) future = std::max(future, std::abs(y[p] - base[p]));
            CHECK(past <= tol);
            CHECK(future > 1e-6);
        }
    }
}

TEST_CASE("pooling equivariance under sequence reversal") {
    auto x = rand_tensor({2, 5, 3}, 8);
    std::vector<std::size_t> lens{5, 5};
    auto xr = flip(x, 1);
    CHECK(pool(x, Pooling::Mean, lens).to_vector()[0] == doctest::Approx(pool(xr, Pooling::Mean, lens).to_vector()[0]));
    CHECK(pool(x, Pooling::Max, lens).to_vector() == pool(xr, Pooling::Max, lens).to_vector());
    CHECK(pool(x, Pooling::Last, lens).to_vector() != pool(xr, Pooling::Last, lens).to_vector());
}

TEST_CASE("depth 0 pools the embeddings") {
    auto cfg = small(Family::Dlr, true);
    cfg.depth = 0;
    cfg.pooling = Pooling::Mean;
    Model m(cfg, 1);
    auto in = continuous_input(1, 4, 2, 2);
    auto out = m.forward(in);
    auto e = linear(Tensor::from({1, 4, 2}, in.values), m.parameter("embed.proj.w"), m.parameter("embed.proj.b"));
    auto expect = pool(e, Pooling::Mean, in.lengths).to_vector();
    auto got = out.pooled.to_vector();
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-14));
}

TEST_CASE("last pooling on a causal model reads position L-1") {
    auto cfg = small(Family::Dlr, false);
    cfg.pooling = Pooling::Last;
    Model m(cfg, 1);
    auto in = continuous_input(1, 7, 2, 3);
    auto out = m.forward(in);
    auto st = out.sequence_states.to_vector();
    auto pooled = out.pooled.to_vector();
    for (std::size_t j = 0; j < 8; ++j) CHECK(pooled[j] == st[6 * 8 + j]);
}

TEST_CASE("parameter count matches the closed form") {
    ModelConfig c;
    c.family = Family::Transformer;
    c.vocab_size = 10;
    c.width = 8;
    c.ffn = 16;
    c.depth = 1;
    c.heads = 2;
    c.positional = Positional::Learned;
    c.max_len = 6;
    c.num_outputs = 3;
    // 88 table + 48 positions + 576 layer + 16 norm + 90 denoise + 27 task
    CHECK(Model(c, 0).parameter_count() == 845);
    CHECK(expected_param_count(c) == 845);
    for (auto fam : {Family::S4, Family::Dlr, Family::Transformer})
        for (bool bidir : {false, true}) {
            auto cfg = small(fam, bidir);
            CHECK(Model(cfg, 0).parameter_count() == expected_param_count(cfg));
            cfg.vocab_size = 20;
            CHECK(Model(cfg, 0).parameter_count() == expected_param_count(cfg));
        }
}

TEST_CASE("unknown token ids are rejected") {
    ModelConfig c = small(Family::Dlr, true);
    c.vocab_size = 5;
    Model m(c, 0);
    ModelInput in;
    in.batch = 1;
    in.length = 3;
    in.tokens = {1, 2, 5};
    in.lengths = {3};
    CHECK_THROWS_AS(m.forward(in), VocabularyError);
}

TEST_CASE("mask flags swap in the mask row and pad positions do not leak") {
    ModelConfig c = small(Family::Dlr, true);
    c.vocab_size = 5;
    Model m(c, 0);
    ModelInput in;
    in.batch = 1;
    in.length = 4;
    in.tokens = {1, 2, 3, 0};
    in.lengths = {3};
    auto base = m.forward(in).pooled.to_vector();
    auto other = in;
    other.tokens[3] = 4;
    CHECK(m.forward(other).pooled.to_vector() == base);
    auto masked = in;
    masked.masked = {0, 1, 0, 0};
    CHECK(m.forward(masked).pooled.to_vector() != base);
}

TEST_CASE("forward and backward are deterministic with dropout") {
    auto cfg = small(Family::Transformer, true);
    cfg.dropout = 0.2;
    auto run = [&] {
        Model m(cfg, 11);
        auto in = continuous_input(2, 6, 2, 12);
        ForwardOptions o{true, 99, true, false};
        auto out = m.forward(in, o);
        sum(out.logits).backward();
        auto g = m.parameter("layers.0.attn.q.w").grad();
        return std::vector<double>(g.begin(), g.end());
    };
    CHECK(run() == run());
}

TEST_CASE("config json round trip and unknown keys") {
    auto cfg = small(Family::S4, true);
    auto back = model_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    auto j = to_json(cfg);
    j["widht"] = 3;
    CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
    auto bad = to_json(cfg);
    bad["family"] = "mamba";
    CHECK_THROWS_AS(model_config_from_json(bad), ConfigError);
}

TEST_CASE("checkpoint round trip is byte-identical for parameters") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "spt_ckpt_test";
    fs::create_directories(dir);
    auto cfg = small(Family::S4, true);
    Model m(cfg, 5);
    OptimizerState st{3, {{1, 2}}, {{3, 4}}};
    save_checkpoint((dir / "a.ckpt").string(), cfg, m.parameters(), &st, {{"note", "x"}});
    auto ck = load_checkpoint((dir / "a.ckpt").string());
    CHECK(serialize_parameters(ck.params) == serialize_parameters(m.parameters()));
    CHECK(to_json(ck.config) == to_json(cfg));
    REQUIRE(ck.optimizer.has_value());
    CHECK(ck.optimizer->step == 3);
    CHECK(ck.optimizer->second_moment[0] == std::vector<double>{3, 4});
    CHECK(ck.extra["note"] == "x");
    save_checkpoint((dir / "b.ckpt").string(), ck.config, ck.params, &*ck.optimizer, ck.extra);
    auto read = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(read(dir / "a.ckpt") == read(dir / "b.ckpt"));

    Model fresh(cfg, 6);
    fresh.load_values(ck.params, false);
    CHECK(serialize_parameters(fresh.parameters()) == serialize_parameters(m.parameters()));
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), MissingArtifactError);

    auto other = small(Family::S4, true);
    other.width = 16;
    Model wide(other, 1);
    CHECK_THROWS_AS(wide.load_values(ck.params, true), IncompatibleError);
    fs::remove_all(dir);
}

TEST_CASE("reset_task_head only touches the task head") {
    auto cfg = small(Family::Dlr, true);
    Model m(cfg, 5);
    auto before = m.parameter("layers.0.ssm.c").to_vector();
    auto head = m.parameter("head.task.w").to_vector();
    m.reset_task_head(123);
    CHECK(m.parameter("layers.0.ssm.c").to_vector() == before);
    CHECK(m.parameter("head.task.w").to_vector() != head);
}

TEST_CASE("parameter groups keep SSM dynamics apart without weight decay") {
    auto cfg = small(Family::S4, true);
    Model m(cfg, 5);
    auto groups = m.param_groups(1e-3, 0.01, 5e-4);
    std::size_t total = 0;
    for (const auto& g : groups) {
        for (const auto& t : g.params) total += t.numel();
        if (g.name == "ssm") {
            CHECK(g.weight_decay == 0.0);
            CHECK(g.lr == 5e-4);
            CHECK(g.params.size() == 2 * 5);
        }
    }
    CHECK(total == m.parameter_count());
}
