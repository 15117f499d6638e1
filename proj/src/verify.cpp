#include "spt/verify.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "spt/data.hpp"
#include "spt/fft.hpp"
#include "spt/gradcheck.hpp"
#include "spt/loss.hpp"
#include "spt/model.hpp"
#include "spt/rng.hpp"

namespace spt {

namespace {

std::vector<double> randv(std::size_t n, std::uint64_t seed, double sd = 1.0) {
    Rng rng = make_rng(seed, "verify");
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

Tensor randt(Shape s, std::uint64_t seed, double sd = 1.0) {
    auto v = randv(numel_of(s), seed, sd);
    return Tensor::from(std::move(s), std::move(v));
}

Tensor near_one(std::size_t n, std::uint64_t seed) { return add_scalar(randt({n}, seed, 0.1), 1.0).detach(); }

PropertyResult result(std::string name, double measured, double limit, bool ok, std::string detail = "") {
    return {std::move(name), ok, measured, limit, std::move(detail)};
}

std::string fmt(double v) {
    std::ostringstream o;
    o << v;
    return o.str();
}

template <class Draw, class Kernel, class System>
PropertyResult scan_check(const std::string& name, std::size_t draws, const std::vector<std::size_t>& ns,
                          const std::vector<std::size_t>& lengths, double tol, Draw draw, Kernel kernel, System system) {
    double worst = 0.0;
    std::string where;
    const std::size_t H = 2;
    for (std::size_t n : ns)
        for (std::size_t d = 0; d < draws; ++d) {
            const std::uint64_t seed = derive_seed(d, name, n);
            auto params = draw(n, H, seed);
            for (std::size_t len : lengths) {
                const Tensor k = kernel(params, len);  // [1, H, L]
                for (std::size_t c = 0; c < H; ++c) {
                    auto u = randv(len, seed + 7 * c + len);
                    auto kc = slice(reshape(k, {H, len}), 0, c, c + 1);
                    auto y = conv_causal(Tensor::from({len}, u), reshape(kc, {len})).to_vector();
                    auto sys = system(params, c);
                    auto r = recurrence_scan(sys.a_bar, sys.b_bar, sys.c[0], u);
                    for (std::size_t i = 0; i < len; ++i) {
                        const double e = std::abs(y[i] - r[i]);
                        if (e > worst) {
                            worst = e;
                            where = "N=" + std::to_string(n) + " L=" + std::to_string(len) + " draw " + std::to_string(d);
                        }
                    }
                }
            }
        }
    return result(name, worst, tol, worst <= tol, "worst at " + where);
}

GradCheckResult gc(const GradCheckFn& f, std::vector<Tensor> in, std::uint64_t seed) {
    return grad_check(f, std::move(in), 1e-5, seed);
}

struct GradCase {
    std::string name;
    std::function<GradCheckResult(std::uint64_t)> run;
};

TransformerBlockWeights tblock(const std::vector<Tensor>& in) {
    return {in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8], in[9], in[10], in[11], in[12], in[13]};
}

std::vector<Tensor> tblock_inputs(std::size_t w, std::size_t f, std::size_t len, std::uint64_t s) {
    const double sw = 1.0 / std::sqrt(static_cast<double>(w));
    return {randt({1, len, w}, s),      near_one(w, s + 1),          randt({w}, s + 2, 0.1),
            randt({w, w}, s + 3, sw),   randt({w, w}, s + 4, sw),    randt({w, w}, s + 5, sw),
            randt({w, w}, s + 6, sw),   randt({w}, s + 7, 0.1),      near_one(w, s + 8),
            randt({w}, s + 9, 0.1),     randt({w, f}, s + 10, sw),   randt({f}, s + 11, 0.1),
            randt({f, w}, s + 12, 1.0 / std::sqrt(static_cast<double>(f))), randt({w}, s + 13, 0.1)};
}

std::vector<Tensor> sblock_inputs(std::size_t w, std::size_t len, std::uint64_t s) {
    return {randt({1, len, w}, s),   near_one(w, s + 1),        randt({w}, s + 2, 0.1), randt({w, w}, s + 3, 0.5),
            randt({w}, s + 4, 0.1),  randt({w, w}, s + 5, 0.5), randt({w}, s + 6, 0.1), near_one(w, s + 7),
            randt({w}, s + 8, 0.1),  randt({w, 8}, s + 9, 0.5), randt({8}, s + 10, 0.1), randt({8, w}, s + 11, 0.35),
            randt({w}, s + 12, 0.1)};
}

SsmBlockWeights sblock(const std::vector<Tensor>& t) {
    return {t[1], t[2], t[3], t[4], t[5], t[6], t[7], t[8], t[9], t[10], t[11], t[12]};
}

std::vector<PropertyResult> run_cases(const std::vector<GradCase>& cases, std::size_t seeds, double tol) {
    std::vector<PropertyResult> out;
    for (const auto& c : cases) {
        double worst = 0.0;
        for (std::uint64_t s = 0; s < seeds; ++s) worst = std::max(worst, c.run(1000 * s + 17).max_rel_error);
        out.push_back(result("grad " + c.name, worst, tol, worst <= tol));
    }
    return out;
}

}  // namespace

PropertyResult verify_scan_dplr(std::size_t draws, const std::vector<std::size_t>& ns,
                                const std::vector<std::size_t>& lengths, double tol) {
    return scan_check(
        "scan vs conv (DPLR)", draws, ns, lengths, tol,
        [](std::size_t n, std::size_t h, std::uint64_t s) { return draw_stable_dplr(n, h, 1, s); },
        [](const DplrParams& p, std::size_t l) { return dplr_kernel(p, l); },
        [](const DplrParams& p, std::size_t c) { return dplr_channel_system(p, c); });
}

PropertyResult verify_scan_dlr(std::size_t draws, const std::vector<std::size_t>& ns,
                               const std::vector<std::size_t>& lengths, double tol) {
    return scan_check(
        "scan vs conv (DLR)", draws, ns, lengths, tol,
        [](std::size_t n, std::size_t h, std::uint64_t s) { return draw_stable_dlr(n, h, 1, s); },
        [](const DlrParams& p, std::size_t l) { return dlr_kernel(p, l); },
        [](const DlrParams& p, std::size_t c) { return dlr_channel_system(p, c); });
}

std::vector<PropertyResult> verify_tensor_gradients(std::size_t seeds, double tol) {
    using In = std::vector<Tensor>;
    const std::vector<std::size_t> lens{3, 2};
    std::vector<GradCase> cases{
        {"add (broadcast)", [](auto s) { return gc([](const In& i) { return add(i[0], i[1]); }, {randt({3, 4}, s), randt({4}, s + 1)}, s); }},
        {"sub", [](auto s) { return gc([](const In& i) { return sub(i[0], i[1]); }, {randt({3, 4}, s), randt({3, 4}, s + 1)}, s); }},
        {"mul (broadcast)", [](auto s) { return gc([](const In& i) { return mul(i[0], i[1]); }, {randt({2, 3, 4}, s), randt({3, 4}, s + 1)}, s); }},
        {"scale/add_scalar", [](auto s) { return gc([](const In& i) { return scale(add_scalar(i[0], 2.0), -3.0); }, {randt({4}, s)}, s); }},
        {"matmul", [](auto s) { return gc([](const In& i) { return matmul(i[0], i[1]); }, {randt({3, 5}, s), randt({5, 2}, s + 1)}, s); }},
        {"linear", [](auto s) { return gc([](const In& i) { return linear(i[0], i[1], i[2]); }, {randt({2, 3, 4}, s), randt({4, 5}, s + 1), randt({5}, s + 2)}, s); }},
        {"bmm", [](auto s) { return gc([](const In& i) { return bmm(i[0], i[1]); }, {randt({2, 3, 4}, s), randt({2, 4, 2}, s + 1)}, s); }},
        {"bmm (transposed)", [](auto s) { return gc([](const In& i) { return bmm(i[0], i[1], true); }, {randt({2, 3, 4}, s), randt({2, 5, 4}, s + 1)}, s); }},
        {"transpose", [](auto s) { return gc([](const In& i) { return transpose(i[0], 0, 2); }, {randt({2, 3, 4}, s)}, s); }},
        {"reshape", [](auto s) { return gc([](const In& i) { return reshape(i[0], {6, 2}); }, {randt({3, 4}, s)}, s); }},
        {"slice", [](auto s) { return gc([](const In& i) { return slice(i[0], 1, 1, 3); }, {randt({3, 4, 2}, s)}, s); }},
        {"concat", [](auto s) { return gc([](const In& i) { return concat({i[0], i[1]}, 1); }, {randt({2, 3}, s), randt({2, 2}, s + 1)}, s); }},
        {"flip", [](auto s) { return gc([](const In& i) { return flip(i[0], 1); }, {randt({2, 5, 3}, s)}, s); }},
        {"gelu", [](auto s) { return gc([](const In& i) { return gelu(i[0]); }, {randt({5, 3}, s)}, s); }},
        {"layer_norm", [](auto s) { return gc([](const In& i) { return layer_norm(i[0], i[1], i[2]); }, {randt({4, 8}, s), randt({8}, s + 1), randt({8}, s + 2)}, s); }},
        {"embedding", [](auto s) {
             std::vector<std::int32_t> ids{2, 0, 2, 1};
             return gc([ids](const In& i) { return embedding(i[0], ids, {2, 2}); }, {randt({3, 4}, s)}, s);
         }},
        {"dropout (training)", [](auto s) { return gc([s](const In& i) { return dropout(i[0], 0.3, s, true); }, {randt({4, 6}, s)}, s); }},
        {"select_rows", [](auto s) {
             std::vector<std::uint8_t> keep{1, 0, 1, 0};
             return gc([keep](const In& i) { return select_rows(i[0], keep, i[1]); }, {randt({4, 3}, s), randt({3}, s + 1)}, s);
         }},
        {"sum/mean", [](auto s) { return gc([](const In& i) { return add(sum(i[0]), mean(i[0])); }, {randt({3, 3}, s)}, s); }},
        {"pool mean", [lens](auto s) { return gc([lens](const In& i) { return pool(i[0], Pooling::Mean, lens); }, {randt({2, 4, 3}, s)}, s); }},
        {"pool max", [lens](auto s) { return gc([lens](const In& i) { return pool(i[0], Pooling::Max, lens); }, {randt({2, 4, 3}, s)}, s); }},
        {"pool last", [lens](auto s) { return gc([lens](const In& i) { return pool(i[0], Pooling::Last, lens); }, {randt({2, 4, 3}, s)}, s); }},
        {"softmax", [](auto s) { return gc([](const In& i) { return softmax_rows(i[0]); }, {randt({3, 6}, s)}, s); }},
        {"masked softmax", [](auto s) {
             auto allow = attention_mask(1, 5, std::vector<std::size_t>{4}, true, 0);
             return gc([allow](const In& i) { return masked_softmax(i[0], allow); }, {randt({1, 2, 5, 5}, s)}, s);
         }},
        {"rotary", [](auto s) { return gc([](const In& i) { return rotary(i[0], 3); }, {randt({2, 5, 4}, s)}, s); }},
        {"fft", [](auto s) {
             return gc([](const In& i) { auto y = fft({i[0], i[1]}); return concat({y.re, y.im}, 0); }, {randt({8}, s), randt({8}, s + 1)}, s);
         }},
        {"ifft", [](auto s) {
             return gc([](const In& i) { auto y = ifft({i[0], i[1]}); return concat({y.re, y.im}, 0); }, {randt({8}, s), randt({8}, s + 1)}, s);
         }},
        {"conv_causal", [](auto s) { return gc([](const In& i) { return conv_causal(i[0], i[1]); }, {randt({5}, s), randt({5}, s + 1)}, s); }},
        {"causal_conv", [](auto s) { return gc([](const In& i) { return causal_conv(i[0], i[1]); }, {randt({2, 7, 3}, s), randt({3, 7}, s + 1)}, s); }},
        {"ssm_convolve", [](auto s) { return gc([](const In& i) { return ssm_convolve(i[0], i[1]); }, {randt({2, 6, 3}, s), randt({2, 3, 6}, s + 1)}, s); }},
        {"cross_entropy", [](auto s) {
             std::vector<std::int32_t> t{1, 0, 3, 2, 2};
             std::vector<std::uint8_t> m{1, 0, 1, 1, 0};
             return gc([t, m](const In& i) { return cross_entropy(i[0], t, m); }, {randt({5, 4}, s)}, s);
         }},
        {"l1_loss", [](auto s) {
             auto t = randv(8, s + 5);
             std::vector<std::uint8_t> m{1, 1, 0, 1};
             return gc([t, m](const In& i) { return l1_loss(i[0], t, m); }, {randt({4, 2}, s)}, s);
         }},
        {"mse_loss", [](auto s) {
             auto t = randv(8, s + 5);
             std::vector<std::uint8_t> m{1, 1, 0, 1};
             return gc([t, m](const In& i) { return mse_loss(i[0], t, m); }, {randt({4, 2}, s)}, s);
         }},
        {"attention", [](auto s) {
             auto allow = attention_mask(1, 5, std::vector<std::size_t>{5}, false, 2);
             return gc([allow](const In& i) { return attention(i[0], i[1], i[2], i[3], i[4], i[5], 2, allow, true); },
                       {randt({1, 5, 4}, s), randt({4, 4}, s + 1, 0.5), randt({4, 4}, s + 2, 0.5), randt({4, 4}, s + 3, 0.5),
                        randt({4, 4}, s + 4, 0.5), randt({4}, s + 5, 0.1)}, s);
         }},
        {"transformer block", [](auto s) {
             auto allow = attention_mask(1, 6, std::vector<std::size_t>{6}, false, 0);
             return gc([allow](const In& i) { return transformer_block(i[0], tblock(i), 2, allow, false); }, tblock_inputs(8, 16, 6, s), s);
         }},
        {"transformer block (causal, rotary)", [](auto s) {
             auto allow = attention_mask(1, 6, std::vector<std::size_t>{6}, true, 0);
             return gc([allow](const In& i) { return transformer_block(i[0], tblock(i), 2, allow, true); }, tblock_inputs(8, 16, 6, s), s);
         }},
        {"ssm block (fixed kernel)", [](auto s) {
             std::vector<std::uint8_t> valid{1, 1, 1, 1, 1, 0};
             auto in = sblock_inputs(4, 6, s);
             in.push_back(randt({2, 4, 6}, s + 40, 0.5));
             return gc([valid](const In& i) { return ssm_block(i[0], i[13], sblock(i), valid); }, in, s);
         }},
    };
    return run_cases(cases, seeds, tol);
}

std::vector<PropertyResult> verify_kernel_gradients(std::size_t seeds, double tol) {
    using In = std::vector<Tensor>;
    std::vector<GradCase> cases{
        {"dplr_kernel", [](auto s) {
             auto p = draw_stable_dplr(4, 2, 2, s);
             return gc([](const In& i) { return dplr_kernel(DplrParams{4, 2, 2, i[0], i[1], i[2], i[3], i[4], i[5]}, 16); },
                       {p.lambda.detach(), p.p.detach(), p.q.detach(), p.b.detach(), p.c.detach(), p.log_dt.detach()}, s);
         }},
        {"dplr_kernel (HiPPO init)", [](auto s) {
             auto p = init_dplr(InitKind::Structured, 4, 2, 2, s);
             return gc([](const In& i) { return dplr_kernel(DplrParams{4, 2, 2, i[0], i[1], i[2], i[3], i[4], i[5]}, 16); },
                       {p.lambda.detach(), p.p.detach(), p.q.detach(), p.b.detach(), p.c.detach(), p.log_dt.detach()}, s);
         }},
        {"dlr_kernel", [](auto s) {
             auto p = draw_stable_dlr(4, 2, 2, s);
             return gc([](const In& i) { return dlr_kernel(DlrParams{4, 2, 2, i[0], i[1]}, 16); }, {p.lambda.detach(), p.c.detach()}, s);
         }},
        {"ssm block through DPLR kernel", [](auto s) {
             const std::size_t w = 4, L = 8;
             std::vector<std::uint8_t> valid(L, 1);
             auto sp = draw_stable_dplr(4, w, 2, s);
             auto in = sblock_inputs(w, L, s);
             for (auto t : sp.tensors()) in.push_back(t.detach());
             return gc([valid](const In& t) {
                 DplrParams q{4, 4, 2, t[13], t[14], t[15], t[16], t[17], t[18]};
                 return ssm_block(t[0], dplr_kernel(q, 8), sblock(t), valid);
             }, in, s);
         }},
        {"ssm block through DLR kernel", [](auto s) {
             const std::size_t w = 4, L = 8;
             std::vector<std::uint8_t> valid(L, 1);
             auto sp = draw_stable_dlr(4, w, 2, s);
             auto in = sblock_inputs(w, L, s);
             for (auto t : sp.tensors()) in.push_back(t.detach());
             return gc([valid](const In& t) {
                 DlrParams q{4, 4, 2, t[13], t[14]};
                 return ssm_block(t[0], dlr_kernel(q, 8), sblock(t), valid);
             }, in, s);
         }},
    };
    return run_cases(cases, seeds, tol);
}

PropertyResult verify_hippo_hurwitz(const std::vector<std::size_t>& ns, double tol) {
    double worst = -std::numeric_limits<double>::infinity();
    std::string where;
    for (std::size_t n : ns) {
        auto p = init_dplr(InitKind::Structured, n, 1, 1, 0);
        Eigen::ComplexEigenSolver<CMatrix> es(dplr_assemble(p));
        const double m = es.eigenvalues().real().maxCoeff();
        if (m > worst) {
            worst = m;
            where = "N=" + std::to_string(n);
        }
    }
    return result("HiPPO A is Hurwitz", worst, tol, worst <= tol, "max Re eig at " + where);
}

std::vector<PropertyResult> verify_causality() {
    struct Variant {
        std::string name;
        Family family;
        Positional pos;
        std::size_t block;
        double tol;  // FFT convolution leaves float64 rounding noise in the past
    };
    const std::vector<Variant> variants{{"Transformer (learned)", Family::Transformer, Positional::Learned, 0, 0.0},
                                        {"Transformer (rotary)", Family::Transformer, Positional::Rotary, 0, 0.0},
                                        {"Transformer (block-local)", Family::Transformer, Positional::Rotary, 4, 0.0},
                                        {"S4", Family::S4, Positional::None, 0, 1e-12},
                                        {"DLR", Family::Dlr, Positional::None, 0, 1e-12}};
    std::vector<PropertyResult> out;
    for (const auto& v : variants) {
        ModelConfig c;
        c.family = v.family;
        c.depth = 2;
        c.width = 8;
        c.ffn = 16;
        c.heads = 2;
        c.state_size = 4;
        c.bidirectional = false;
        c.vocab_size = 12;
        c.max_len = 32;
        c.num_outputs = 3;
        c.positional = v.pos;
        c.attention_block = v.block;
        Model m(c, 5);
        const std::size_t L = 24;
        ModelInput in;
        in.batch = 1;
        in.length = L;
        in.lengths = {L};
        Rng rng(9);
        for (std::size_t t = 0; t < L; ++t) in.tokens.push_back(static_cast<std::int32_t>(rng() % 12));
        const auto base = m.forward(in).sequence_states.to_vector();
        double past = 0.0, min_future = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < L; ++t) {
            auto pert = in;
            pert.tokens[t] = (pert.tokens[t] + 5) % 12;
            const auto y = m.forward(pert).sequence_states.to_vector();
            double future = 0.0;
            for (std::size_t p = 0; p < L * 8; ++p) {
                const double d = std::abs(y[p] - base[p]);
                if (p < t * 8) past = std::max(past, d);
                else future = std::max(future, d);
            }
            min_future = std::min(min_future, future);
        }
        out.push_back(result("causality " + v.name, past, v.tol, past <= v.tol && min_future > 1e-6,
                             "smallest change at or after the perturbation " + fmt(min_future)));
    }
    return out;
}

PropertyResult verify_masked_gradients(std::size_t draws) {
    double worst = 0.0, loss_shift = 0.0;
    bool selected_nonzero = true;
    for (std::size_t d = 0; d < draws; ++d) {
        ModelConfig c;
        c.family = d % 2 ? Family::S4 : Family::Dlr;
        c.depth = 1;
        c.width = 8;
        c.ffn = 16;
        c.state_size = 4;
        c.vocab_size = 9;
        c.max_len = 40;
        Model m(c, d);
        const std::size_t L = 20 + d, B = 2;
        MaskPlan plan{0.15, 100 + d};
        ModelInput in;
        in.batch = B;
        in.length = L;
        in.lengths.assign(B, L);
        in.masked.assign(B * L, 0);
        Rng rng(d);
        for (std::size_t i = 0; i < B * L; ++i) in.tokens.push_back(static_cast<std::int32_t>(rng() % 9));
        for (std::size_t b = 0; b < B; ++b)
            for (auto p : plan.positions(L, b, 0)) in.masked[b * L + p] = 1;
        ForwardOptions fo;
        fo.classify = false;
        fo.denoise = true;
        const Tensor logits = reshape(m.forward(in, fo).denoise, {B * L, 9}).detach().set_requires_grad();
        const Tensor loss = cross_entropy(logits, in.tokens, in.masked);
        loss.backward();
        auto g = logits.grad();
        auto targets = in.tokens;
        for (std::size_t r = 0; r < B * L; ++r) {
            double n = 0.0;
            for (std::size_t v = 0; v < 9; ++v) n += std::abs(g[r * 9 + v]);
            if (in.masked[r]) selected_nonzero = selected_nonzero && n > 0.0;
            else {
                worst = std::max(worst, n);
                targets[r] = (targets[r] + 1) % 9;
            }
        }
        NoGradGuard ng;
        loss_shift = std::max(loss_shift, std::abs(cross_entropy(logits, targets, in.masked).item() - loss.item()));
    }
    const double measured = std::max(worst, loss_shift);
    return result("masked loss ignores unmasked positions", measured, 0.0, measured == 0.0 && selected_nonzero,
                  "gradient and loss change at unmasked targets");
}

PropertyResult verify_masked_count(std::size_t lo, std::size_t hi) {
    std::size_t bad = 0;
    std::string first;
    for (double r : {0.1, 0.15, 0.5}) {
        MaskPlan plan{r, 3};
        for (std::size_t L = lo; L <= hi; ++L) {
            const auto expect = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(r * static_cast<double>(L))));
            const auto pos = plan.positions(L, L, 1);
            bool ok = masked_count(L, r) == std::min(expect, L) && pos.size() == masked_count(L, r) &&
                      std::adjacent_find(pos.begin(), pos.end(), std::greater_equal<>()) == pos.end() &&
                      (pos.empty() || pos.back() < L);
            if (!ok && bad++ == 0) first = "r=" + fmt(r) + " L=" + std::to_string(L);
        }
    }
    return result("masked count rule", static_cast<double>(bad), 0.0, bad == 0,
                  bad ? "first mismatch at " + first : "L in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

PropertyResult verify_block_equals_full(double tol) {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s)
        for (std::size_t L : {1, 7, 16, 33})
            for (bool causal : {false, true}) {
                auto in = tblock_inputs(8, 16, L, 31 * s + L);
                std::vector<std::size_t> len{L};
                auto full = transformer_block(in[0], tblock(in), 2, attention_mask(1, L, len, causal, 0), true).to_vector();
                auto whole = transformer_block(in[0], tblock(in), 2, attention_mask(1, L, len, causal, L), true).to_vector();
                for (std::size_t i = 0; i < full.size(); ++i) worst = std::max(worst, std::abs(full[i] - whole[i]));
            }
    return result("block-local (block = L) equals full attention", worst, tol, worst <= tol);
}

PropertyResult verify_flip_symmetry() {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s)
        for (std::size_t L : {1, 13, 64}) {
            const std::size_t H = 3;
            auto h = randt({2, L, H}, s);
            auto k = s % 2 ? materialize(init_dlr(InitKind::Structured, 4, H, 2, s), L).values
                           : materialize(init_dplr(InitKind::Structured, 4, H, 2, s), L).values;
            auto swapped = concat({slice(k, 0, 1, 2), slice(k, 0, 0, 1)}, 0);
            auto y = ssm_convolve(h, k).to_vector();
            auto yr = flip(ssm_convolve(flip(h, 1), swapped), 1).to_vector();
            for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - yr[i]));
        }
    return result("bidirectional flip symmetry", worst, 0.0, worst == 0.0);
}

std::vector<PropertyResult> run_verification() {
    std::vector<PropertyResult> all;
    const std::vector<std::size_t> lengths{1, 8, 128, 1024};
    all.push_back(verify_scan_dplr(20, {2, 4, 8}, lengths, 1e-6));
    all.push_back(verify_scan_dlr(20, {4, 16}, lengths, 1e-6));
    for (auto& r : verify_tensor_gradients(5, 1e-4)) all.push_back(r);
    for (auto& r : verify_kernel_gradients(5, 1e-3)) all.push_back(r);
    all.push_back(verify_hippo_hurwitz({4, 8, 16, 32}, 1e-8));
    for (auto& r : verify_causality()) all.push_back(r);
    all.push_back(verify_masked_gradients(4));
    all.push_back(verify_masked_count(2, 4096));
    all.push_back(verify_block_equals_full(1e-9));
    all.push_back(verify_flip_symmetry());
    return all;
}

}  // namespace spt
