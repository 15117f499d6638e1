#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "spt/analysis.hpp"
#include "spt/error.hpp"

using namespace spt;
namespace fs = std::filesystem;

namespace {

KernelBank bank(std::size_t dirs, std::size_t h, std::size_t l, std::vector<double> v) {
    return {Tensor::from({dirs, h, l}, std::move(v)), "test"};
}

DecayProfile profile(std::vector<double> k) {
    DecayProfile p;
    p.kmax = std::move(k);
    return p;
}

}  // namespace

TEST_CASE("kmax takes the channel maximum per lag") {
    CHECK(kmax_profile(bank(1, 2, 2, {0.5, -2, 1, 0.3}), 0).kmax == std::vector<double>{1.0, 2.0});
    CHECK(kmax_profile(bank(1, 2, 3, {0, 0, 0, 0, 0, 0}), 0).kmax == std::vector<double>(3, 0.0));
    CHECK(kmax_profile(bank(1, 1, 3, {-1.5, 0.25, -0}), 0).kmax == std::vector<double>{1.5, 0.25, 0.0});
    // Both directions count, and their order does not matter.
    auto two = kmax_profile(bank(2, 1, 2, {0.1, -3, 2, 0.2}), 0).kmax;
    auto swapped = kmax_profile(bank(2, 1, 2, {2, 0.2, 0.1, -3}), 0).kmax;
    CHECK(two == std::vector<double>{2.0, 3.0});
    CHECK(two == swapped);
}

TEST_CASE("kmax ignores channel order") {
    Rng rng(1);
    std::vector<double> v(4 * 16);
    std::normal_distribution<double> n;
    for (auto& x : v) x = n(rng);
    std::vector<double> perm(v.size());
    const std::size_t order[4] = {2, 0, 3, 1};
    for (std::size_t c = 0; c < 4; ++c) std::copy_n(v.begin() + order[c] * 16, 16, perm.begin() + c * 16);
    CHECK(kmax_profile(bank(1, 4, 16, v), 0).kmax == kmax_profile(bank(1, 4, 16, perm), 0).kmax);
}

TEST_CASE("tail mass is a non-increasing fraction") {
    auto p = profile({4, 3, 2, 1, 0.5, 0});
    double prev = 1.0;
    for (std::size_t l0 = 0; l0 <= 7; ++l0) {
        double t = p.tail_mass(l0);
        CHECK(t >= 0.0);
        CHECK(t <= prev);
        prev = t;
    }
    CHECK(p.tail_mass(0) == 1.0);
    CHECK(p.tail_mass(6) == 0.0);
    CHECK(profile({0, 0, 0}).tail_mass(1) == 0.0);
}

TEST_CASE("compare_decay") {
    auto a = profile({4, 3, 2, 1});
    CHECK(compare_decay(a, a, 2) == doctest::Approx(1.0));
    CHECK(compare_decay(profile({4, 3, 0, 0}), a, 2) == 0.0);
    CHECK_THROWS_AS(compare_decay(a, profile({1, 0, 0, 0}), 2), DegenerateProfileError);
    CHECK_THROWS_AS(compare_decay(a, profile({1, 2}), 1), DimensionError);
}

TEST_CASE("structured init decays slowly, random init faster") {
    // 64 channels, so the step sizes cover their log-uniform range.
    const std::size_t L = 1024;
    for (std::uint64_t seed : {0, 1, 2, 3, 4}) {
        auto hippo = kmax_profile(materialize(init_dplr(InitKind::Structured, 32, 64, 1, seed), L), 0);
        auto random = kmax_profile(materialize(init_dlr(InitKind::Random, 32, 64, 1, seed), L), 0);
        CHECK(hippo.tail_mass(L / 2) >= 0.05);
        CHECK(random.tail_mass(L / 2) <= hippo.tail_mass(L / 2));
    }
}

TEST_CASE("csv export is deterministic and parses back exactly") {
    auto p = profile({0.1, 1.0 / 3.0, 2e-300, 0});
    CHECK(profiles_csv({p}) == "layer,lag,kmax\n0,0,0.10000000000000001\n0,1,0.33333333333333331\n0,2,2.0000000000000001e-300\n0,3,0\n");

    Rng rng(3);
    std::uniform_real_distribution<double> u(0, 10);
    std::vector<DecayProfile> ps(3);
    for (std::size_t i = 0; i < 3; ++i) {
        ps[i].layer = 2 - i;  // written out of order; export sorts by layer
        for (int l = 0; l < 50; ++l) ps[i].kmax.push_back(u(rng));
    }
    const auto text = profiles_csv(ps);
    CHECK(profiles_csv(ps) == text);
    auto back = parse_profiles_csv(text);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].layer == i);
        CHECK(back[i].kmax == ps[2 - i].kmax);
    }
    CHECK_THROWS_AS(parse_profiles_csv("layer,lag\n"), IoError);
    CHECK_THROWS_AS(parse_profiles_csv("layer,lag,kmax\n0,1,2\n"), IoError);
    CHECK_THROWS_AS(export_csv(ps, "/proc/definitely/not/here.csv"), IoError);
}

TEST_CASE("profiles from checkpoints") {
    auto dir = fs::temp_directory_path() / "spt_analysis";
    fs::create_directories(dir);
    ModelConfig cfg;
    cfg.family = Family::S4;
    cfg.depth = 2;
    cfg.width = 8;
    cfg.ffn = 16;
    cfg.state_size = 4;
    cfg.vocab_size = 10;
    Model m(cfg, 1);
    save_checkpoint((dir / "s4.ckpt").string(), cfg, m.parameters());
    auto ps = kmax_profiles((dir / "s4.ckpt").string(), 64);
    REQUIRE(ps.size() == 2);
    CHECK(ps[1].kmax == kmax_profiles(m, 64)[1].kmax);
    CHECK(kmax_profile((dir / "s4.ckpt").string(), 1, 64).kmax == ps[1].kmax);
    CHECK_THROWS_AS(kmax_profile((dir / "s4.ckpt").string(), 2, 64), UsageError);

    cfg.family = Family::Transformer;
    Model t(cfg, 1);
    save_checkpoint((dir / "tf.ckpt").string(), cfg, t.parameters());
    CHECK_THROWS_AS(kmax_profiles((dir / "tf.ckpt").string(), 64), UnsupportedFamilyError);
    CHECK_THROWS_AS(kmax_profiles(t, 64), UnsupportedFamilyError);
}
