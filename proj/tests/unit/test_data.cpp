#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "spt/data.hpp"
#include "spt/error.hpp"
#include "spt/loss.hpp"

using namespace spt;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("spt_data_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

int eval_text(const std::string& s) { return listops_eval(listops_tokenize(s)); }

std::size_t nesting(std::span<const std::int32_t> t) {
    std::size_t depth = 0, best = 0;
    for (auto x : t) {
        if (x >= listops::kMax && x <= listops::kMean) best = std::max(best, ++depth);
        if (x == listops::kClose) --depth;
    }
    return best;
}

}  // namespace

TEST_CASE("listops evaluator examples") {
    CHECK(eval_text("[MIN 2 3]") == 2);
    CHECK(eval_text("[MAX 4 3 [MIN 2 3] 1 0 [MEDIAN 1 5 8 9 2]]") == 5);
    CHECK(eval_text("[MEDIAN 1 5 8 9 2]") == 5);
    CHECK(eval_text("[SUM_MOD 9 9]") == 8);
    CHECK(eval_text("[MEDIAN 1 2 3 4]") == 2);  // lower middle
    CHECK(eval_text("[MEAN 1 2]") == 2);        // 1.5 rounds up
    CHECK(eval_text("[MEAN 1 1 2]") == 1);
    CHECK(listops_eval_stack(listops_tokenize("[MAX 4 3 [MIN 2 3] 1 0 [MEDIAN 1 5 8 9 2]]")) == 5);
    CHECK(listops_render(listops_tokenize("[MAX 4 [MIN 2 3] 1]")) == "[MAX 4 [MIN 2 3] 1]");
}

TEST_CASE("malformed listops raises ParseError with a position") {
    auto pos = [](const std::string& s, bool stack) {
        try {
            auto t = listops_tokenize(s);
            stack ? listops_eval_stack(t) : listops_eval(t);
        } catch (const ParseError& e) {
            return static_cast<long>(e.position());
        }
        return -1L;
    };
    for (bool stack : {false, true}) {
        CHECK(pos("[MAX 1 2", stack) == 3);
        CHECK(pos("[MAX ]", stack) == 1);
        CHECK(pos("[MAX 1] 2", stack) == 3);
        CHECK(pos("", stack) == 0);
    }
    CHECK(pos("[MAX 1 [FOO 2]]", false) == 2);
    CHECK(pos("1 2", false) == 0);
}

TEST_CASE("generated listops agrees with both evaluators") {
    ListOpsOptions o;
    o.n = 10000;
    o.max_len = 256;
    o.max_depth = 4;
    o.with_mean = true;
    o.seed = 3;
    auto d = listops_generate(o);
    d.validate();
    std::size_t deepest = 0;
    for (const auto& r : d.records) {
        REQUIRE(r.tokens.size() <= 256);
        CHECK(listops_eval(r.tokens) == r.label);
        CHECK(listops_eval_stack(r.tokens) == r.label);
        deepest = std::max(deepest, nesting(r.tokens));
    }
    CHECK(deepest <= 4);
    CHECK(deepest >= 3);
    CHECK(d.splits.train.size() == 8000);
}

TEST_CASE("listops regeneration is identical and seeds differ") {
    ListOpsOptions o;
    o.n = 200;
    o.seed = 9;
    auto a = listops_generate(o), b = listops_generate(o);
    CHECK(dataset_hash(a) == dataset_hash(b));
    o.seed = 10;
    CHECK(dataset_hash(listops_generate(o)) != dataset_hash(a));
    o.max_len = 7;
    CHECK_THROWS_AS(listops_generate(o), ConfigError);
}

TEST_CASE("text padding and ingestion") {
    auto p = pad_tokens(std::vector<std::int32_t>{97, 98}, 4, kBytePad);
    CHECK(p.tokens == std::vector<std::int32_t>{97, 98, kBytePad, kBytePad});
    CHECK(p.loss_mask == std::vector<std::uint8_t>{1, 1, 0, 0});

    auto dir = scratch_dir("text");
    {
        std::ofstream f(dir / "docs.txt");
        f << "0\tab\n1\tcdefgh\n\n0\tq\n";
    }
    IngestOptions io;
    io.max_len = 4;
    io.val_fraction = 0;
    io.test_fraction = 0;
    auto d = text_ingest((dir / "docs.txt").string(), io);
    REQUIRE(d.records.size() == 3);
    CHECK(d.records[0].tokens == std::vector<std::int32_t>{97, 98});
    CHECK(d.records[1].tokens.size() == 4);
    CHECK(d.num_classes == 2);
    CHECK_THROWS_AS(text_ingest((dir / "missing.txt").string(), io), IngestError);
    {
        std::ofstream f(dir / "bad.txt");
        f << "x\thello\n";
    }
    CHECK_THROWS_AS(text_ingest((dir / "bad.txt").string(), io), IngestError);
}

TEST_CASE("images flatten row-major and must be square") {
    CHECK(image_tokens({{0, 255}, {17, 3}}) == std::vector<std::int32_t>{0, 255, 17, 3});
    CHECK_THROWS_AS(image_tokens({{0, 1, 2}, {3, 4, 5}}), ShapeError);

    auto dir = scratch_dir("pgm");
    {
        std::ofstream a(dir / "a.pgm");
        a << "P2\n# two by two\n2 2\n255\n0 255\n17 3\n";
        std::ofstream b(dir / "b.pgm", std::ios::binary);
        b << "P5\n2 2\n255\n";
        b.put(static_cast<char>(9)).put(static_cast<char>(8)).put(static_cast<char>(7)).put(static_cast<char>(200));
        std::ofstream m(dir / "manifest.tsv");
        m << "0\ta.pgm\n1\tb.pgm\n";
        std::ofstream w(dir / "wide.pgm");
        w << "P2\n3 2\n255\n1 2 3\n4 5 6\n";
        std::ofstream m2(dir / "manifest2.tsv");
        m2 << "0\twide.pgm\n";
    }
    IngestOptions io;
    io.val_fraction = 0;
    io.test_fraction = 0;
    auto d = image_ingest((dir / "manifest.tsv").string(), io);
    CHECK(d.records[0].tokens == std::vector<std::int32_t>{0, 255, 17, 3});
    CHECK(d.records[1].tokens == std::vector<std::int32_t>{9, 8, 7, 200});
    CHECK_THROWS_AS(image_ingest((dir / "manifest2.tsv").string(), io), ShapeError);
    CHECK_THROWS_AS(image_ingest((dir / "none.tsv").string(), io), IngestError);
}

TEST_CASE("synthetic images are separable by nearest centroid on 8x8") {
    SyntheticImageOptions o;
    o.n = 2000;
    o.side = 8;
    o.seed = 1;
    auto d = synthetic_images(o);
    d.validate();
    const std::size_t px = 64;
    std::vector<std::vector<double>> centroid(o.classes, std::vector<double>(px, 0.0));
    std::vector<double> count(o.classes, 0.0);
    for (auto i : d.splits.train) {
        const auto& r = d.records[i];
        for (std::size_t k = 0; k < px; ++k) centroid[static_cast<std::size_t>(r.label)][k] += r.tokens[k];
        count[static_cast<std::size_t>(r.label)] += 1;
    }
    for (std::size_t c = 0; c < o.classes; ++c)
        for (auto& v : centroid[c]) v /= std::max(count[c], 1.0);
    std::size_t correct = 0;
    for (auto i : d.splits.test) {
        const auto& r = d.records[i];
        std::size_t best = 0;
        double bestd = 1e300;
        for (std::size_t c = 0; c < o.classes; ++c) {
            double dist = 0;
            for (std::size_t k = 0; k < px; ++k) dist += (r.tokens[k] - centroid[c][k]) * (r.tokens[k] - centroid[c][k]);
            if (dist < bestd) bestd = dist, best = c;
        }
        correct += best == static_cast<std::size_t>(r.label);
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(d.splits.test.size());
    MESSAGE("centroid accuracy " << acc);
    CHECK(acc >= 0.70);
}

TEST_CASE("synthetic retrieval: keys, distance, balance and Bayes accuracy") {
    RetrievalOptions o;
    o.n = 2000;
    o.length = 64;
    o.key_distance = 20;
    auto d = synthetic_retrieval(o);
    d.validate();
    std::size_t ones = 0;
    for (const auto& r : d.records) {
        CHECK(retrieval_label(r.tokens) == r.label);
        std::vector<std::size_t> at;
        for (std::size_t t = 0; t < r.tokens.size(); ++t)
            if (r.tokens[t] >= 8) at.push_back(t);
        REQUIRE(at.size() == 2);
        CHECK(at[1] - at[0] == 20);
        ones += static_cast<std::size_t>(r.label);
    }
    CHECK(std::abs(static_cast<double>(ones) / 2000.0 - 0.5) < 0.05);
    o.key_distance = 0;
    auto local = synthetic_retrieval(o);
    for (const auto& r : local.records) {
        std::size_t first = 0;
        while (local.records.front().tokens.size() > first && r.tokens[first] < 8) ++first;
        CHECK(r.tokens[first + 1] >= 8);
    }
    o.key_distance = 64;
    CHECK_THROWS_AS(synthetic_retrieval(o), ConfigError);
}

TEST_CASE("continuous and local text generators") {
    ContinuousOptions c;
    c.n = 50;
    c.length = 32;
    c.input_dim = 2;
    auto d = synthetic_continuous(c);
    d.validate();
    CHECK(d.records[0].values.size() == 64);
    CHECK(d.length(0) == 32);
    c.classes = 0;
    auto reg = synthetic_continuous(c);
    CHECK(reg.regression());
    CHECK(reg.records[3].target.size() == 1);

    LocalTextOptions t;
    t.n = 20;
    t.length = 64;
    t.window = 6;
    t.resample = 0.0;
    auto lt = synthetic_local_text(t);
    lt.validate();
    for (const auto& r : lt.records)
        for (std::size_t i = 6; i < r.tokens.size(); ++i) CHECK(r.tokens[i] == r.tokens[i - 6]);

    // With redraws, agreement at lag k·window falls off like (1 − p)^k
    // (plus the 1/16 chance of a matching redraw).
    t.n = 400;
    t.length = 128;
    t.window = 4;
    t.resample = 0.4;
    auto noisy = synthetic_local_text(t);
    auto agree = [&](std::size_t lag) {
        double same = 0, total = 0;
        for (const auto& r : noisy.records)
            for (std::size_t i = lag; i < r.tokens.size(); ++i) {
                same += r.tokens[i] == r.tokens[i - lag];
                ++total;
            }
        return same / total;
    };
    auto expected = [](std::size_t k) { const double q = std::pow(0.6, k); return q + (1 - q) / 16.0; };
    CHECK(agree(4) == doctest::Approx(expected(1)).epsilon(0.03));
    CHECK(agree(8) == doctest::Approx(expected(2)).epsilon(0.05));
    CHECK(agree(3) == doctest::Approx(1.0 / 16).epsilon(0.15));
    CHECK(agree(40) < 0.08);
}

TEST_CASE("subset_sample sizes, nesting and determinism") {
    std::vector<std::size_t> pool(1000);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i * 3;
    auto subs = subset_sample(pool, kDefaultFractions, 7);
    std::vector<std::size_t> sizes;
    for (const auto& s : subs) sizes.push_back(s.size());
    CHECK(sizes == std::vector<std::size_t>{5, 10, 50, 100, 500, 1000});
    for (std::size_t k = 0; k + 1 < subs.size(); ++k)
        CHECK(std::includes(subs[k + 1].begin(), subs[k + 1].end(), subs[k].begin(), subs[k].end()));
    CHECK(subset_sample(pool, kDefaultFractions, 7) == subs);
    CHECK(subset_sample(pool, kDefaultFractions, 8) != subs);
    CHECK_THROWS_AS(subset_sample(std::vector<std::size_t>(100), {0.001}, 1), ConfigError);
}

TEST_CASE("masked count rule and plan invariants") {
    CHECK(masked_count(10, 0.15) == 2);
    CHECK(masked_count(4, 0.5) == 2);
    CHECK(masked_count(5, 0.1) == 1);
    MaskPlan plan{0.15, 4};
    for (double ratio : {0.1, 0.15, 0.5}) {
        plan.ratio = ratio;
        for (std::size_t L = 2; L <= 4096; ++L) {
            // floor(x + 1/2) in exact integer arithmetic for ratio = num/den.
            const std::size_t den = 100, num = static_cast<std::size_t>(std::lround(ratio * 100));
            const std::size_t want = std::max<std::size_t>(1, (2 * num * L + den) / (2 * den));
            REQUIRE(masked_count(L, ratio) == want);
            if (L % 97 == 2 || L < 40) {
                auto pos = plan.positions(L, L);
                CHECK(pos.size() == want);
                CHECK(std::is_sorted(pos.begin(), pos.end()));
                CHECK(std::adjacent_find(pos.begin(), pos.end()) == pos.end());
                CHECK(pos.back() < L);
            }
        }
    }
    CHECK(plan.positions(50, 3, 0) == plan.positions(50, 3, 0));
    CHECK(plan.positions(50, 3, 0) != plan.positions(50, 3, 1));
}

TEST_CASE("mask_apply replaces exactly the planned positions") {
    std::vector<std::int32_t> toks{5, 6, 7, 8, 9};
    auto m = mask_apply(toks, {}, 1, {1, 3}, 99);
    CHECK(m.tokens == std::vector<std::int32_t>{5, 99, 7, 99, 9});
    CHECK(m.target_tokens == std::vector<std::int32_t>{6, 8});
    CHECK(m.masked == std::vector<std::uint8_t>{0, 1, 0, 1, 0});
    CHECK_THROWS_AS(mask_apply(toks, {}, 1, {5}, 99), UsageError);

    std::vector<double> vals{1, 2, 3, 4, 5, 6};  // L=3, dim=2
    auto mc = mask_apply({}, vals, 2, {2}, -1);
    CHECK(mc.target_values == std::vector<double>{5, 6});
    // A perfect reconstruction has zero loss.
    auto pred = Tensor::from({1, 2}, mc.target_values);
    std::vector<std::uint8_t> sel{1};
    CHECK(l1_loss(pred, mc.target_values, sel).item() == 0.0);
}

TEST_CASE("batches pad to the longest sequence and hide labels in views") {
    ListOpsOptions o;
    o.n = 30;
    auto d = listops_generate(o);
    std::vector<std::size_t> idx{0, 1, 2};
    auto b = make_batch(d, idx, 8);
    std::size_t longest = 0;
    for (auto i : idx) longest = std::max(longest, d.records[i].tokens.size());
    CHECK(b.input.length % 8 == 0);
    CHECK(b.input.length >= longest);
    CHECK(b.input.lengths[1] == d.records[1].tokens.size());
    CHECK(b.input.tokens[b.input.length - 1] == listops::kPad);
    CHECK(b.labels.size() == 3);

    UnlabeledView view(d, d.splits.train);
    CHECK_THROWS_AS(view.label(0), ProtocolError);
    CHECK_THROWS_AS(view.target(0), ProtocolError);
    std::vector<std::size_t> rows{0, 1};
    auto ub = make_batch(view, rows);
    CHECK(ub.labels.empty());
    CHECK(ub.input.batch == 2);
}

TEST_CASE("dataset cache round trip and content hash") {
    CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
    ListOpsOptions o;
    o.n = 100;
    auto d = listops_generate(o);
    auto dir = scratch_dir("cache");
    save_dataset(d, dir.string());
    auto back = load_dataset(dir.string());
    CHECK(dataset_hash(back) == dataset_hash(d));
    CHECK(back.records[17].tokens == d.records[17].tokens);
    CHECK(back.splits.test == d.splits.test);

    ContinuousOptions c;
    c.n = 20;
    c.classes = 0;
    auto cd = synthetic_continuous(c);
    auto cdir = scratch_dir("cache_cont");
    save_dataset(cd, cdir.string());
    CHECK(load_dataset(cdir.string()).records[5].values == cd.records[5].values);

    {
        std::ofstream f(dir / "val.jsonl", std::ios::app);
        f << "{\"i\": 0, \"x\": [10, 1, 2, 15], \"y\": 2}\n";
    }
    CHECK_THROWS_AS(load_dataset(dir.string()), Error);
    CHECK_THROWS_AS(load_dataset((dir / "nope").string()), MissingArtifactError);
}
