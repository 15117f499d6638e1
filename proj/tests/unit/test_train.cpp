#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "spt/error.hpp"
#include "spt/loss.hpp"
#include "spt/train.hpp"

using namespace spt;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("spt_train_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

ModelConfig small_model(const TaskDataset& data, Family f = Family::Dlr, bool bidirectional = true) {
    ModelConfig cfg;
    cfg.family = f;
    cfg.depth = 1;
    cfg.width = 16;
    cfg.ffn = 32;
    cfg.heads = 2;
    cfg.state_size = 8;
    cfg.bidirectional = bidirectional;
    fit_model_to_data(cfg, data);
    return cfg;
}

TaskDataset small_listops(std::size_t n = 200) {
    ListOpsOptions o;
    o.n = n;
    o.max_len = 48;
    o.max_depth = 2;
    o.seed = 3;
    return listops_generate(o);
}

TrainPlan quick_plan(const ModelConfig& cfg) {
    TrainPlan p;
    p.model = cfg;
    p.objective = cfg.bidirectional ? Objective::Masked : Objective::Causal;
    p.pretrain.epochs = 1;
    p.finetune.epochs = 1;
    p.pretrain.batch_size = p.finetune.batch_size = 16;
    return p;
}

}  // namespace

TEST_CASE("plan validation ties objective to direction") {
    auto data = small_listops(20);
    TrainPlan p = quick_plan(small_model(data));
    p.objective = Objective::Causal;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p.objective = Objective::Masked;
    p.validate();
    p.mask_ratio = 1.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p.model.bidirectional = false;
    p.mask_ratio = 0.1;
    CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("plan JSON round trip and unknown keys") {
    auto data = small_listops(20);
    TrainPlan p = quick_plan(small_model(data));
    p.mask_ratio = 0.1;
    p.seeds = {1, 2, 3};
    p.finetune.lr = 5e-4;
    TrainPlan q = train_plan_from_json(to_json(p), p.model);
    CHECK(to_json(q) == to_json(p));
    try {
        train_plan_from_json({{"finetune", {{"learning_rate", 1}}}}, p.model);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("train.finetune.learning_rate") != std::string::npos);
    }
    CHECK_THROWS_AS(train_plan_from_json({{"epochs", -1}}, p.model), ConfigError);
    CHECK_THROWS_AS(train_plan_from_json({{"pretrain", {{"epochs", -1}}}}, p.model), ConfigError);
}

TEST_CASE("label normalization round trip") {
    ContinuousOptions o;
    o.n = 50;
    o.length = 16;
    o.classes = 0;
    auto data = synthetic_continuous(o);
    auto norm = LabelNormalizer::fit(data, data.splits.train);
    std::vector<double> t;
    for (auto i : data.splits.train) t.push_back(data.records[i].target[0]);
    const auto orig = t;
    norm.normalize(t);
    for (double v : t) {
        CHECK(v >= -1.0 - 1e-12);
        CHECK(v <= 1.0 + 1e-12);
    }
    norm.denormalize(t);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(t[i] - orig[i]) <= 1e-12);
    CHECK_THROWS_AS(LabelNormalizer::fit(small_listops(20), {0}), UsageError);
}

TEST_CASE("causal denoising loss at initialization is near ln V") {
    auto data = small_listops(100);
    ModelConfig cfg = small_model(data, Family::Dlr, false);
    Model m(cfg, 1);
    UnlabeledView view(data, data.splits.train);
    auto r = evaluate_denoising(m, view, Objective::Causal, 0.1, 0, 32);
    CHECK(r.loss == doctest::Approx(std::log(static_cast<double>(data.vocab_size()))).epsilon(0.03));
    auto masked = evaluate_denoising(Model(small_model(data), 1), view, Objective::Masked, 0.1, 0, 32);
    CHECK(masked.loss == doctest::Approx(std::log(static_cast<double>(data.vocab_size()))).epsilon(0.03));
}

TEST_CASE("masked loss has zero gradient at unmasked positions") {
    Rng rng(5);
    const std::size_t L = 40, V = 9;
    Tensor logits = Tensor::randn({L, V}, 1.0, rng).set_requires_grad();
    MaskPlan plan{0.15, 11};
    auto pos = plan.positions(L, 0, 0);
    std::vector<std::uint8_t> sel(L, 0);
    for (auto p : pos) sel[p] = 1;
    std::vector<std::int32_t> targets(L);
    for (auto& t : targets) t = static_cast<std::int32_t>(rng() % V);
    cross_entropy(logits, targets, sel).backward();
    auto g = logits.grad();
    for (std::size_t r = 0; r < L; ++r) {
        double norm = 0.0;
        for (std::size_t v = 0; v < V; ++v) norm += std::abs(g[r * V + v]);
        if (sel[r])
            CHECK(norm > 0.0);
        else
            CHECK(norm == 0.0);
    }
}

TEST_CASE("masked denoising scores exactly the masked positions") {
    auto data = small_listops(30);
    Model m(small_model(data), 2);
    UnlabeledView view(data, data.splits.train);
    std::vector<std::size_t> rows{0, 1, 2};
    std::size_t correct = 0, targets = 0;
    denoising_loss(m, view, rows, Objective::Masked, MaskPlan{0.1, 7}, 1, {}, 1, &correct, &targets);
    std::size_t expect = 0;
    for (auto r : rows) expect += masked_count(view.length(r), 0.1);
    CHECK(targets == expect);
}

TEST_CASE("pretraining never reads labels") {
    auto data = small_listops(40);
    UnlabeledView view(data, data.splits.train);
    CHECK_THROWS_AS(view.label(0), ProtocolError);
    Model m(small_model(data), 0);
    TrainPlan p = quick_plan(m.config());
    // Records carry labels, but the pretrain path only sees the view.
    auto rec = pretrain(m, p, 0, view, UnlabeledView(data, data.splits.val));
    CHECK(rec.phase == "pretrain");
    CHECK(rec.epochs.size() == 1);
    CHECK_FALSE(rec.test.has_value());
    p.objective = Objective::Supervised;
    CHECK_THROWS_AS(pretrain(m, p, 0, view, view), ConfigError);
}

TEST_CASE("zero-epoch finetune stays at chance") {
    RetrievalOptions o;
    o.n = 600;
    o.length = 32;
    o.key_distance = 8;
    o.test_fraction = 0.5;
    auto data = synthetic_retrieval(o);
    ModelConfig cfg = small_model(data);
    Model m(cfg, 4);
    TrainPlan p = quick_plan(cfg);
    p.finetune.epochs = 0;
    auto rec = finetune(m, p, 4, data, data.splits.train);
    CHECK(rec.epochs.empty());
    CHECK(rec.best_epoch == 0);
    REQUIRE(rec.test.has_value());
    CHECK(rec.test->count == data.splits.test.size());
    CHECK(std::abs(rec.test->metric - 0.5) < 0.08);
}

TEST_CASE("identical seeds give identical records and paired batch orders") {
    auto data = small_listops(120);
    TrainPlan p = quick_plan(small_model(data));
    p.finetune.epochs = 2;
    auto a = train_scratch(p, 9, data, data.splits.train);
    auto b = train_scratch(p, 9, data, data.splits.train);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.to_json().dump() == b.to_json().dump());
    auto c = train_scratch(p, 10, data, data.splits.train);
    CHECK(c.to_json() != a.to_json());

    // A fresh model finetuned with the same seed follows the scratch run
    // exactly when its trunk matches the scratch init.
    Model fresh(p.model, derive_seed(9, "init"));
    auto f = finetune(fresh, p, 9, data, data.splits.train);
    CHECK(f.epochs.size() == a.epochs.size());
    for (std::size_t i = 0; i < f.epochs.size(); ++i) CHECK(f.epochs[i].train_loss == a.epochs[i].train_loss);
}

TEST_CASE("run record persistence") {
    auto dir = scratch_dir("record");
    auto data = small_listops(60);
    TrainPlan p = quick_plan(small_model(data));
    auto rec = train_scratch(p, 1, data, data.splits.train, {dir.string()});
    CHECK(fs::exists(dir / "run_record.json"));
    CHECK(fs::exists(dir / "run_timing.json"));
    CHECK(fs::exists(dir / "best.ckpt"));
    CHECK(fs::exists(dir / "last.ckpt"));
    auto back = load_run_record((dir / "run_record.json").string());
    CHECK(back.to_json() == rec.to_json());
    CHECK(back.dataset_hash == dataset_hash(data));
    CHECK_THROWS_AS(load_run_record((dir / "nope.json").string()), MissingArtifactError);
}

TEST_CASE("resume reproduces the next epoch") {
    auto data = small_listops(120);
    TrainPlan p = quick_plan(small_model(data));
    p.finetune.epochs = 3;
    p.model.dropout = 0.1;
    auto full = train_scratch(p, 5, data, data.splits.train);
    REQUIRE(full.epochs.size() == 3);

    auto dir = scratch_dir("resume");
    auto first = train_scratch(p, 5, data, data.splits.train, {dir.string(), false, 1});
    CHECK(first.epochs.size() == 1);
    auto rest = train_scratch(p, 5, data, data.splits.train, {dir.string(), true, 0});
    REQUIRE(rest.epochs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(rest.epochs[i].train_loss - full.epochs[i].train_loss) <= 1e-6);
        CHECK(std::abs(rest.epochs[i].val_loss - full.epochs[i].val_loss) <= 1e-6);
    }
    CHECK(rest.best_epoch == full.best_epoch);
}

TEST_CASE("checkpoint trunk must match the model") {
    auto dir = scratch_dir("compat");
    auto data = small_listops(40);
    ModelConfig cfg = small_model(data);
    Model m(cfg, 0);
    save_checkpoint((dir / "m.ckpt").string(), cfg, m.parameters());
    Model same = model_from_checkpoint((dir / "m.ckpt").string(), cfg, 1);
    CHECK(serialize_parameters({same.parameters().front()}) == serialize_parameters({m.parameters().front()}));
    ModelConfig other = cfg;
    other.width = 24;
    CHECK_THROWS_AS(model_from_checkpoint((dir / "m.ckpt").string(), other, 1), IncompatibleError);
    other = cfg;
    other.num_outputs = 3;  // a different task head is fine
    CHECK_NOTHROW(model_from_checkpoint((dir / "m.ckpt").string(), other, 1));
}

TEST_CASE("regression finetune with label normalization") {
    ContinuousOptions o;
    o.n = 200;
    o.length = 24;
    o.classes = 0;
    auto data = synthetic_continuous(o);
    ModelConfig cfg = small_model(data);
    TrainPlan p = quick_plan(cfg);
    p.normalize_labels = true;
    p.finetune.epochs = 3;
    auto rec = train_scratch(p, 0, data, data.splits.train);
    REQUIRE(rec.test.has_value());
    CHECK(std::isfinite(rec.test->metric));
    CHECK(rec.test->metric <= 1.0);
}

TEST_CASE("masked SPT learns a fully determined local task") {
    LocalTextOptions o;
    o.n = 256;
    o.length = 64;
    o.window = 8;
    o.resample = 0.0;
    o.seed = 1;
    auto data = synthetic_local_text(o);
    ModelConfig cfg;
    cfg.family = Family::Dlr;
    cfg.depth = 2;
    cfg.width = 32;
    cfg.ffn = 64;
    cfg.state_size = 16;
    fit_model_to_data(cfg, data);
    Model m(cfg, 0);
    TrainPlan p;
    p.model = cfg;
    p.mask_ratio = 0.15;
    p.pretrain.epochs = 40;
    p.pretrain.batch_size = 16;
    p.pretrain.lr = 5e-3;
    p.pretrain.ssm_lr = 5e-3;
    UnlabeledView train(data, data.splits.train), val(data, data.splits.val);
    auto rec = pretrain(m, p, 0, train, val);
    const auto r = evaluate_denoising(m, UnlabeledView(data, data.splits.test), Objective::Masked, 0.15, 99, 64);
    MESSAGE("denoising accuracy " << r.metric << " after " << rec.epochs.size() << " epochs");
    CHECK(r.metric >= 0.99);
}

TEST_CASE("retrieval stays at chance below the key distance") {
    RetrievalOptions o;
    o.n = 3000;
    o.length = 48;
    o.key_distance = 16;
    o.val_fraction = 0.1;
    o.test_fraction = 0.3;
    o.seed = 2;
    auto data = synthetic_retrieval(o);
    ModelConfig cfg;
    cfg.family = Family::Transformer;
    cfg.depth = 1;
    cfg.width = 32;
    cfg.ffn = 64;
    cfg.heads = 2;
    cfg.positional = Positional::Learned;
    cfg.attention_block = 4;  // keys at most 7 positions away
    fit_model_to_data(cfg, data);
    TrainPlan p;
    p.model = cfg;
    p.finetune.epochs = 8;
    p.finetune.lr = 3e-3;
    auto rec = train_scratch(p, 0, data, data.splits.train);
    MESSAGE("local attention retrieval accuracy " << rec.test->metric);
    CHECK(rec.test->metric <= 0.55);

    // Same budget with full attention: the task itself is learnable.
    p.model.attention_block = 0;
    p.finetune.epochs = 12;
    p.model.depth = 2;
    auto full = train_scratch(p, 0, data, data.splits.train);
    MESSAGE("full attention retrieval accuracy " << full.test->metric);
    CHECK(full.test->metric > 0.9);
}
