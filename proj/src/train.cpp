#include "spt/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>

#include "spt/error.hpp"
#include "spt/loss.hpp"
#include "spt/optim.hpp"

namespace spt {

namespace fs = std::filesystem;

std::string to_string(Objective o) {
    switch (o) {
        case Objective::Causal: return "causal";
        case Objective::Masked: return "masked";
        case Objective::Supervised: return "supervised";
    }
    return "?";
}

Objective parse_objective(const std::string& s) {
    for (auto o : {Objective::Causal, Objective::Masked, Objective::Supervised})
        if (to_string(o) == s) return o;
    throw ConfigError("unknown objective '" + s + "' (causal | masked | supervised)");
}

void TrainPlan::validate() const {
    model.validate();
    if (objective == Objective::Masked && !model.bidirectional)
        throw ConfigError("train.objective: masked pretraining needs a bidirectional model");
    if (objective == Objective::Causal && model.bidirectional)
        throw ConfigError("train.objective: causal pretraining needs a unidirectional model");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("train.mask_ratio must lie in (0, 1)");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw ConfigError("train.data_fraction must lie in (0, 1]");
    if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
    for (const auto* p : {&pretrain, &finetune}) {
        if (p->batch_size == 0 || p->eval_batch_size == 0) throw ConfigError("train: batch sizes must be positive");
        if (p->lr < 0 || p->ssm_lr < 0 || p->weight_decay < 0) throw ConfigError("train: rates must be non-negative");
        if (p->warmup_fraction < 0 || p->warmup_fraction >= 1) throw ConfigError("train: warmup_fraction must lie in [0, 1)");
    }
}

nlohmann::json to_json(const PhaseSettings& p) {
    return {{"epochs", p.epochs},       {"steps", p.steps},
            {"batch_size", p.batch_size}, {"lr", p.lr},
            {"ssm_lr", p.ssm_lr},       {"weight_decay", p.weight_decay},
            {"warmup_fraction", p.warmup_fraction}, {"grad_clip", p.grad_clip},
            {"patience", p.patience},   {"eval_batch_size", p.eval_batch_size},
            {"eval_every", p.eval_every}};
}

nlohmann::json to_json(const TrainPlan& p) {
    return {{"objective", to_string(p.objective)},
            {"mask_ratio", p.mask_ratio},
            {"pretrain", to_json(p.pretrain)},
            {"finetune", to_json(p.finetune)},
            {"normalize_labels", p.normalize_labels},
            {"seeds", p.seeds},
            {"data_fraction", p.data_fraction},
            {"precision", p.precision == Precision::Float64 ? "float64" : "float32"},
            {"pad_multiple", p.pad_multiple}};
}

namespace {

template <class T>
T get_as(const nlohmann::json& v, const std::string& path) {
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(path + ": wrong type (" + std::string(v.type_name()) + ")");
    }
}

std::size_t get_count(const nlohmann::json& v, const std::string& path) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(path + ": expected a non-negative integer");
    return v.get<std::size_t>();
}

}  // namespace

PhaseSettings phase_from_json(const nlohmann::json& j, const std::string& path, PhaseSettings p) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string k = it.key(), at = path + "." + k;
        const auto& v = it.value();
        if (k == "epochs") p.epochs = get_count(v, at);
        else if (k == "steps") p.steps = get_count(v, at);
        else if (k == "batch_size") p.batch_size = get_count(v, at);
        else if (k == "lr") p.lr = get_as<double>(v, at);
        else if (k == "ssm_lr") p.ssm_lr = get_as<double>(v, at);
        else if (k == "weight_decay") p.weight_decay = get_as<double>(v, at);
        else if (k == "warmup_fraction") p.warmup_fraction = get_as<double>(v, at);
        else if (k == "grad_clip") p.grad_clip = get_as<double>(v, at);
        else if (k == "patience") p.patience = get_count(v, at);
        else if (k == "eval_batch_size") p.eval_batch_size = get_count(v, at);
        else if (k == "eval_every") p.eval_every = std::max<std::size_t>(1, get_count(v, at));
        else throw ConfigError(at + ": unknown key");
    }
    return p;
}

TrainPlan train_plan_from_json(const nlohmann::json& j, const ModelConfig& model, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    TrainPlan p;
    p.model = model;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string k = it.key(), at = path + "." + k;
        const auto& v = it.value();
        if (k == "objective") p.objective = parse_objective(get_as<std::string>(v, at));
        else if (k == "mask_ratio") p.mask_ratio = get_as<double>(v, at);
        else if (k == "pretrain") p.pretrain = phase_from_json(v, at, p.pretrain);
        else if (k == "finetune") p.finetune = phase_from_json(v, at, p.finetune);
        else if (k == "normalize_labels") p.normalize_labels = get_as<bool>(v, at);
        else if (k == "seeds") p.seeds = get_as<std::vector<std::uint64_t>>(v, at);
        else if (k == "data_fraction") p.data_fraction = get_as<double>(v, at);
        else if (k == "precision") {
            const auto s = get_as<std::string>(v, at);
            if (s == "float64") p.precision = Precision::Float64;
            else if (s == "float32") p.precision = Precision::Float32;
            else throw ConfigError(at + ": expected float64 or float32");
        } else if (k == "pad_multiple") p.pad_multiple = std::max<std::size_t>(1, get_count(v, at));
        else throw ConfigError(at + ": unknown key");
    }
    p.validate();
    return p;
}

// ---- labels ----

LabelNormalizer LabelNormalizer::fit(const TaskDataset& data, const std::vector<std::size_t>& indices) {
    if (!data.regression()) throw UsageError("label normalization applies to regression tasks only");
    LabelNormalizer n;
    n.lo.assign(data.target_dim, std::numeric_limits<double>::infinity());
    n.hi.assign(data.target_dim, -std::numeric_limits<double>::infinity());
    for (auto i : indices)
        for (std::size_t d = 0; d < data.target_dim; ++d) {
            n.lo[d] = std::min(n.lo[d], data.records[i].target[d]);
            n.hi[d] = std::max(n.hi[d], data.records[i].target[d]);
        }
    for (std::size_t d = 0; d < data.target_dim; ++d)
        if (!(n.hi[d] > n.lo[d])) {
            // Constant targets: map to 0 with unit scale.
            n.lo[d] = std::isfinite(n.lo[d]) ? n.lo[d] - 1.0 : -1.0;
            n.hi[d] = n.lo[d] + 2.0;
        }
    return n;
}

void LabelNormalizer::normalize(std::vector<double>& t) const {
    const std::size_t D = lo.size();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 2.0 * (t[i] - lo[i % D]) / (hi[i % D] - lo[i % D]) - 1.0;
}

void LabelNormalizer::denormalize(std::vector<double>& t) const {
    const std::size_t D = lo.size();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (t[i] + 1.0) * 0.5 * (hi[i % D] - lo[i % D]) + lo[i % D];
}

// ---- records ----

nlohmann::json RunRecord::to_json() const {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : epochs)
        ep.push_back({{"epoch", e.epoch},
                      {"steps", e.steps},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss},
                      {"val_metric", e.val_metric}});
    nlohmann::json j{{"phase", phase},
                     {"seed", seed},
                     {"config", config},
                     {"dataset_hash", dataset_hash},
                     {"epochs", ep},
                     {"best_epoch", best_epoch},
                     {"best_checkpoint", best_checkpoint},
                     {"selection_metric", selection_metric},
                     {"best_val_metric", best_val_metric},
                     {"train_records", train_records},
                     {"total_steps", total_steps}};
    if (test) j["test"] = {{"loss", test->loss}, {"metric", test->metric}, {"count", test->count}};
    return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    try {
        r.phase = j.at("phase");
        r.seed = j.at("seed");
        r.config = j.at("config");
        r.dataset_hash = j.at("dataset_hash");
        for (const auto& e : j.at("epochs"))
            r.epochs.push_back({e.at("epoch"), e.at("steps"), e.at("train_loss"), e.at("val_loss"), e.at("val_metric")});
        r.best_epoch = j.at("best_epoch");
        r.best_checkpoint = j.at("best_checkpoint");
        r.selection_metric = j.at("selection_metric");
        r.best_val_metric = j.at("best_val_metric");
        r.train_records = j.at("train_records");
        r.total_steps = j.at("total_steps");
        if (j.contains("test")) r.test = EvalResult{j["test"].at("loss"), j["test"].at("metric"), j["test"].at("count")};
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed run record: ") + e.what());
    }
    return r;
}

namespace {

void write_atomic(const fs::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

}  // namespace

void save_run_record(const RunRecord& r, const std::string& path) {
    write_atomic(path, r.to_json().dump(2) + "\n");
    const fs::path timing = fs::path(path).parent_path() / "run_timing.json";
    write_atomic(timing, nlohmann::json{{"phase", r.phase}, {"wall_seconds", r.wall_seconds}}.dump(2) + "\n");
}

RunRecord load_run_record(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("run record " + path + " not found");
    try {
        return RunRecord::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(path + ": " + e.what());
    }
}

// ---- losses and evaluation ----

namespace {

std::size_t argmax_row(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct DenoiseBatch {
    ModelInput input;
    std::vector<std::int32_t> target_tokens;  // [B*L]
    std::vector<double> target_values;        // [B*L*D]
    std::vector<std::uint8_t> select;         // [B*L]
};

DenoiseBatch denoise_batch(const UnlabeledView& view, std::span<const std::size_t> rows, Objective objective,
                           const MaskPlan& plan, std::uint64_t epoch, std::size_t pad_multiple) {
    const TaskDataset& meta = view.meta();
    DenoiseBatch d;
    d.input = make_batch(view, rows, pad_multiple).input;
    const std::size_t B = d.input.batch, L = d.input.length, D = meta.input_dim;
    d.select.assign(B * L, 0);
    if (meta.continuous())
        d.target_values.assign(B * L * D, 0.0);
    else
        d.target_tokens.assign(B * L, 0);
    if (objective == Objective::Masked) {
        d.input.masked.assign(B * L, 0);
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t len = d.input.lengths[b];
            for (auto p : plan.positions(len, view.index(rows[b]), epoch)) {
                d.input.masked[b * L + p] = 1;
                d.select[b * L + p] = 1;
            }
        }
        if (meta.continuous())
            d.target_values = d.input.values;
        else
            d.target_tokens = d.input.tokens;
    } else if (objective == Objective::Causal) {
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t len = d.input.lengths[b];
            for (std::size_t t = 0; t + 1 < len; ++t) {
                d.select[b * L + t] = 1;
                if (meta.continuous())
                    for (std::size_t c = 0; c < D; ++c)
                        d.target_values[(b * L + t) * D + c] = d.input.values[(b * L + t + 1) * D + c];
                else
                    d.target_tokens[b * L + t] = d.input.tokens[b * L + t + 1];
            }
        }
        bool any = std::any_of(d.select.begin(), d.select.end(), [](auto v) { return v != 0; });
        if (!any) throw NumericError("causal objective needs sequences of length ≥ 2");
    } else {
        throw UsageError("denoising needs a causal or masked objective");
    }
    return d;
}

}  // namespace

Tensor denoising_loss(const Model& model, const UnlabeledView& view, std::span<const std::size_t> rows,
                      Objective objective, const MaskPlan& plan, std::uint64_t epoch, const ForwardOptions& fo,
                      std::size_t pad_multiple, std::size_t* correct, std::size_t* targets) {
    DenoiseBatch d = denoise_batch(view, rows, objective, plan, epoch, pad_multiple);
    ForwardOptions opts = fo;
    opts.classify = false;
    opts.denoise = true;
    ModelOutput out = model.forward(d.input, opts);
    const std::size_t rows_n = d.input.batch * d.input.length;
    const std::size_t width = out.denoise.size(-1);
    Tensor pred = reshape(out.denoise, {rows_n, width});
    Tensor loss = view.meta().continuous() ? l1_loss(pred, d.target_values, d.select)
                                           : cross_entropy(pred, d.target_tokens, d.select);
    if (correct && targets && !view.meta().continuous()) {
        auto pv = pred.data();
        for (std::size_t r = 0; r < rows_n; ++r) {
            if (!d.select[r]) continue;
            ++*targets;
            *correct += argmax_row(pv.subspan(r * width, width)) == static_cast<std::size_t>(d.target_tokens[r]);
        }
    }
    return loss;
}

EvalResult evaluate_denoising(const Model& model, const UnlabeledView& view, Objective objective, double mask_ratio,
                              std::uint64_t mask_seed, std::size_t batch_size, std::size_t pad_multiple) {
    NoGradGuard guard;
    EvalResult r;
    MaskPlan plan{mask_ratio, mask_seed};
    double loss_sum = 0.0;
    std::size_t correct = 0, targets = 0, batches = 0;
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < view.size(); start += batch_size) {
        rows.clear();
        for (std::size_t i = start; i < std::min(view.size(), start + batch_size); ++i) rows.push_back(i);
        const Tensor l = denoising_loss(model, view, rows, objective, plan, 0, {}, pad_multiple, &correct, &targets);
        // Weighted by batch size so the result does not depend on batching.
        loss_sum += l.item() * static_cast<double>(rows.size());
        ++batches;
    }
    r.count = view.size();
    r.loss = r.count ? loss_sum / static_cast<double>(r.count) : 0.0;
    r.metric = view.meta().continuous() ? -r.loss
                                        : (targets ? static_cast<double>(correct) / static_cast<double>(targets) : 0.0);
    return r;
}

EvalResult evaluate_supervised(const Model& model, const TaskDataset& data, const std::vector<std::size_t>& indices,
                               std::size_t batch_size, const LabelNormalizer* norm, std::size_t pad_multiple) {
    NoGradGuard guard;
    EvalResult r;
    r.count = indices.size();
    if (indices.empty()) return r;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<double> preds, truth;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        std::span<const std::size_t> idx(indices.data() + start, std::min(batch_size, indices.size() - start));
        Batch b = make_batch(data, idx, pad_multiple);
        ModelOutput out = model.forward(b.input);
        std::vector<std::uint8_t> all(idx.size(), 1);
        if (data.regression()) {
            std::vector<double> t = b.targets;
            if (norm) norm->normalize(t);
            loss_sum += mse_loss(out.logits, t, all).item() * static_cast<double>(idx.size());
            std::vector<double> p = out.logits.to_vector();
            if (norm) norm->denormalize(p);
            preds.insert(preds.end(), p.begin(), p.end());
            truth.insert(truth.end(), b.targets.begin(), b.targets.end());
        } else {
            loss_sum += cross_entropy(out.logits, b.labels, all).item() * static_cast<double>(idx.size());
            const std::size_t C = out.logits.size(-1);
            auto lv = out.logits.data();
            for (std::size_t i = 0; i < idx.size(); ++i)
                correct += argmax_row(lv.subspan(i * C, C)) == static_cast<std::size_t>(b.labels[i]);
        }
    }
    r.loss = loss_sum / static_cast<double>(r.count);
    if (data.regression()) {
        // R² pooled over all target dimensions, on the original scale.
        const std::size_t D = data.target_dim;
        std::vector<double> mean(D, 0.0);
        for (std::size_t i = 0; i < truth.size(); ++i) mean[i % D] += truth[i];
        for (auto& m : mean) m /= static_cast<double>(r.count);
        double ss_res = 0.0, ss_tot = 0.0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            ss_res += (truth[i] - preds[i]) * (truth[i] - preds[i]);
            ss_tot += (truth[i] - mean[i % D]) * (truth[i] - mean[i % D]);
        }
        r.metric = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
    } else {
        r.metric = static_cast<double>(correct) / static_cast<double>(r.count);
    }
    return r;
}

// ---- the training loop ----

namespace {

struct LoopSpec {
    std::string phase;
    std::string stream;  // names the batch-order and dropout streams
    PhaseSettings settings;
    std::size_t n_train = 0;
    // Loss for a batch of training rows; `epoch` is 1-based.
    std::function<Tensor(std::span<const std::size_t>, std::size_t epoch, const ForwardOptions&)> batch_loss;
    std::function<EvalResult()> validate;
};

std::vector<std::vector<double>> snapshot(const Model& m) {
    std::vector<std::vector<double>> s;
    for (const auto& np : m.parameters()) s.push_back(np.tensor.to_vector());
    return s;
}

void restore(Model& m, const std::vector<std::vector<double>>& s) {
    const auto& ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Tensor t = ps[i].tensor;
        auto d = t.mutable_data();
        std::copy(s[i].begin(), s[i].end(), d.begin());
    }
}

nlohmann::json epochs_json(const std::vector<EpochMetrics>& ep) {
    RunRecord tmp;
    tmp.epochs = ep;
    return tmp.to_json()["epochs"];
}

void run_loop(Model& model, const TrainPlan& plan, std::uint64_t seed, const LoopSpec& spec, const PhaseOutput& out,
              RunRecord& rec) {
    PrecisionScope precision(plan.precision);
    const PhaseSettings& ps = spec.settings;
    AdamW opt(model.param_groups(ps.lr, ps.weight_decay, ps.ssm_lr));
    const std::size_t per_epoch = (spec.n_train + ps.batch_size - 1) / ps.batch_size;
    const std::size_t total_steps = spec.n_train == 0 ? 0 : (ps.steps > 0 ? ps.steps : ps.epochs * per_epoch);
    const std::size_t total_epochs = per_epoch == 0 ? 0 : (total_steps + per_epoch - 1) / per_epoch;
    rec.total_steps = total_steps;
    rec.selection_metric = spec.phase == "pretrain" ? "val_denoise_metric" : "val_metric";

    std::size_t epoch = 0, step = 0, bad = 0, loss_n = 0;
    double loss_sum = 0.0;  // train loss accumulated since the last evaluation
    bool stopped = false;
    double best_metric = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_state;
    const fs::path dir = out.dir;
    const fs::path last_path = dir / "last.ckpt", best_path = dir / "best.ckpt";

    if (out.resume && !out.dir.empty() && fs::exists(last_path)) {
        Checkpoint ck = load_checkpoint(last_path.string());
        model.load_values(ck.params, false);
        if (ck.optimizer) opt.load_state(*ck.optimizer);
        const auto& ex = ck.extra;
        epoch = ex.at("epoch");
        step = ex.at("step");
        bad = ex.at("bad_epochs");
        stopped = ex.at("stopped");
        loss_sum = ex.at("loss_sum");
        loss_n = ex.at("loss_n");
        best_metric = ex.at("best_metric");
        rec.best_epoch = ex.at("best_epoch");
        rec.epochs = RunRecord::from_json({{"phase", ""}, {"seed", 0}, {"config", nullptr}, {"dataset_hash", ""},
                                           {"epochs", ex.at("history")}, {"best_epoch", 0}, {"best_checkpoint", ""},
                                           {"selection_metric", ""}, {"best_val_metric", 0.0}, {"train_records", 0}, {"total_steps", 0}})
                          .epochs;
        Checkpoint best = load_checkpoint(best_path.string());
        best_state.clear();
        for (const auto& np : best.params) best_state.push_back(np.tensor.to_vector());
        spdlog::info("{}: resuming after epoch {} (step {})", spec.phase, epoch, step);
    } else {
        const EvalResult v0 = spec.validate();
        best_metric = v0.metric;
        best_state = snapshot(model);
        rec.best_epoch = 0;
        if (!out.dir.empty()) save_checkpoint(best_path.string(), model.config(), model.parameters(), nullptr, {{"epoch", 0}});
    }

    std::size_t ran = 0;
    std::vector<std::size_t> order(spec.n_train);
    const std::size_t every = std::max<std::size_t>(1, ps.eval_every);
    while (!stopped && epoch < total_epochs && step < total_steps) {
        if (out.stop_after && ran == out.stop_after) break;
        ++epoch;
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng = make_rng(seed, "order-" + spec.stream, epoch);
        std::shuffle(order.begin(), order.end(), order_rng);
        for (std::size_t start = 0; start < spec.n_train && step < total_steps; start += ps.batch_size) {
            std::span<const std::size_t> rows(order.data() + start, std::min(ps.batch_size, spec.n_train - start));
            opt.zero_grad();
            ForwardOptions fo;
            fo.training = true;
            fo.dropout_seed = derive_seed(seed, "dropout-" + spec.stream, step);
            Tensor loss = spec.batch_loss(rows, epoch, fo);
            loss.backward();
            if (ps.grad_clip > 0) {
                std::vector<Tensor> params;
                for (const auto& g : opt.groups()) params.insert(params.end(), g.params.begin(), g.params.end());
                clip_grad_norm(params, ps.grad_clip);
            }
            opt.step(warmup_cosine(step, total_steps, ps.warmup_fraction));
            model.post_step();
            ++step;
            loss_sum += loss.item();
            ++loss_n;
        }
        const bool last = epoch == total_epochs || step >= total_steps;
        if (epoch % every == 0 || last) {
            const EvalResult v = spec.validate();
            EpochMetrics m{epoch, step, loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0, v.loss, v.metric};
            loss_sum = 0.0;
            loss_n = 0;
            rec.epochs.push_back(m);
            spdlog::info("{} epoch {}/{}: train loss {:.4f}, val loss {:.4f}, val metric {:.4f}", spec.phase, epoch,
                         total_epochs, m.train_loss, m.val_loss, m.val_metric);
            if (v.metric > best_metric) {
                best_metric = v.metric;
                rec.best_epoch = epoch;
                best_state = snapshot(model);
                bad = 0;
                if (!out.dir.empty())
                    save_checkpoint(best_path.string(), model.config(), model.parameters(), nullptr, {{"epoch", epoch}});
            } else {
                ++bad;
            }
            if (ps.patience > 0 && bad >= ps.patience) {
                spdlog::info("{}: early stop after {} evaluations without improvement", spec.phase, bad);
                stopped = true;
            }
        }
        ++ran;
        if (!out.dir.empty()) {
            nlohmann::json extra{{"epoch", epoch},       {"step", step},       {"bad_epochs", bad},
                                 {"stopped", stopped},   {"best_metric", best_metric},
                                 {"loss_sum", loss_sum}, {"loss_n", loss_n},
                                 {"best_epoch", rec.best_epoch}, {"history", epochs_json(rec.epochs)}};
            OptimizerState st = opt.state();
            save_checkpoint(last_path.string(), model.config(), model.parameters(), &st, extra);
        }
    }
    restore(model, best_state);
    rec.best_val_metric = best_metric;
    rec.best_checkpoint = out.dir.empty() ? "epoch-" + std::to_string(rec.best_epoch)
                                          : (best_path.string() + "#epoch-" + std::to_string(rec.best_epoch));
}

nlohmann::json record_config(const TrainPlan& plan, const ModelConfig& cfg) {
    return {{"model", to_json(cfg)}, {"train", to_json(plan)}};
}

}  // namespace

RunRecord pretrain(Model& model, const TrainPlan& plan, std::uint64_t seed, const UnlabeledView& train,
                   const UnlabeledView& val, const PhaseOutput& out) {
    plan.validate();
    if (plan.objective == Objective::Supervised) throw ConfigError("train.objective: pretraining needs causal or masked");
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.phase = "pretrain";
    rec.seed = seed;
    rec.config = record_config(plan, model.config());
    rec.dataset_hash = dataset_hash(train.meta());
    rec.train_records = train.size();
    const MaskPlan mask{plan.mask_ratio, derive_seed(seed, "mask")};
    const std::uint64_t val_mask_seed = derive_seed(seed, "val-mask");
    LoopSpec spec;
    spec.phase = "pretrain";
    spec.stream = "pretrain";
    spec.settings = plan.pretrain;
    spec.n_train = train.size();
    spec.batch_loss = [&](std::span<const std::size_t> rows, std::size_t epoch, const ForwardOptions& fo) {
        return denoising_loss(model, train, rows, plan.objective, mask, epoch, fo, plan.pad_multiple);
    };
    spec.validate = [&] {
        return evaluate_denoising(model, val, plan.objective, plan.mask_ratio, val_mask_seed,
                                  plan.pretrain.eval_batch_size, plan.pad_multiple);
    };
    run_loop(model, plan, seed, spec, out, rec);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!out.dir.empty()) save_run_record(rec, (fs::path(out.dir) / "run_record.json").string());
    return rec;
}

namespace {

RunRecord supervised(Model& model, const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                     const std::vector<std::size_t>& train_indices, const PhaseOutput& out, const std::string& phase) {
    plan.validate();
    const auto t0 = std::chrono::steady_clock::now();
    if (model.config().regression != data.regression())
        throw IncompatibleError("model head kind does not match the task (classification vs regression)");
    RunRecord rec;
    rec.phase = phase;
    rec.seed = seed;
    rec.config = record_config(plan, model.config());
    rec.dataset_hash = dataset_hash(data);
    rec.train_records = train_indices.size();
    model.reset_task_head(derive_seed(seed, "task-head"));
    std::optional<LabelNormalizer> norm;
    if (plan.normalize_labels && data.regression()) norm = LabelNormalizer::fit(data, train_indices);
    const LabelNormalizer* np = norm ? &*norm : nullptr;
    LoopSpec spec;
    spec.phase = phase;
    spec.stream = "supervised";  // shared by finetune and scratch: paired batch orders
    spec.settings = plan.finetune;
    spec.n_train = train_indices.size();
    std::vector<std::size_t> idx;
    spec.batch_loss = [&](std::span<const std::size_t> rows, std::size_t, const ForwardOptions& fo) {
        idx.clear();
        for (auto r : rows) idx.push_back(train_indices[r]);
        Batch b = make_batch(data, idx, plan.pad_multiple);
        ModelOutput o = model.forward(b.input, fo);
        std::vector<std::uint8_t> all(idx.size(), 1);
        if (data.regression()) {
            if (np) np->normalize(b.targets);
            return mse_loss(o.logits, b.targets, all);
        }
        return cross_entropy(o.logits, b.labels, all);
    };
    spec.validate = [&] {
        return evaluate_supervised(model, data, data.splits.val, plan.finetune.eval_batch_size, np, plan.pad_multiple);
    };
    run_loop(model, plan, seed, spec, out, rec);
    {
        PrecisionScope precision(plan.precision);
        rec.test = evaluate_supervised(model, data, data.splits.test, plan.finetune.eval_batch_size, np, plan.pad_multiple);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("{} seed {}: test metric {:.4f} (best epoch {})", phase, seed, rec.test->metric, rec.best_epoch);
    if (!out.dir.empty()) save_run_record(rec, (fs::path(out.dir) / "run_record.json").string());
    return rec;
}

}  // namespace

RunRecord finetune(Model& model, const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                   const std::vector<std::size_t>& train_indices, const PhaseOutput& out) {
    return supervised(model, plan, seed, data, train_indices, out, "finetune");
}

RunRecord train_scratch(const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                        const std::vector<std::size_t>& train_indices, const PhaseOutput& out) {
    Model model(plan.model, derive_seed(seed, "init"));
    return supervised(model, plan, seed, data, train_indices, out, "scratch");
}

Model model_from_checkpoint(const std::string& path, const ModelConfig& cfg, std::uint64_t seed) {
    Checkpoint ck = load_checkpoint(path);
    Model model(cfg, derive_seed(seed, "init"));
    // Trunk tensors must match exactly; the task head is replaced anyway.
    for (const auto& np : ck.params) {
        if (np.name.rfind("head.task.", 0) == 0) continue;
        bool found = false;
        for (const auto& mine : model.parameters())
            if (mine.name == np.name) {
                found = true;
                if (mine.tensor.shape() != np.tensor.shape())
                    throw IncompatibleError("checkpoint tensor " + np.name + " has shape " + shape_str(np.tensor.shape()) +
                                            ", model expects " + shape_str(mine.tensor.shape()));
            }
        if (!found) throw IncompatibleError("checkpoint tensor " + np.name + " has no counterpart in the model");
    }
    for (const auto& mine : model.parameters()) {
        if (mine.name.rfind("head.task.", 0) == 0) continue;
        const bool present = std::any_of(ck.params.begin(), ck.params.end(), [&](const auto& np) { return np.name == mine.name; });
        if (!present) throw IncompatibleError("model tensor " + mine.name + " missing from checkpoint " + path);
    }
    model.load_values(ck.params, true);
    return model;
}

}  // namespace spt
