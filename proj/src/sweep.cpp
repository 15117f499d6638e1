#include "spt/sweep.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "spt/error.hpp"

namespace spt {

namespace fs = std::filesystem;

nlohmann::json to_json(const SweepSettings& s) {
    nlohmann::json scales = nlohmann::json::array();
    for (const auto& m : s.scales)
        scales.push_back({{"name", m.name}, {"width", m.width}, {"depth", m.depth}, {"ffn", m.ffn}, {"state_size", m.state_size}});
    return {{"fractions", s.fractions},
            {"pretrain_steps", s.pretrain_steps},
            {"finetune_steps", s.finetune_steps},
            {"max_evals", s.max_evals},
            {"total_epochs", s.total_epochs},
            {"ratios", s.ratios},
            {"scales", scales},
            {"finetune_lrs", s.finetune_lrs}};
}

namespace {

std::size_t count_at(const nlohmann::json& v, const std::string& path) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(path + ": expected a non-negative integer");
    return v.get<std::size_t>();
}

std::vector<double> numbers_at(const nlohmann::json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected a list of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
        if (!x.is_number()) throw ConfigError(path + ": expected a list of numbers");
        out.push_back(x.get<double>());
    }
    return out;
}

}  // namespace

SweepSettings sweep_settings_from_json(const nlohmann::json& j, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    SweepSettings s;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string k = it.key(), at = path + "." + k;
        const auto& v = it.value();
        if (k == "fractions") s.fractions = numbers_at(v, at);
        else if (k == "pretrain_steps") s.pretrain_steps = count_at(v, at);
        else if (k == "finetune_steps") s.finetune_steps = count_at(v, at);
        else if (k == "max_evals") s.max_evals = std::max<std::size_t>(1, count_at(v, at));
        else if (k == "total_epochs") s.total_epochs = count_at(v, at);
        else if (k == "ratios") s.ratios = numbers_at(v, at);
        else if (k == "finetune_lrs") s.finetune_lrs = numbers_at(v, at);
        else if (k == "scales") {
            if (!v.is_array()) throw ConfigError(at + ": expected a list");
            for (std::size_t i = 0; i < v.size(); ++i) {
                const std::string sat = at + "[" + std::to_string(i) + "]";
                if (!v[i].is_object()) throw ConfigError(sat + ": expected an object");
                ModelScale m;
                for (auto jt = v[i].begin(); jt != v[i].end(); ++jt) {
                    const std::string kk = jt.key(), kat = sat + "." + kk;
                    if (kk == "name") {
                        if (!jt->is_string()) throw ConfigError(kat + ": expected a string");
                        m.name = jt->get<std::string>();
                    } else if (kk == "width") m.width = count_at(*jt, kat);
                    else if (kk == "depth") m.depth = count_at(*jt, kat);
                    else if (kk == "ffn") m.ffn = count_at(*jt, kat);
                    else if (kk == "state_size") m.state_size = count_at(*jt, kat);
                    else throw ConfigError(kat + ": unknown key");
                }
                if (m.name.empty()) m.name = "w" + std::to_string(m.width) + "d" + std::to_string(m.depth);
                s.scales.push_back(m);
            }
        } else throw ConfigError(at + ": unknown key");
    }
    for (double f : s.fractions)
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError(path + ".fractions: values must lie in (0, 1]");
    for (double r : s.ratios)
        if (!(r >= 0.0 && r < 1.0)) throw ConfigError(path + ".ratios: values must lie in [0, 1)");
    for (double lr : s.finetune_lrs)
        if (!(lr > 0.0)) throw ConfigError(path + ".finetune_lrs: rates must be positive");
    return s;
}

double relative_gain(double spt, double scratch) {
    if (scratch == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return (spt - scratch) / std::abs(scratch);
}

std::pair<std::size_t, std::size_t> split_epochs(std::size_t total, double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("compute-tied ratio must lie in [0, 1)");
    // The small epsilon keeps ratios such as 0.6·10 from flooring to 5.
    const auto pre = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(total) + 1e-9));
    return {pre, total - pre};
}

namespace {

// Best-of-grid supervised training: `init` null trains from scratch.
RunRecord supervised_best(const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                          const std::vector<std::size_t>& idx, const std::vector<double>& lrs, const Model* init) {
    const std::vector<double> grid = lrs.empty() ? std::vector<double>{plan.finetune.lr} : lrs;
    std::optional<RunRecord> best;
    for (double lr : grid) {
        TrainPlan p = plan;
        p.finetune.lr = lr;
        RunRecord r;
        if (init) {
            Model m(p.model, derive_seed(seed, "init"));
            m.load_values(init->parameters(), false);
            r = finetune(m, p, seed, data, idx);
        } else {
            r = train_scratch(p, seed, data, idx);
        }
        if (!best || r.best_val_metric > best->best_val_metric) best = std::move(r);
    }
    return *best;
}

PairedResult paired(const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                    const std::vector<std::size_t>& idx, const std::vector<double>& lrs) {
    PairedResult r;
    r.scratch = supervised_best(plan, seed, data, idx, lrs, nullptr);
    Model m(plan.model, derive_seed(seed, "init"));
    r.pretrain = pretrain(m, plan, seed, UnlabeledView(data, idx), UnlabeledView(data, data.splits.val));
    r.finetune = supervised_best(plan, seed, data, idx, lrs, &m);
    return r;
}

// Runs fn unless a cached result for key exists.
nlohmann::json cached_cell(const SweepOutput& out, const nlohmann::json& key, const std::function<nlohmann::json()>& fn) {
    if (out.cache_dir.empty()) return fn();
    const std::string id = sha1_hex(key.dump());
    const fs::path path = fs::path(out.cache_dir) / (id + ".json");
    if (fs::exists(path)) {
        std::ifstream in(path);
        try {
            auto j = nlohmann::json::parse(in);
            if (j.at("key") == key) {
                spdlog::info("cell {} cached", id.substr(0, 12));
                return j.at("result");
            }
        } catch (const nlohmann::json::exception&) {
            // Unreadable cell files are recomputed.
        }
    }
    nlohmann::json result = fn();
    write_text(path.string(), nlohmann::json{{"key", key}, {"result", result}}.dump(2) + "\n");
    return result;
}

nlohmann::json cell_key(const std::string& kind, const TrainPlan& plan, const SweepSettings& s,
                        const std::string& data_hash, std::uint64_t seed, const nlohmann::json& cell) {
    return {{"kind", kind},
            {"model", to_json(plan.model)},
            {"train", to_json(plan)},
            {"finetune_lrs", s.finetune_lrs},
            {"dataset", data_hash},
            {"seed", seed},
            {"cell", cell}};
}

// Spreads a phase's validations so a fixed step budget on a small subset
// does not validate after every one of its many short epochs.
void cap_evals(PhaseSettings& ph, std::size_t n_train, std::size_t max_evals) {
    if (ph.steps == 0 || n_train == 0) return;
    const std::size_t per_epoch = (n_train + ph.batch_size - 1) / ph.batch_size;
    const std::size_t epochs = (ph.steps + per_epoch - 1) / per_epoch;
    ph.eval_every = std::max(ph.eval_every, (epochs + max_evals - 1) / max_evals);
}

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

PairedResult paired_run(const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                        const std::vector<std::size_t>& train_indices) {
    return paired(plan, seed, data, train_indices, {});
}

std::vector<DataScaleRow> sweep_data_scale(const TrainPlan& plan, const SweepSettings& s, const TaskDataset& data,
                                           const SweepOutput& out) {
    plan.validate();
    TrainPlan p = plan;
    if (s.pretrain_steps > 0) p.pretrain.steps = s.pretrain_steps;
    if (s.finetune_steps > 0) p.finetune.steps = s.finetune_steps;
    const std::string h = dataset_hash(data);
    std::vector<DataScaleRow> rows;
    for (std::size_t fi = 0; fi < s.fractions.size(); ++fi) {
        for (auto seed : plan.seeds) {
            const auto subsets = subset_sample(data.splits.train, s.fractions, derive_seed(seed, "subset"));
            const auto& idx = subsets[fi];
            const double f = s.fractions[fi];
            TrainPlan pc = p;
            cap_evals(pc.pretrain, idx.size(), s.max_evals);
            cap_evals(pc.finetune, idx.size(), s.max_evals);
            auto key = cell_key("data-scale", pc, s, h, seed, {{"fraction", f}});
            auto res = cached_cell(out, key, [&] {
                spdlog::info("data-scale: fraction {} seed {} ({} records)", f, seed, idx.size());
                auto r = paired(pc, seed, data, idx, s.finetune_lrs);
                return nlohmann::json{{"train_records", idx.size()},
                                      {"pretrain_steps", r.pretrain.total_steps},
                                      {"finetune_steps", r.finetune.total_steps},
                                      {"scratch", r.scratch.test->metric},
                                      {"spt", r.finetune.test->metric}};
            });
            DataScaleRow row;
            row.fraction = f;
            row.seed = seed;
            row.train_records = res.at("train_records");
            row.pretrain_steps = res.at("pretrain_steps");
            row.finetune_steps = res.at("finetune_steps");
            row.scratch = res.at("scratch");
            row.spt = res.at("spt");
            row.relative_gain = relative_gain(row.spt, row.scratch);
            rows.push_back(row);
        }
    }
    return rows;
}

std::vector<ComputeTiedRow> sweep_compute_tied(const TrainPlan& plan, const SweepSettings& s, const TaskDataset& data,
                                               const SweepOutput& out) {
    plan.validate();
    const std::string h = dataset_hash(data);
    std::vector<ComputeTiedRow> rows;
    for (double ratio : s.ratios) {
        const auto [pre, fine] = split_epochs(s.total_epochs, ratio);
        TrainPlan p = plan;
        p.pretrain.epochs = pre;
        p.pretrain.steps = 0;
        p.finetune.epochs = fine;
        p.finetune.steps = 0;
        for (auto seed : plan.seeds) {
            auto key = cell_key("compute-tied", p, s, h, seed, {{"ratio", ratio}, {"total_epochs", s.total_epochs}});
            auto res = cached_cell(out, key, [&] {
                spdlog::info("compute-tied: ratio {} ({} + {} epochs) seed {}", ratio, pre, fine, seed);
                const auto& idx = data.splits.train;
                if (ratio == 0.0) return nlohmann::json{{"metric", supervised_best(p, seed, data, idx, s.finetune_lrs, nullptr).test->metric}};
                Model m(p.model, derive_seed(seed, "init"));
                pretrain(m, p, seed, UnlabeledView(data, idx), UnlabeledView(data, data.splits.val));
                return nlohmann::json{{"metric", supervised_best(p, seed, data, idx, s.finetune_lrs, &m).test->metric}};
            });
            rows.push_back({ratio, seed, pre, fine, res.at("metric").get<double>()});
        }
    }
    return rows;
}

std::vector<ModelScaleRow> sweep_model_scale(const TrainPlan& plan, const SweepSettings& s, const TaskDataset& data,
                                             const SweepOutput& out) {
    plan.validate();
    if (s.scales.empty()) throw ConfigError("sweep.scales: model-scale sweep needs at least one scale");
    const std::string h = dataset_hash(data);
    std::vector<ModelScaleRow> rows;
    for (const auto& sc : s.scales) {
        TrainPlan p = plan;
        p.model.width = sc.width;
        p.model.depth = sc.depth;
        p.model.ffn = sc.ffn ? sc.ffn : 2 * sc.width;
        if (sc.state_size) p.model.state_size = sc.state_size;
        p.validate();
        for (auto seed : plan.seeds) {
            auto key = cell_key("model-scale", p, s, h, seed, {{"scale", sc.name}});
            auto res = cached_cell(out, key, [&] {
                spdlog::info("model-scale: {} seed {}", sc.name, seed);
                auto r = paired(p, seed, data, data.splits.train, s.finetune_lrs);
                return nlohmann::json{{"scratch", r.scratch.test->metric}, {"spt", r.finetune.test->metric}};
            });
            ModelScaleRow row;
            row.scale = sc.name;
            row.seed = seed;
            row.params = expected_param_count(p.model);
            row.scratch = res.at("scratch");
            row.spt = res.at("spt");
            row.relative_gain = relative_gain(row.spt, row.scratch);
            rows.push_back(row);
        }
    }
    return rows;
}

std::string to_csv(const std::vector<DataScaleRow>& rows) {
    std::ostringstream o;
    o << "fraction,seed,train_records,pretrain_steps,finetune_steps,scratch,spt,relative_gain\n";
    for (const auto& r : rows)
        o << num(r.fraction) << ',' << r.seed << ',' << r.train_records << ',' << r.pretrain_steps << ','
          << r.finetune_steps << ',' << num(r.scratch) << ',' << num(r.spt) << ',' << num(r.relative_gain) << '\n';
    return o.str();
}

std::string to_csv(const std::vector<ComputeTiedRow>& rows) {
    std::ostringstream o;
    o << "ratio,seed,pretrain_epochs,finetune_epochs,metric\n";
    for (const auto& r : rows)
        o << num(r.ratio) << ',' << r.seed << ',' << r.pretrain_epochs << ',' << r.finetune_epochs << ','
          << num(r.metric) << '\n';
    return o.str();
}

std::string to_csv(const std::vector<ModelScaleRow>& rows) {
    std::ostringstream o;
    o << "scale,seed,params,scratch,spt,relative_gain\n";
    for (const auto& r : rows)
        o << r.scale << ',' << r.seed << ',' << r.params << ',' << num(r.scratch) << ',' << num(r.spt) << ','
          << num(r.relative_gain) << '\n';
    return o.str();
}

void write_text(const std::string& path, const std::string& text) {
    const fs::path p(path);
    std::error_code ec;
    if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
    const fs::path tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, p, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

}  // namespace spt
