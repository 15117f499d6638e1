#include "spt/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "spt/error.hpp"

namespace spt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads known keys of one object and rejects the rest.
class Fields {
   public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!take(key)) return;
        const json& v = j_.at(key);
        if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
            if (!v.is_number_integer() || v.get<long long>() < 0)
                throw ConfigError(at(key) + ": expected a non-negative integer");
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(at(key) + ": expected true or false");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
        }
        out = v.get<T>();
    }

    const json* sub(const std::string& key) { return take(key) ? &j_.at(key) : nullptr; }
    std::string at(const std::string& key) const { return path_ + "." + key; }

    void done() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(at(it.key()) + ": unknown key");
    }

   private:
    bool take(const std::string& key) {
        if (!j_.contains(key)) return false;
        seen_.insert(key);
        return true;
    }
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void check_fractions(double val, double test, const std::string& path) {
    if (!(val >= 0.0 && test >= 0.0 && val + test < 1.0))
        throw ConfigError(path + ": val_fraction and test_fraction must be non-negative and sum below 1");
}

void require_positive(std::size_t v, const std::string& path) {
    if (v == 0) throw ConfigError(path + ": must be positive");
}

}  // namespace

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::ListOps: return "listops";
        case TaskKind::Retrieval: return "retrieval";
        case TaskKind::SyntheticImages: return "synthetic-images";
        case TaskKind::Continuous: return "continuous";
        case TaskKind::LocalText: return "local-text";
        case TaskKind::Text: return "text";
        case TaskKind::Image: return "image";
    }
    return "?";
}

TaskKind parse_task_kind(const std::string& s) {
    for (auto k : {TaskKind::ListOps, TaskKind::Retrieval, TaskKind::SyntheticImages, TaskKind::Continuous,
                   TaskKind::LocalText, TaskKind::Text, TaskKind::Image})
        if (to_string(k) == s) return k;
    throw ConfigError("task.kind: unknown task '" + s +
                      "' (listops, retrieval, synthetic-images, continuous, local-text, text, image)");
}

json to_json(const TaskConfig& t) {
    json j{{"kind", to_string(t.kind)}};
    switch (t.kind) {
        case TaskKind::ListOps: {
            const auto& o = t.listops;
            j.update({{"n", o.n}, {"max_len", o.max_len}, {"max_depth", o.max_depth}, {"max_args", o.max_args},
                      {"with_mean", o.with_mean}, {"val_fraction", o.val_fraction},
                      {"test_fraction", o.test_fraction}, {"seed", o.seed}});
            break;
        }
        case TaskKind::Retrieval: {
            const auto& o = t.retrieval;
            j.update({{"n", o.n}, {"length", o.length}, {"key_distance", o.key_distance},
                      {"val_fraction", o.val_fraction}, {"test_fraction", o.test_fraction}, {"seed", o.seed}});
            break;
        }
        case TaskKind::SyntheticImages: {
            const auto& o = t.images;
            j.update({{"n", o.n}, {"side", o.side}, {"classes", o.classes}, {"noise", o.noise},
                      {"val_fraction", o.val_fraction}, {"test_fraction", o.test_fraction}, {"seed", o.seed}});
            break;
        }
        case TaskKind::Continuous: {
            const auto& o = t.continuous;
            j.update({{"n", o.n}, {"length", o.length}, {"input_dim", o.input_dim}, {"classes", o.classes},
                      {"noise", o.noise}, {"val_fraction", o.val_fraction}, {"test_fraction", o.test_fraction},
                      {"seed", o.seed}});
            break;
        }
        case TaskKind::LocalText: {
            const auto& o = t.local_text;
            j.update({{"n", o.n}, {"length", o.length}, {"window", o.window}, {"resample", o.resample}, {"seed", o.seed}});
            break;
        }
        case TaskKind::Text:
        case TaskKind::Image: {
            const auto& o = t.ingest;
            j.update({{"source", t.source}, {"max_len", o.max_len}, {"val_fraction", o.val_fraction},
                      {"test_fraction", o.test_fraction}, {"seed", o.seed}});
            break;
        }
    }
    return j;
}

TaskConfig task_config_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    TaskConfig t;
    std::string kind = "listops";
    f.get("kind", kind);
    t.kind = parse_task_kind(kind);
    switch (t.kind) {
        case TaskKind::ListOps: {
            auto& o = t.listops;
            f.get("n", o.n);
            f.get("max_len", o.max_len);
            f.get("max_depth", o.max_depth);
            f.get("max_args", o.max_args);
            f.get("with_mean", o.with_mean);
            f.get("val_fraction", o.val_fraction);
            f.get("test_fraction", o.test_fraction);
            f.get("seed", o.seed);
            require_positive(o.max_depth, f.at("max_depth"));
            if (o.max_args < 2) throw ConfigError(f.at("max_args") + ": must be at least 2");
            if (o.max_len < 5) throw ConfigError(f.at("max_len") + ": must be at least 5");
            check_fractions(o.val_fraction, o.test_fraction, path);
            require_positive(o.n, f.at("n"));
            break;
        }
        case TaskKind::Retrieval: {
            auto& o = t.retrieval;
            f.get("n", o.n);
            f.get("length", o.length);
            f.get("key_distance", o.key_distance);
            f.get("val_fraction", o.val_fraction);
            f.get("test_fraction", o.test_fraction);
            f.get("seed", o.seed);
            require_positive(o.n, f.at("n"));
            if (o.key_distance >= o.length) throw ConfigError(f.at("key_distance") + ": must be below length");
            check_fractions(o.val_fraction, o.test_fraction, path);
            break;
        }
        case TaskKind::SyntheticImages: {
            auto& o = t.images;
            f.get("n", o.n);
            f.get("side", o.side);
            f.get("classes", o.classes);
            f.get("noise", o.noise);
            f.get("val_fraction", o.val_fraction);
            f.get("test_fraction", o.test_fraction);
            f.get("seed", o.seed);
            require_positive(o.n, f.at("n"));
            require_positive(o.side, f.at("side"));
            if (o.classes < 2) throw ConfigError(f.at("classes") + ": must be at least 2");
            check_fractions(o.val_fraction, o.test_fraction, path);
            break;
        }
        case TaskKind::Continuous: {
            auto& o = t.continuous;
            f.get("n", o.n);
            f.get("length", o.length);
            f.get("input_dim", o.input_dim);
            f.get("classes", o.classes);
            f.get("noise", o.noise);
            f.get("val_fraction", o.val_fraction);
            f.get("test_fraction", o.test_fraction);
            f.get("seed", o.seed);
            require_positive(o.n, f.at("n"));
            require_positive(o.length, f.at("length"));
            require_positive(o.input_dim, f.at("input_dim"));
            if (o.classes == 1) throw ConfigError(f.at("classes") + ": use 0 for regression or at least 2");
            check_fractions(o.val_fraction, o.test_fraction, path);
            break;
        }
        case TaskKind::LocalText: {
            auto& o = t.local_text;
            f.get("n", o.n);
            f.get("length", o.length);
            f.get("window", o.window);
            f.get("resample", o.resample);
            f.get("seed", o.seed);
            require_positive(o.n, f.at("n"));
            require_positive(o.window, f.at("window"));
            if (o.length <= o.window) throw ConfigError(f.at("length") + ": must exceed window");
            if (!(o.resample >= 0.0 && o.resample <= 1.0)) throw ConfigError(f.at("resample") + ": must lie in [0, 1]");
            break;
        }
        case TaskKind::Text:
        case TaskKind::Image: {
            auto& o = t.ingest;
            f.get("source", t.source);
            f.get("max_len", o.max_len);
            f.get("val_fraction", o.val_fraction);
            f.get("test_fraction", o.test_fraction);
            f.get("seed", o.seed);
            if (t.source.empty()) throw ConfigError(f.at("source") + ": required for " + kind + " tasks");
            require_positive(o.max_len, f.at("max_len"));
            check_fractions(o.val_fraction, o.test_fraction, path);
            break;
        }
    }
    f.done();
    return t;
}

TaskDataset build_task(const TaskConfig& t, const std::string& base_dir) {
    auto source = [&] {
        fs::path p(t.source);
        return (p.is_relative() && !base_dir.empty() ? fs::path(base_dir) / p : p).string();
    };
    switch (t.kind) {
        case TaskKind::ListOps: return listops_generate(t.listops);
        case TaskKind::Retrieval: return synthetic_retrieval(t.retrieval);
        case TaskKind::SyntheticImages: return synthetic_images(t.images);
        case TaskKind::Continuous: return synthetic_continuous(t.continuous);
        case TaskKind::LocalText: return synthetic_local_text(t.local_text);
        case TaskKind::Text: return text_ingest(source(), t.ingest);
        case TaskKind::Image: return image_ingest(source(), t.ingest);
    }
    throw ConfigError("task.kind: unhandled");
}

json to_json(const AnalysisSettings& a) {
    return {{"length", a.length},
            {"stage", a.stage == KernelStage::Pretrain ? "pretrain" : "finetune"},
            {"l0_fraction", a.l0_fraction}};
}

AnalysisSettings analysis_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    AnalysisSettings a;
    std::string stage = "pretrain";
    f.get("length", a.length);
    f.get("stage", stage);
    f.get("l0_fraction", a.l0_fraction);
    f.done();
    if (stage == "pretrain") a.stage = KernelStage::Pretrain;
    else if (stage == "finetune") a.stage = KernelStage::Finetune;
    else throw ConfigError(path + ".stage: expected pretrain or finetune");
    if (!(a.l0_fraction > 0.0 && a.l0_fraction < 1.0)) throw ConfigError(path + ".l0_fraction: must lie in (0, 1)");
    return a;
}

json to_json(const ExperimentConfig& c) {
    return {{"name", c.name},
            {"output_dir", c.output_dir},
            {"task", to_json(c.task)},
            {"model", to_json(c.train.model)},
            {"train", to_json(c.train)},
            {"sweep", to_json(c.sweep)},
            {"analysis", to_json(c.analysis)}};
}

ExperimentConfig experiment_from_json(const json& j, const std::string& base_dir) {
    Fields f(j, "config");
    ExperimentConfig c;
    c.base_dir = base_dir;
    f.get("name", c.name);
    if (c.name.empty() || c.name.find_first_of("/\\") != std::string::npos || c.name == "." || c.name == "..")
        throw ConfigError("config.name: must be a plain directory name");
    f.get("output_dir", c.output_dir);
    if (c.output_dir.empty()) {
        const char* env = std::getenv("SPTLAB_OUT");
        c.output_dir = env && *env ? env : "runs";
    } else if (fs::path(c.output_dir).is_relative() && !base_dir.empty()) {
        c.output_dir = (fs::path(base_dir) / c.output_dir).lexically_normal().string();
    }
    if (auto* t = f.sub("task")) c.task = task_config_from_json(*t, "task");
    ModelConfig model;
    if (auto* m = f.sub("model")) model = model_config_from_json(*m, "model");
    if (auto* t = f.sub("train")) c.train = train_plan_from_json(*t, model, "train");
    else c.train = train_plan_from_json(json::object(), model, "train");
    if (auto* s = f.sub("sweep")) c.sweep = sweep_settings_from_json(*s, "sweep");
    if (auto* a = f.sub("analysis")) c.analysis = analysis_from_json(*a, "analysis");
    f.done();
    return c;
}

ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot read config file");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": invalid JSON (" + e.what() + ")");
    }
    return experiment_from_json(j, fs::path(path).parent_path().string());
}

RunLayout::RunLayout(const ExperimentConfig& c) : root((fs::path(c.output_dir) / c.name).string()) {}

std::string RunLayout::data_dir() const { return (fs::path(root) / "data").string(); }
std::string RunLayout::resolved_config() const { return (fs::path(root) / "config.resolved.json").string(); }
std::string RunLayout::seed_dir(std::uint64_t seed) const { return (fs::path(root) / std::to_string(seed)).string(); }
std::string RunLayout::phase_dir(std::uint64_t seed, const std::string& phase) const {
    return (fs::path(seed_dir(seed)) / phase).string();
}
std::string RunLayout::record(std::uint64_t seed, const std::string& phase) const {
    return (fs::path(phase_dir(seed, phase)) / "run_record.json").string();
}
std::string RunLayout::kernels_dir(std::uint64_t seed) const { return (fs::path(seed_dir(seed)) / "kernels").string(); }
std::string RunLayout::sweep_csv(const std::string& kind) const {
    return (fs::path(root) / "sweeps" / (kind + ".csv")).string();
}
std::string RunLayout::sweep_cells() const { return (fs::path(root) / "sweeps" / "cells").string(); }

void write_task_cache(const ExperimentConfig& c, const TaskDataset& data) {
    RunLayout lay(c);
    save_dataset(data, lay.data_dir());
    json stamp{{"task", to_json(c.task)}, {"hash", dataset_hash(data)}};
    write_text((fs::path(lay.data_dir()) / "task.json").string(), stamp.dump(2) + "\n");
}

TaskDataset load_task_cache(const ExperimentConfig& c) {
    RunLayout lay(c);
    const fs::path stamp_path = fs::path(lay.data_dir()) / "task.json";
    const std::string hint = "; run `sptlab generate-data <config>` first";
    if (!fs::exists(stamp_path)) throw MissingArtifactError("dataset cache " + lay.data_dir() + " not found" + hint);
    std::ifstream in(stamp_path);
    json stamp;
    try {
        stamp = json::parse(in);
    } catch (const json::parse_error&) {
        throw MissingArtifactError(stamp_path.string() + " is unreadable" + hint);
    }
    if (!stamp.contains("task") || stamp.at("task") != to_json(c.task))
        throw MissingArtifactError("dataset cache " + lay.data_dir() + " was generated from a different task block" + hint);
    TaskDataset d = load_dataset(lay.data_dir());
    if (stamp.value("hash", std::string()) != dataset_hash(d))
        throw MissingArtifactError("dataset cache " + lay.data_dir() + " does not match its stamp" + hint);
    return d;
}

std::vector<std::size_t> training_rows(const TrainPlan& plan, const TaskDataset& data, std::uint64_t seed) {
    if (plan.data_fraction >= 1.0) return data.splits.train;
    return subset_sample(data.splits.train, {plan.data_fraction}, derive_seed(seed, "subset")).front();
}

}  // namespace spt
