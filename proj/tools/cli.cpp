#include "spt/cli.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>

#include "spt/analysis.hpp"
#include "spt/config.hpp"
#include "spt/error.hpp"
#include "spt/verify.hpp"

namespace spt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool resume = false;
    std::string kind;
};

ExperimentConfig load(const Options& o) {
    ExperimentConfig c = load_experiment(o.config);
    if (!o.out.empty()) c.output_dir = o.out;
    if (o.seed) c.train.seeds = {*o.seed};
    return c;
}

// Fits vocabulary and output sizes to the data, then echoes the resolved
// config into the experiment directory.
void resolve(ExperimentConfig& c, const TaskDataset& data) {
    fit_model_to_data(c.train.model, data);
    c.train.model.validate();
    c.train.validate();
    write_text(RunLayout(c).resolved_config(), to_json(c).dump(2) + "\n");
}

std::string checkpoint_of(const RunLayout& lay, std::uint64_t seed, const std::string& phase, const std::string& producer) {
    const auto path = (fs::path(lay.phase_dir(seed, phase)) / "best.ckpt").string();
    if (!fs::exists(path))
        throw MissingArtifactError("checkpoint " + path + " not found; run `sptlab " + producer + " <config>` first");
    return path;
}

void report(std::ostream& out, const RunRecord& r, const std::string& path) {
    out << r.phase << " seed " << r.seed << ": " << r.epochs.size() << " evaluations, best epoch " << r.best_epoch
        << ", " << r.selection_metric << " " << r.best_val_metric;
    if (r.test) out << ", test metric " << r.test->metric;
    out << " -> " << path << "\n";
}

int generate_data(const Options& o, std::ostream& out) {
    ExperimentConfig c = load(o);
    TaskDataset data = build_task(c.task, c.base_dir);
    data.validate();
    write_task_cache(c, data);
    resolve(c, data);
    out << "generated " << to_string(c.task.kind) << ": " << data.splits.train.size() << " train / "
        << data.splits.val.size() << " val / " << data.splits.test.size() << " test, hash " << dataset_hash(data)
        << " -> " << RunLayout(c).data_dir() << "\n";
    return kExitOk;
}

int train_phase(const Options& o, const std::string& phase, std::ostream& out) {
    ExperimentConfig c = load(o);
    TaskDataset data = load_task_cache(c);
    resolve(c, data);
    RunLayout lay(c);
    const TrainPlan& plan = c.train;
    for (auto seed : plan.seeds) {
        const auto rows = training_rows(plan, data, seed);
        PhaseOutput po{lay.phase_dir(seed, phase), o.resume, 0};
        RunRecord r;
        if (phase == "pretrain") {
            Model m(plan.model, derive_seed(seed, "init"));
            r = pretrain(m, plan, seed, UnlabeledView(data, rows), UnlabeledView(data, data.splits.val), po);
        } else if (phase == "finetune") {
            Model m = model_from_checkpoint(checkpoint_of(lay, seed, "pretrain", "pretrain"), plan.model, seed);
            r = finetune(m, plan, seed, data, rows, po);
        } else {
            r = train_scratch(plan, seed, data, rows, po);
        }
        save_run_record(r, lay.record(seed, phase));
        report(out, r, lay.record(seed, phase));
    }
    return kExitOk;
}

double mean_gain(const std::vector<DataScaleRow>& rows, double fraction) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
        if (r.fraction == fraction && std::isfinite(r.relative_gain)) {
            s += r.relative_gain;
            ++n;
        }
    return n ? s / static_cast<double>(n) : std::nan("");
}

int sweep(const Options& o, std::ostream& out) {
    ExperimentConfig c = load(o);
    TaskDataset data = load_task_cache(c);
    resolve(c, data);
    RunLayout lay(c);
    SweepOutput so{lay.sweep_cells()};
    std::string csv;
    if (o.kind == "data-scale") {
        auto rows = sweep_data_scale(c.train, c.sweep, data, so);
        csv = to_csv(rows);
        const auto& f = c.sweep.fractions;
        const double lo = *std::min_element(f.begin(), f.end()), hi = *std::max_element(f.begin(), f.end());
        out << "mean relative gain: " << mean_gain(rows, lo) << " at fraction " << lo << ", " << mean_gain(rows, hi)
            << " at fraction " << hi << "\n";
    } else if (o.kind == "compute-tied") {
        csv = to_csv(sweep_compute_tied(c.train, c.sweep, data, so));
    } else if (o.kind == "model-scale") {
        csv = to_csv(sweep_model_scale(c.train, c.sweep, data, so));
    } else {
        throw ConfigError("--kind: expected data-scale, compute-tied or model-scale");
    }
    write_text(lay.sweep_csv(o.kind), csv);
    out << csv << "-> " << lay.sweep_csv(o.kind) << "\n";
    return kExitOk;
}

int analyze_kernels(const Options& o, std::ostream& out) {
    ExperimentConfig c = load(o);
    RunLayout lay(c);
    const bool pre = c.analysis.stage == KernelStage::Pretrain;
    const std::string stage = pre ? "pretrain" : "finetune";
    for (auto seed : c.train.seeds) {
        const auto ckpt = checkpoint_of(lay, seed, stage, stage);
        Checkpoint ck = load_checkpoint(ckpt);
        if (ck.config.family == Family::Transformer)
            throw UnsupportedFamilyError(ckpt + " holds a transformer; kernel analysis needs an SSM model");
        const std::size_t L = c.analysis.length ? c.analysis.length : ck.config.max_len;
        const auto learned = kmax_profiles(ckpt, L);

        // Reference: the same architecture at its structured initialization.
        ModelConfig ref_cfg = ck.config;
        ref_cfg.ssm_init = InitKind::Structured;
        const auto init = kmax_profiles(Model(ref_cfg, derive_seed(seed, "init")), L, "init");

        const auto dir = fs::path(lay.kernels_dir(seed));
        export_csv(learned, (dir / (stage + ".csv")).string());
        export_csv(init, (dir / "init.csv").string());
        const auto l0 = static_cast<std::size_t>(c.analysis.l0_fraction * static_cast<double>(L));
        json summary{{"checkpoint", ckpt}, {"length", L}, {"l0", l0}, {"layers", json::array()}};
        out << "seed " << seed << " (" << stage << ", L=" << L << ", l0=" << l0 << ")\n";
        std::size_t local = 0;
        for (std::size_t i = 0; i < learned.size(); ++i) {
            json row{{"layer", i}, {"tail_mass", learned[i].tail_mass(l0)}, {"init_tail_mass", init[i].tail_mass(l0)}};
            out << "  layer " << i << ": tail mass " << learned[i].tail_mass(l0) << " vs init " << init[i].tail_mass(l0);
            try {
                const double ratio = compare_decay(learned[i], init[i], l0);
                row["ratio"] = ratio;
                local += ratio < 1.0;
                out << ", ratio " << ratio << "\n";
            } catch (const DegenerateProfileError&) {
                row["ratio"] = nullptr;
                out << ", ratio undefined (init tail is zero)\n";
            }
            summary["layers"].push_back(row);
        }
        summary["more_local_layers"] = local;
        write_text((dir / "summary.json").string(), summary.dump(2) + "\n");
        out << "  " << local << " of " << learned.size() << " layers more local than init -> " << dir.string() << "\n";
    }
    return kExitOk;
}

int verify(const Options& o, std::ostream& out) {
    std::optional<ExperimentConfig> c;
    if (!o.config.empty()) c = load(o);
    const auto results = run_verification();
    std::size_t failed = 0;
    json report = json::array();
    for (const auto& r : results) {
        failed += !r.passed;
        out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(48) << r.name << " measured " << r.measured
            << " limit " << r.limit;
        if (!r.detail.empty()) out << "  (" << r.detail << ")";
        out << "\n";
        report.push_back({{"name", r.name}, {"passed", r.passed}, {"measured", r.measured}, {"limit", r.limit},
                          {"detail", r.detail}});
    }
    out << results.size() - failed << " of " << results.size() << " properties hold\n";
    if (c) write_text((fs::path(RunLayout(*c).root) / "verify.json").string(), report.dump(2) + "\n");
    return failed ? kExitVerify : kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Self-pretraining experiments for long-sequence models", "sptlab"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    std::string level = "warn";
    app.add_option("--log-level", level, "trace, debug, info, warn, error or off")->capture_default_str();

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* cfg = sub->add_option("config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
        if (config_required) cfg->required();
        sub->add_option("--out", o.out, "Output root (overrides output_dir and SPTLAB_OUT)");
    };
    auto add_seed = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "Run this seed only instead of train.seeds");
    };

    auto* gen = app.add_subcommand("generate-data", "Generate or ingest the task dataset into the cache");
    add_common(gen, true);
    std::map<std::string, CLI::App*> phases;
    for (auto [name, help] : {std::pair{"pretrain", "Self-pretrain on the training inputs"},
                              std::pair{"finetune", "Finetune the self-pretrained checkpoint"},
                              std::pair{"train-scratch", "Train from a fresh initialization"}}) {
        auto* sub = app.add_subcommand(name, help);
        add_common(sub, true);
        add_seed(sub);
        sub->add_flag("--resume", o.resume, "Continue from last.ckpt when present");
        phases[name] = sub;
    }
    auto* sw = app.add_subcommand("sweep", "Run a sweep and write its CSV table");
    add_common(sw, true);
    add_seed(sw);
    sw->add_option("--kind", o.kind, "data-scale, compute-tied or model-scale")
        ->required()
        ->check(CLI::IsMember({"data-scale", "compute-tied", "model-scale"}));
    auto* ak = app.add_subcommand("analyze-kernels", "Export kernel decay profiles of SSM checkpoints");
    add_common(ak, true);
    add_seed(ak);
    auto* ver = app.add_subcommand("verify", "Run the oracle and invariant suite");
    add_common(ver, false);

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << "run `sptlab --help` for usage\n";
        return kExitConfig;
    }
    spdlog::set_level(spdlog::level::from_str(level));

    try {
        if (gen->parsed()) return generate_data(o, out);
        if (phases["pretrain"]->parsed()) return train_phase(o, "pretrain", out);
        if (phases["finetune"]->parsed()) return train_phase(o, "finetune", out);
        if (phases["train-scratch"]->parsed()) return train_phase(o, "scratch", out);
        if (sw->parsed()) return sweep(o, out);
        if (ak->parsed()) return analyze_kernels(o, out);
        if (ver->parsed()) return verify(o, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitConfig;
}

}  // namespace spt
