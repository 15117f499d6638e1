#pragma once
// Experiment sweeps over paired scratch/SPT runs: data scale, compute-tied
// budget splits, and model scale. Every cell is cached on disk under the
// SHA-1 of its full configuration, so an interrupted sweep resumes without
// recomputing finished cells.

#include <string>
#include <vector>

#include "spt/train.hpp"

namespace spt {

struct ModelScale {
    std::string name;
    std::size_t width = 64;
    std::size_t depth = 2;
    std::size_t ffn = 0;         // 0: twice the width
    std::size_t state_size = 0;  // 0: keep the plan's value
};

struct SweepSettings {
    std::vector<double> fractions = kDefaultFractions;
    // SPT update count held fixed across data fractions; 0 uses the plan's
    // pretrain phase unchanged.
    std::size_t pretrain_steps = 0;
    // Finetune update count for every fraction; 0 uses plan epochs.
    std::size_t finetune_steps = 0;
    // With fixed step budgets small subsets run many short epochs; each
    // phase then validates at most this many times.
    std::size_t max_evals = 10;
    std::size_t total_epochs = 10;
    std::vector<double> ratios{0.0, 0.2, 0.4, 0.6};
    std::vector<ModelScale> scales;
    // Finetune learning-rate grid; each cell keeps the rate with the best
    // validation metric. Empty: the plan's rate.
    std::vector<double> finetune_lrs;
};

nlohmann::json to_json(const SweepSettings& s);
SweepSettings sweep_settings_from_json(const nlohmann::json& j, const std::string& path = "sweep");

struct DataScaleRow {
    double fraction = 0.0;
    std::uint64_t seed = 0;
    std::size_t train_records = 0;
    std::size_t pretrain_steps = 0;
    std::size_t finetune_steps = 0;
    double scratch = 0.0;
    double spt = 0.0;
    double relative_gain = 0.0;  // (spt − scratch) / scratch
};

struct ComputeTiedRow {
    double ratio = 0.0;
    std::uint64_t seed = 0;
    std::size_t pretrain_epochs = 0;
    std::size_t finetune_epochs = 0;
    double metric = 0.0;
};

struct ModelScaleRow {
    std::string scale;
    std::uint64_t seed = 0;
    std::size_t params = 0;
    double scratch = 0.0;
    double spt = 0.0;
    double relative_gain = 0.0;
};

// Where sweep cells are cached; empty disables caching.
struct SweepOutput {
    std::string cache_dir;
};

// (spt − scratch) / |scratch|; NaN when scratch is zero.
double relative_gain(double spt, double scratch);

// Integer split of a total epoch budget: floor(ratio·total) pretraining,
// the remainder finetuning.
std::pair<std::size_t, std::size_t> split_epochs(std::size_t total, double ratio);

// One row per (fraction, seed), fractions in the given order.
std::vector<DataScaleRow> sweep_data_scale(const TrainPlan& plan, const SweepSettings& s, const TaskDataset& data,
                                           const SweepOutput& out = {});
// One row per (ratio, seed); ratio 0 is trained from scratch.
std::vector<ComputeTiedRow> sweep_compute_tied(const TrainPlan& plan, const SweepSettings& s, const TaskDataset& data,
                                               const SweepOutput& out = {});
std::vector<ModelScaleRow> sweep_model_scale(const TrainPlan& plan, const SweepSettings& s, const TaskDataset& data,
                                             const SweepOutput& out = {});

// A paired comparison for one seed on the given training rows: SPT then
// finetune against train_scratch, both with identical finetune batches.
struct PairedResult {
    RunRecord pretrain, finetune, scratch;
};
PairedResult paired_run(const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                        const std::vector<std::size_t>& train_indices);

// CSV with a header row; numbers printed with %.17g.
std::string to_csv(const std::vector<DataScaleRow>& rows);
std::string to_csv(const std::vector<ComputeTiedRow>& rows);
std::string to_csv(const std::vector<ModelScaleRow>& rows);
// Atomic write (temp file + rename).
void write_text(const std::string& path, const std::string& text);

}  // namespace spt
