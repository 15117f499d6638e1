#pragma once
// Self-pretraining, finetuning and from-scratch training. Every source of
// randomness (init, batch order, masks, dropout) is a named stream derived
// from the plan seed, so runs are reproducible and resumable per epoch.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/data.hpp"
#include "spt/model.hpp"

namespace spt {

enum class Objective { Causal, Masked, Supervised };
std::string to_string(Objective o);
Objective parse_objective(const std::string& s);

struct PhaseSettings {
    std::size_t epochs = 10;
    std::size_t steps = 0;  // > 0 fixes the update count instead of epochs
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double ssm_lr = 1e-3;
    double weight_decay = 0.01;
    double warmup_fraction = 0.1;
    double grad_clip = 1.0;  // ≤ 0 disables clipping
    std::size_t patience = 0;  // evaluations without improvement; 0 disables
    std::size_t eval_batch_size = 64;
    // Validate every this many epochs (and after the last one).
    std::size_t eval_every = 1;
};

struct TrainPlan {
    ModelConfig model;
    Objective objective = Objective::Masked;  // pretraining objective
    double mask_ratio = 0.15;
    PhaseSettings pretrain;
    PhaseSettings finetune;
    bool normalize_labels = false;
    std::vector<std::uint64_t> seeds{0};
    double data_fraction = 1.0;
    Precision precision = Precision::Float64;
    std::size_t pad_multiple = 1;

    // Objective/direction agreement, ratios and fractions in range.
    void validate() const;
};

nlohmann::json to_json(const PhaseSettings& p);
nlohmann::json to_json(const TrainPlan& p);
// Unknown keys raise ConfigError naming the path.
PhaseSettings phase_from_json(const nlohmann::json& j, const std::string& path, PhaseSettings base = {});
TrainPlan train_plan_from_json(const nlohmann::json& j, const ModelConfig& model, const std::string& path = "train");

// Affine map of regression targets onto [−1, 1] per target dimension,
// fitted on the training split only.
struct LabelNormalizer {
    std::vector<double> lo, hi;
    static LabelNormalizer fit(const TaskDataset& data, const std::vector<std::size_t>& indices);
    void normalize(std::vector<double>& targets) const;
    void denormalize(std::vector<double>& targets) const;
};

// One entry per validation pass; train_loss averages the batches since the
// previous one.
struct EpochMetrics {
    std::size_t epoch = 0;  // 1-based
    std::size_t steps = 0;  // cumulative optimizer steps
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_metric = 0.0;  // accuracy or R², or denoising accuracy; higher is better
};

struct EvalResult {
    double loss = 0.0;
    double metric = 0.0;  // accuracy, R², or (denoising) accuracy / −L1
    std::size_t count = 0;
};

struct RunRecord {
    std::string phase;  // pretrain | finetune | scratch
    std::uint64_t seed = 0;
    nlohmann::json config;
    std::string dataset_hash;
    std::vector<EpochMetrics> epochs;
    std::size_t best_epoch = 0;  // 0: the initial state
    std::string best_checkpoint;
    std::string selection_metric;
    double best_val_metric = 0.0;  // selection metric at best_epoch
    std::optional<EvalResult> test;
    std::size_t train_records = 0;
    std::size_t total_steps = 0;
    double wall_seconds = 0.0;  // kept out of the record file, see save_run_record

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
};

// Writes <path> atomically and the wall time into run_timing.json next to
// it, so the record itself is identical across reruns.
void save_run_record(const RunRecord& r, const std::string& path);
RunRecord load_run_record(const std::string& path);

// Where a phase keeps its artifacts. Empty dir: nothing is written.
struct PhaseOutput {
    std::string dir;
    // Continue from <dir>/last.ckpt when present.
    bool resume = false;
    // Stop after this many epochs in this process (for resume tests); 0: no limit.
    std::size_t stop_after = 0;
};

// Denoising pretraining on unlabeled sequences. The model ends at its best
// validation state. Never touches labels.
RunRecord pretrain(Model& model, const TrainPlan& plan, std::uint64_t seed, const UnlabeledView& train,
                   const UnlabeledView& val, const PhaseOutput& out = {});

// Supervised training of every parameter with a fresh task head; test
// metrics are computed once at the end with the best validation state.
RunRecord finetune(Model& model, const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                   const std::vector<std::size_t>& train_indices, const PhaseOutput& out = {});
// finetune() on a freshly initialized model.
RunRecord train_scratch(const TrainPlan& plan, std::uint64_t seed, const TaskDataset& data,
                        const std::vector<std::size_t>& train_indices, const PhaseOutput& out = {});

// Loads an SPT checkpoint into a new model for plan.model; trunk shape
// mismatches raise IncompatibleError.
Model model_from_checkpoint(const std::string& path, const ModelConfig& cfg, std::uint64_t seed);

// Evaluation helpers (no tape).
EvalResult evaluate_supervised(const Model& model, const TaskDataset& data, const std::vector<std::size_t>& indices,
                               std::size_t batch_size, const LabelNormalizer* norm = nullptr,
                               std::size_t pad_multiple = 1);
EvalResult evaluate_denoising(const Model& model, const UnlabeledView& view, Objective objective, double mask_ratio,
                              std::uint64_t mask_seed, std::size_t batch_size, std::size_t pad_multiple = 1);

// Denoising loss for one batch of view rows (mask drawn for `epoch`).
Tensor denoising_loss(const Model& model, const UnlabeledView& view, std::span<const std::size_t> rows,
                      Objective objective, const MaskPlan& plan, std::uint64_t epoch, const ForwardOptions& fo,
                      std::size_t pad_multiple, std::size_t* correct = nullptr, std::size_t* targets = nullptr);

}  // namespace spt
