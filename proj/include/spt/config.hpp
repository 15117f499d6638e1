#pragma once
// Experiment configuration: one JSON document with task, model, train,
// sweep and analysis blocks. Every block is validated up front and unknown
// keys are errors naming their path.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/data.hpp"
#include "spt/sweep.hpp"
#include "spt/train.hpp"

namespace spt {

enum class TaskKind { ListOps, Retrieval, SyntheticImages, Continuous, LocalText, Text, Image };
std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

struct TaskConfig {
    TaskKind kind = TaskKind::ListOps;
    // Only the options of `kind` are read or echoed.
    ListOpsOptions listops;
    RetrievalOptions retrieval;
    SyntheticImageOptions images;
    ContinuousOptions continuous;
    LocalTextOptions local_text;
    IngestOptions ingest;
    std::string source;  // text: "label<TAB>text" file; image: PGM manifest
};

nlohmann::json to_json(const TaskConfig& t);
TaskConfig task_config_from_json(const nlohmann::json& j, const std::string& path = "task");
// Generates or ingests the dataset described by t. Relative sources are
// taken from base_dir.
TaskDataset build_task(const TaskConfig& t, const std::string& base_dir = "");

enum class KernelStage { Pretrain, Finetune };

struct AnalysisSettings {
    std::size_t length = 0;      // kernel length; 0 uses the dataset max_len
    KernelStage stage = KernelStage::Pretrain;
    double l0_fraction = 0.25;   // tail threshold as a fraction of length
};

nlohmann::json to_json(const AnalysisSettings& a);
AnalysisSettings analysis_from_json(const nlohmann::json& j, const std::string& path = "analysis");

struct ExperimentConfig {
    std::string name = "experiment";
    // Resolved output root: the config's output_dir, else $SPTLAB_OUT, else "runs".
    std::string output_dir;
    TaskConfig task;
    TrainPlan train;  // train.model is the model block
    SweepSettings sweep;
    AnalysisSettings analysis;
    std::string base_dir;  // directory of the config file, for relative paths
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::string& base_dir = "");
// Reads and validates a config file; unreadable or malformed JSON is a
// ConfigError too.
ExperimentConfig load_experiment(const std::string& path);

// <output_dir>/<name>/...
struct RunLayout {
    std::string root;

    explicit RunLayout(const ExperimentConfig& c);
    std::string data_dir() const;
    std::string resolved_config() const;
    std::string seed_dir(std::uint64_t seed) const;
    // phase: pretrain | finetune | scratch
    std::string phase_dir(std::uint64_t seed, const std::string& phase) const;
    std::string record(std::uint64_t seed, const std::string& phase) const;
    std::string kernels_dir(std::uint64_t seed) const;
    std::string sweep_csv(const std::string& kind) const;
    std::string sweep_cells() const;
};

// Writes the dataset cache with a stamp of the task block it came from.
void write_task_cache(const ExperimentConfig& c, const TaskDataset& data);
// Loads the cache. A missing cache, or one stamped by a different task
// block, raises MissingArtifactError naming generate-data.
TaskDataset load_task_cache(const ExperimentConfig& c);

// Training rows for one seed: the whole train split, or the nested subset
// of train.data_fraction drawn from the seed's subset stream.
std::vector<std::size_t> training_rows(const TrainPlan& plan, const TaskDataset& data, std::uint64_t seed);

}  // namespace spt
