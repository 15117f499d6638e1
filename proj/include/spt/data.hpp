#pragma once
// Task datasets: synthetic generators (ListOps, images, retrieval,
// continuous), external ingestion (text, PGM images), masking plans, nested
// subsets, and the on-disk cache.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/model.hpp"
#include "spt/rng.hpp"

namespace spt {

enum class Modality { ListOps, Text, Image, Continuous, Retrieval };
std::string to_string(Modality m);
Modality parse_modality(const std::string& s);

// One example. Discrete records fill tokens; continuous records fill
// values (length × input_dim). Classification uses label, regression uses
// target.
struct Record {
    std::vector<std::int32_t> tokens;
    std::vector<double> values;
    std::int32_t label = -1;
    std::vector<double> target;
};

struct Splits {
    std::vector<std::size_t> train, val, test;
};

struct TaskDataset {
    Modality modality = Modality::ListOps;
    std::vector<std::string> vocab;  // empty for continuous data
    std::int32_t pad_id = -1;
    std::size_t input_dim = 1;
    std::size_t num_classes = 0;  // 0 for regression
    std::size_t target_dim = 0;   // regression width
    std::size_t max_len = 0;
    std::uint64_t seed = 0;
    nlohmann::json generator;  // generator id and parameters
    std::vector<Record> records;
    Splits splits;

    bool continuous() const { return vocab.empty(); }
    bool regression() const { return num_classes == 0; }
    std::size_t vocab_size() const { return vocab.size(); }
    std::size_t length(std::size_t i) const;
    const std::vector<std::size_t>& split(const std::string& name) const;
    // Splits disjoint and in range, ids below vocab size, lengths ≤ max_len.
    void validate() const;
};

// Model dimensions implied by the data: vocabulary or input width, outputs.
void fit_model_to_data(ModelConfig& cfg, const TaskDataset& data);

// Label-hiding view used by self-pretraining. Sequences are visible;
// label() and target() raise ProtocolError.
class UnlabeledView {
   public:
    UnlabeledView(const TaskDataset& data, std::vector<std::size_t> indices);
    std::size_t size() const { return indices_.size(); }
    const TaskDataset& meta() const { return *data_; }
    // Dataset record index behind view row i.
    std::size_t index(std::size_t i) const { return indices_.at(i); }
    std::size_t length(std::size_t i) const { return data_->length(indices_.at(i)); }
    std::span<const std::int32_t> tokens(std::size_t i) const;
    std::span<const double> values(std::size_t i) const;
    [[noreturn]] std::int32_t label(std::size_t i) const;
    [[noreturn]] std::span<const double> target(std::size_t i) const;

   private:
    const TaskDataset* data_;
    std::vector<std::size_t> indices_;
};

// ---- ListOps ----

// Token table: digits 0–9, then "[MAX" "[MIN" "[MEDIAN" "[SUM_MOD" "[MEAN"
// "]" and the pad token.
namespace listops {
inline constexpr std::int32_t kMax = 10, kMin = 11, kMedian = 12, kSumMod = 13, kMean = 14, kClose = 15, kPad = 16;
inline constexpr std::size_t kVocab = 17;
}  // namespace listops

struct ListOpsOptions {
    std::size_t n = 1000;
    std::size_t max_len = 256;
    std::size_t max_depth = 4;
    std::size_t max_args = 5;
    bool with_mean = false;  // integer-rounded MEAN operator
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;
};

TaskDataset listops_generate(const ListOpsOptions& opts);
// Whitespace/bracket tokenizer for "[MAX 4 3 [MIN 2 3] 1 0]" style text.
std::vector<std::int32_t> listops_tokenize(const std::string& text);
std::string listops_render(std::span<const std::int32_t> tokens);
// Recursive evaluator; malformed input raises ParseError with the token index.
int listops_eval(std::span<const std::int32_t> tokens);
// Independent explicit-stack evaluator.
int listops_eval_stack(std::span<const std::int32_t> tokens);

// ---- text and images ----

// Byte vocabulary 0–255 plus pad (id 256).
inline constexpr std::int32_t kBytePad = 256;
inline constexpr std::size_t kByteVocab = 257;

struct IngestOptions {
    std::size_t max_len = 1024;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;
};

// One document per line, "label<TAB>text"; bytes truncated to max_len.
TaskDataset text_ingest(const std::string& path, const IngestOptions& opts);
// Manifest lines "label<TAB>image.pgm" (paths relative to the manifest);
// P2 or P5 grayscale, square, flattened row-major.
TaskDataset image_ingest(const std::string& manifest, const IngestOptions& opts);
std::vector<std::int32_t> image_tokens(const std::vector<std::vector<int>>& rows);

struct PaddedTokens {
    std::vector<std::int32_t> tokens;
    std::vector<std::uint8_t> loss_mask;
};
PaddedTokens pad_tokens(std::span<const std::int32_t> tokens, std::size_t max_len, std::int32_t pad_id);

struct SyntheticImageOptions {
    std::size_t n = 1000;
    std::size_t side = 8;
    std::size_t classes = 10;
    double noise = 2.5;  // relative to the template contrast
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;
};
// Class templates are smooth low-frequency fields with a class-specific
// mirror coupling between far-apart pixels; samples add noise and a
// brightness offset, quantized to 0–255.
TaskDataset synthetic_images(const SyntheticImageOptions& opts);

// ---- retrieval and continuous ----

// Distractors "d0".."d7" (ids 0–7), key values "v0".."v3" (ids 8–11), pad 12.
struct RetrievalOptions {
    std::size_t n = 1000;
    std::size_t length = 64;
    std::size_t key_distance = 16;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;
};
// Two keys exactly max(1, key_distance) apart; label = (v₁ + v₂) mod 2.
TaskDataset synthetic_retrieval(const RetrievalOptions& opts);
// Recomputes the label from the keys of one record.
int retrieval_label(std::span<const std::int32_t> tokens);

struct ContinuousOptions {
    std::size_t n = 1000;
    std::size_t length = 128;
    std::size_t input_dim = 1;
    std::size_t classes = 4;  // 0 selects regression on the amplitude
    double noise = 0.1;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;
};
// Noisy sinusoids; the class is the frequency band, the regression target
// the amplitude.
TaskDataset synthetic_continuous(const ContinuousOptions& opts);

// Byte sequences with purely local structure: the first `window` letters
// are random, and each later byte copies the one `window` positions back
// unless it is redrawn (probability `resample`). Lag k·window then carries
// (1 − resample)^k of the signal, so distant bytes are nearly useless.
// resample = 0 gives a fully determined repeated motif.
struct LocalTextOptions {
    std::size_t n = 512;
    std::size_t length = 256;
    std::size_t window = 8;
    double resample = 0.3;
    std::uint64_t seed = 0;
};
TaskDataset synthetic_local_text(const LocalTextOptions& opts);

// ---- sampling and masking ----

inline const std::vector<double> kDefaultFractions{0.005, 0.01, 0.05, 0.1, 0.5, 1.0};

// Nested subsets of pool: sizes round(f·n) in the order of fractions, all
// prefixes of one seeded permutation. Empty subset raises ConfigError.
std::vector<std::vector<std::size_t>> subset_sample(const std::vector<std::size_t>& pool,
                                                    const std::vector<double>& fractions, std::uint64_t seed);

// max(1, round(ratio·length)).
std::size_t masked_count(std::size_t length, double ratio);

struct MaskPlan {
    double ratio = 0.15;
    std::uint64_t seed = 0;
    // Sorted unique positions in [0, length) for one record and epoch.
    std::vector<std::size_t> positions(std::size_t length, std::uint64_t record, std::uint64_t epoch = 0) const;
};

struct MaskedRecord {
    std::vector<std::int32_t> tokens;   // corrupted (mask token at targets)
    std::vector<double> values;         // continuous: unchanged, see flags
    std::vector<std::uint8_t> masked;   // 1 at masked positions
    std::vector<std::size_t> positions;
    std::vector<std::int32_t> target_tokens;
    std::vector<double> target_values;  // positions × input_dim
};
MaskedRecord mask_apply(std::span<const std::int32_t> tokens, std::span<const double> values, std::size_t input_dim,
                        const std::vector<std::size_t>& positions, std::int32_t mask_id);

// ---- batching ----

struct Batch {
    ModelInput input;
    std::vector<std::int32_t> labels;   // [B] classification
    std::vector<double> targets;        // [B * target_dim] regression
};
// Pads to the longest sequence in the batch, rounded up to a multiple of
// pad_multiple. Labels are copied only when with_labels is set.
Batch make_batch(const TaskDataset& data, std::span<const std::size_t> indices, std::size_t pad_multiple = 1,
                 bool with_labels = true);
Batch make_batch(const UnlabeledView& view, std::span<const std::size_t> rows, std::size_t pad_multiple = 1);

// ---- cache ----

// Writes <dir>/{train,val,test}.jsonl: a header line (modality, vocab,
// seed, generator, split) then one record per line.
void save_dataset(const TaskDataset& data, const std::string& dir);
TaskDataset load_dataset(const std::string& dir);
// Git-style blob SHA-1 over a canonical serialization of all records and splits.
std::string dataset_hash(const TaskDataset& data);
std::string sha1_hex(const std::string& bytes);

}  // namespace spt
