#pragma once
// Stacked sequence models: token/continuous embedding, SSM or Transformer
// blocks, pooling, and two heads (per-position denoising and a pooled task
// head). Both heads apply the shared final layer norm before projecting.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/ops.hpp"
#include "spt/optim.hpp"
#include "spt/ssm.hpp"

namespace spt {

enum class Family { Transformer, S4, Dlr };
enum class Positional { Learned, Rotary, None };

std::string to_string(Family f);
std::string to_string(Positional p);
std::string to_string(Pooling p);
std::string to_string(InitKind k);
Family parse_family(const std::string& s);
Positional parse_positional(const std::string& s);
Pooling parse_pooling(const std::string& s);
InitKind parse_init(const std::string& s);

struct ModelConfig {
    Family family = Family::Dlr;
    std::size_t depth = 2;
    std::size_t width = 64;
    std::size_t ffn = 128;
    std::size_t heads = 4;
    std::size_t state_size = 32;
    Positional positional = Positional::None;
    bool bidirectional = true;
    Pooling pooling = Pooling::Mean;
    std::size_t attention_block = 0;  // 0: full attention
    double dropout = 0.0;
    std::size_t vocab_size = 0;  // 0 selects continuous inputs
    std::size_t input_dim = 1;
    std::size_t max_len = 256;
    std::size_t num_outputs = 10;  // classes, or regression targets
    bool regression = false;
    InitKind ssm_init = InitKind::Structured;

    bool continuous() const { return vocab_size == 0; }
    bool causal() const { return !bidirectional; }
    // Denoising head width: vocabulary entries or input channels.
    std::size_t denoise_dim() const { return continuous() ? input_dim : vocab_size; }
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
// Unknown keys raise ConfigError with the offending path.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

// Closed-form parameter count; see README for the formula.
std::size_t expected_param_count(const ModelConfig& cfg);

struct ModelInput {
    std::size_t batch = 0;
    std::size_t length = 0;  // padded length
    std::vector<std::int32_t> tokens;  // [B*L] when discrete
    std::vector<double> values;        // [B*L*input_dim] when continuous
    std::vector<std::size_t> lengths;  // valid prefix per sequence
    std::vector<std::uint8_t> masked;  // optional [B*L]; 1 = replace by mask token/vector
};

struct ForwardOptions {
    bool training = false;
    std::uint64_t dropout_seed = 0;
    bool classify = true;
    bool denoise = false;
};

struct ModelOutput {
    Tensor sequence_states;  // [B, L, width], trunk output before the head norm
    Tensor pooled;           // [B, width]
    Tensor logits;           // [B, num_outputs] when classify
    Tensor denoise;          // [B, L, denoise_dim] when denoise
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Allowed-key mask [B, L, L] for attention: key j visible to query i iff j
// is a valid position, j ≤ i when causal, and block(j) ∈ {block(i)-1,
// block(i), block(i)+1} when block > 0.
std::vector<std::uint8_t> attention_mask(std::size_t batch, std::size_t length, std::span<const std::size_t> lengths,
                                         bool causal, std::size_t block);

// Multi-head attention on already-normalized input h[B, L, W].
Tensor attention(const Tensor& h, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                 const Tensor& bo, std::size_t heads, std::span<const std::uint8_t> allow, bool rotary_on);

// SSM mixing: per-channel causal convolution of h[B, L, H] with kernel
// bank k[dirs, H, L]; direction 1 runs on the reversed sequence.
Tensor ssm_convolve(const Tensor& h, const Tensor& k);

struct BlockDropout {
    double p = 0.0;
    std::uint64_t seed = 0;
    bool training = false;
};

struct TransformerBlockWeights {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

// Pre-norm block: x + Attn(LN(x)), then + FFN(LN(·)).
Tensor transformer_block(const Tensor& x, const TransformerBlockWeights& w, std::size_t heads,
                         std::span<const std::uint8_t> allow, bool rotary_on, const BlockDropout& drop = {});

struct SsmBlockWeights {
    Tensor ln1_g, ln1_b, gate1_w, gate1_b, gate2_w, gate2_b, ln2_g, ln2_b, w1, b1, w2, b2;
};

// x + GELU(W₁y) ⊙ (W₂y) with y the SSM convolution of LN(x) (pad rows
// zeroed via valid), then + FFN(LN(·)).
Tensor ssm_block(const Tensor& x, const Tensor& kernel, const SsmBlockWeights& w, std::span<const std::uint8_t> valid,
                 const BlockDropout& drop = {});

class Model {
   public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ModelOutput forward(const ModelInput& in, const ForwardOptions& opts = {}) const;

    // Canonical order; names are stable across runs.
    const std::vector<NamedTensor>& parameters() const { return params_; }
    Tensor parameter(const std::string& name) const;
    std::size_t parameter_count() const;

    // Optimizer groups: SSM dynamics (Λ, P, Q, B, log Δ) apart from the rest.
    std::vector<ParamGroup> param_groups(double lr, double weight_decay, double ssm_lr) const;

    // Fresh pooled head drawn from seed; everything else untouched.
    void reset_task_head(std::uint64_t seed);
    // Called after every optimizer step (DLR modulus clamp).
    void post_step();

    // Materialized kernels per layer, no tape. Throws UnsupportedFamilyError for
    // Transformer models.
    std::vector<KernelBank> kernels(std::size_t length) const;

    // Copies values for every name present in both; shape mismatch raises
    // IncompatibleError. Returns the names copied.
    std::vector<std::string> load_values(const std::vector<NamedTensor>& src, bool skip_task_head);

   private:
    struct Layer {
        std::size_t index = 0;
        std::optional<SsmParams> ssm;
    };
    Tensor add_param(const std::string& name, Tensor t);
    Tensor p(const std::string& name) const;
    Tensor embed(const ModelInput& in) const;
    TransformerBlockWeights transformer_weights(std::size_t layer) const;
    SsmBlockWeights ssm_weights(std::size_t layer) const;

    ModelConfig cfg_;
    std::vector<NamedTensor> params_;
    std::map<std::string, std::size_t> index_;
    std::vector<Layer> layers_;
};

// Binary checkpoint: magic, version, config JSON, named parameters, and an
// optional optimizer section.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::vector<NamedTensor>& params,
                     const OptimizerState* opt = nullptr, const nlohmann::json& extra = {});

struct Checkpoint {
    ModelConfig config;
    std::vector<NamedTensor> params;
    std::optional<OptimizerState> optimizer;
    nlohmann::json extra;
};
Checkpoint load_checkpoint(const std::string& path);
// Bytes of the parameter section alone, for round-trip comparisons.
std::string serialize_parameters(const std::vector<NamedTensor>& params);

}  // namespace spt
