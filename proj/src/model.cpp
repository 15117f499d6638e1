#include "spt/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "spt/error.hpp"
#include "spt/fft.hpp"

namespace spt {

using nlohmann::json;

std::string to_string(Family f) {
    switch (f) {
        case Family::Transformer: return "transformer";
        case Family::S4: return "s4";
        case Family::Dlr: return "dlr";
    }
    return "?";
}

std::string to_string(Positional p) {
    switch (p) {
        case Positional::Learned: return "learned";
        case Positional::Rotary: return "rotary";
        case Positional::None: return "none";
    }
    return "?";
}

std::string to_string(Pooling p) {
    switch (p) {
        case Pooling::Mean: return "mean";
        case Pooling::Max: return "max";
        case Pooling::Last: return "last";
    }
    return "?";
}

std::string to_string(InitKind k) { return k == InitKind::Structured ? "structured" : "random"; }

Family parse_family(const std::string& s) {
    if (s == "transformer") return Family::Transformer;
    if (s == "s4") return Family::S4;
    if (s == "dlr") return Family::Dlr;
    throw ConfigError("unknown model family '" + s + "'");
}

Positional parse_positional(const std::string& s) {
    if (s == "learned") return Positional::Learned;
    if (s == "rotary") return Positional::Rotary;
    if (s == "none") return Positional::None;
    throw ConfigError("unknown positional scheme '" + s + "'");
}

Pooling parse_pooling(const std::string& s) {
    if (s == "mean") return Pooling::Mean;
    if (s == "max") return Pooling::Max;
    if (s == "last") return Pooling::Last;
    throw ConfigError("unknown pooling '" + s + "'");
}

InitKind parse_init(const std::string& s) {
    if (s == "structured") return InitKind::Structured;
    if (s == "random") return InitKind::Random;
    throw ConfigError("unknown ssm init '" + s + "'");
}

void ModelConfig::validate() const {
    if (width == 0) throw ConfigError("model.width must be positive");
    if (ffn == 0) throw ConfigError("model.ffn must be positive");
    if (max_len == 0) throw ConfigError("model.max_len must be positive");
    if (num_outputs == 0) throw ConfigError("model.num_outputs must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
    if (continuous() && input_dim == 0) throw ConfigError("model.input_dim must be positive for continuous inputs");
    if (family == Family::Transformer) {
        if (heads == 0 || width % heads != 0) throw ConfigError("model.width must be divisible by model.heads");
        if (positional == Positional::Rotary && (width / heads) % 2 != 0)
            throw ConfigError("rotary embeddings need an even head dimension");
    } else {
        if (state_size == 0) throw ConfigError("model.state_size must be positive");
        if (family == Family::S4 && state_size % 2 != 0) throw ConfigError("model.state_size must be even for s4");
        if (positional == Positional::Rotary) throw ConfigError("rotary embeddings apply to transformer models only");
    }
}

json to_json(const ModelConfig& c) {
    return json{{"family", to_string(c.family)},
                {"depth", c.depth},
                {"width", c.width},
                {"ffn", c.ffn},
                {"heads", c.heads},
                {"state_size", c.state_size},
                {"positional", to_string(c.positional)},
                {"bidirectional", c.bidirectional},
                {"pooling", to_string(c.pooling)},
                {"attention_block", c.attention_block},
                {"dropout", c.dropout},
                {"vocab_size", c.vocab_size},
                {"input_dim", c.input_dim},
                {"max_len", c.max_len},
                {"num_outputs", c.num_outputs},
                {"regression", c.regression},
                {"ssm_init", to_string(c.ssm_init)}};
}

namespace {

template <typename T>
T get_as(const json& j, const std::string& key, const std::string& path) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + "." + key + ": wrong type");
    }
}

}  // namespace

ModelConfig model_config_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    static const std::set<std::string> known{"family",  "depth",      "width",         "ffn",         "heads",
                                             "state_size", "positional", "bidirectional", "pooling",
                                             "attention_block", "dropout", "vocab_size", "input_dim", "max_len",
                                             "num_outputs", "regression", "ssm_init"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError(path + "." + k + ": unknown key");
    ModelConfig c;
    auto sz = [&](const char* key, std::size_t& dst) {
        if (j.contains(key)) {
            const auto v = get_as<long long>(j, key, path);
            if (v < 0) throw ConfigError(path + "." + key + ": must be non-negative");
            dst = static_cast<std::size_t>(v);
        }
    };
    if (j.contains("family")) c.family = parse_family(get_as<std::string>(j, "family", path));
    sz("depth", c.depth);
    sz("width", c.width);
    sz("ffn", c.ffn);
    sz("heads", c.heads);
    sz("state_size", c.state_size);
    if (j.contains("positional")) c.positional = parse_positional(get_as<std::string>(j, "positional", path));
    if (j.contains("bidirectional")) c.bidirectional = get_as<bool>(j, "bidirectional", path);
    if (j.contains("pooling")) c.pooling = parse_pooling(get_as<std::string>(j, "pooling", path));
    sz("attention_block", c.attention_block);
    if (j.contains("dropout")) c.dropout = get_as<double>(j, "dropout", path);
    sz("vocab_size", c.vocab_size);
    sz("input_dim", c.input_dim);
    sz("max_len", c.max_len);
    sz("num_outputs", c.num_outputs);
    if (j.contains("regression")) c.regression = get_as<bool>(j, "regression", path);
    if (j.contains("ssm_init")) c.ssm_init = parse_init(get_as<std::string>(j, "ssm_init", path));
    c.validate();
    return c;
}

// Embedding: (V+1)·W for tokens (mask row appended), or D·W + W + W for
// continuous inputs (projection, bias, mask vector); plus max_len·W with
// learned positions.
// Transformer layer: 4W² + 2WF + 6W + F.
// SSM layer: 2W² + 2WF + 7W + F, plus 4N + dirs·W·N + W (s4) or
// 2WN + 2·dirs·W·N (dlr).
// Final norm 2W; denoising head W·Dd + Dd; task head W·O + O.
std::size_t expected_param_count(const ModelConfig& c) {
    const std::size_t w = c.width, f = c.ffn, n = c.state_size, dirs = c.bidirectional ? 2 : 1;
    std::size_t total = c.continuous() ? c.input_dim * w + 2 * w : (c.vocab_size + 1) * w;
    if (c.positional == Positional::Learned) total += c.max_len * w;
    std::size_t layer = 0;
    switch (c.family) {
        case Family::Transformer: layer = 4 * w * w + 2 * w * f + 6 * w + f; break;
        case Family::S4: layer = 2 * w * w + 2 * w * f + 7 * w + f + 4 * n + dirs * w * n + w; break;
        case Family::Dlr: layer = 2 * w * w + 2 * w * f + 7 * w + f + 2 * w * n + 2 * dirs * w * n; break;
    }
    total += c.depth * layer;
    total += 2 * w;
    total += w * c.denoise_dim() + c.denoise_dim();
    total += w * c.num_outputs + c.num_outputs;
    return total;
}

namespace {

Tensor normal_param(Shape shape, double stddev, std::uint64_t seed, const std::string& name) {
    Rng rng = make_rng(seed, "param:" + name);
    return Tensor::randn(std::move(shape), stddev, rng);
}

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

// Output heads start small so initial predictions are close to uniform.
constexpr double kHeadGain = 0.1;

bool is_task_head(const std::string& name) { return name.rfind("head.task.", 0) == 0; }

bool is_ssm_dynamics(const std::string& name) {
    static const char* suffixes[] = {".ssm.lambda", ".ssm.p", ".ssm.q", ".ssm.b", ".ssm.log_dt"};
    for (const char* s : suffixes) {
        const std::size_t n = std::strlen(s);
        if (name.size() >= n && name.compare(name.size() - n, n, s) == 0) return true;
    }
    return false;
}

}  // namespace

Tensor Model::add_param(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, t});
    return t;
}

Tensor Model::p(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("model has no parameter '" + name + "'");
    return params_[it->second].tensor;
}

Tensor Model::parameter(const std::string& name) const { return p(name); }

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t w = cfg_.width, f = cfg_.ffn;
    auto lin = [&](const std::string& name, std::size_t in, std::size_t out, bool bias, double gain = 1.0) {
        add_param(name + ".w", normal_param({in, out}, gain * fan_in_std(in), seed, name + ".w"));
        if (bias) add_param(name + ".b", Tensor::zeros({out}));
    };
    auto norm = [&](const std::string& name) {
        add_param(name + ".g", Tensor::full({w}, 1.0));
        add_param(name + ".b", Tensor::zeros({w}));
    };
    if (cfg_.continuous()) {
        lin("embed.proj", cfg_.input_dim, w, true);
        add_param("embed.mask", normal_param({w}, 1.0, seed, "embed.mask"));
    } else {
        add_param("embed.table", normal_param({cfg_.vocab_size + 1, w}, 1.0, seed, "embed.table"));
    }
    if (cfg_.positional == Positional::Learned)
        add_param("embed.pos", normal_param({cfg_.max_len, w}, 0.5, seed, "embed.pos"));

    const std::size_t dirs = cfg_.bidirectional ? 2 : 1;
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        const std::string pre = "layers." + std::to_string(i);
        Layer layer{i, std::nullopt};
        norm(pre + ".ln1");
        if (cfg_.family == Family::Transformer) {
            lin(pre + ".attn.q", w, w, false);
            lin(pre + ".attn.k", w, w, false);
            lin(pre + ".attn.v", w, w, false);
            lin(pre + ".attn.o", w, w, true);
        } else {
            const std::uint64_t ssm_seed = derive_seed(seed, "ssm-layer", i);
            if (cfg_.family == Family::S4) {
                auto sp = init_dplr(cfg_.ssm_init, cfg_.state_size, w, dirs, ssm_seed);
                sp.lambda = add_param(pre + ".ssm.lambda", sp.lambda);
                sp.p = add_param(pre + ".ssm.p", sp.p);
                sp.q = add_param(pre + ".ssm.q", sp.q);
                sp.b = add_param(pre + ".ssm.b", sp.b);
                sp.c = add_param(pre + ".ssm.c", sp.c);
                sp.log_dt = add_param(pre + ".ssm.log_dt", sp.log_dt);
                layer.ssm = sp;
            } else {
                auto sp = init_dlr(cfg_.ssm_init, cfg_.state_size, w, dirs, ssm_seed);
                sp.lambda = add_param(pre + ".ssm.lambda", sp.lambda);
                sp.c = add_param(pre + ".ssm.c", sp.c);
                layer.ssm = sp;
            }
            lin(pre + ".gate1", w, w, true);
            lin(pre + ".gate2", w, w, true);
        }
        norm(pre + ".ln2");
        lin(pre + ".ffn1", w, f, true);
        lin(pre + ".ffn2", f, w, true);
        layers_.push_back(std::move(layer));
    }
    norm("final_ln");
    lin("head.denoise", w, cfg_.denoise_dim(), true, kHeadGain);
    lin("head.task", w, cfg_.num_outputs, true, kHeadGain);
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& np : params_) n += np.tensor.numel();
    return n;
}

std::vector<ParamGroup> Model::param_groups(double lr, double weight_decay, double ssm_lr) const {
    ParamGroup decay{"decay", {}, lr, weight_decay};
    ParamGroup no_decay{"no_decay", {}, lr, 0.0};
    ParamGroup ssm{"ssm", {}, ssm_lr, 0.0};
    for (const auto& np : params_) {
        if (is_ssm_dynamics(np.name))
            ssm.params.push_back(np.tensor);
        else if (np.tensor.dim() >= 2 && np.name.find(".ssm.") == std::string::npos)
            decay.params.push_back(np.tensor);
        else
            no_decay.params.push_back(np.tensor);
    }
    std::vector<ParamGroup> groups;
    for (auto* g : {&decay, &no_decay, &ssm})
        if (!g->params.empty()) groups.push_back(std::move(*g));
    return groups;
}

void Model::reset_task_head(std::uint64_t seed) {
    const std::size_t w = cfg_.width;
    auto fresh = normal_param({w, cfg_.num_outputs}, kHeadGain * fan_in_std(w), seed, "head.task.w").to_vector();
    auto wt = p("head.task.w").mutable_data();
    std::copy(fresh.begin(), fresh.end(), wt.begin());
    for (auto& v : p("head.task.b").mutable_data()) v = 0.0;
}

void Model::post_step() {
    for (auto& layer : layers_)
        if (layer.ssm)
            if (auto* d = std::get_if<DlrParams>(&*layer.ssm)) clamp_dlr_modulus(*d);
}

std::vector<KernelBank> Model::kernels(std::size_t length) const {
    if (cfg_.family == Family::Transformer) throw UnsupportedFamilyError("transformer models have no SSM kernels");
    NoGradGuard guard;
    std::vector<KernelBank> out;
    for (const auto& layer : layers_) out.push_back(materialize(*layer.ssm, length));
    return out;
}

std::vector<std::string> Model::load_values(const std::vector<NamedTensor>& src, bool skip_task_head) {
    std::vector<std::string> copied;
    for (const auto& s : src) {
        auto it = index_.find(s.name);
        if (it == index_.end()) continue;
        if (skip_task_head && is_task_head(s.name)) continue;
        auto& dst = params_[it->second].tensor;
        if (dst.shape() != s.tensor.shape())
            throw IncompatibleError("parameter '" + s.name + "' has shape " + shape_str(s.tensor.shape()) +
                                    " in the source but " + shape_str(dst.shape()) + " in the model");
        auto d = dst.mutable_data();
        auto v = s.tensor.data();
        std::copy(v.begin(), v.end(), d.begin());
        copied.push_back(s.name);
    }
    return copied;
}

std::vector<std::uint8_t> attention_mask(std::size_t batch, std::size_t length, std::span<const std::size_t> lengths,
                                         bool causal, std::size_t block) {
    if (lengths.size() != batch) throw DimensionError("attention_mask: one length per sequence required");
    const bool local = block > 0 && block < length;
    std::vector<std::uint8_t> allow(batch * length * length, 0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < length; ++i)
            for (std::size_t j = 0; j < lengths[b]; ++j) {
                if (causal && j > i) break;
                if (local) {
                    const std::size_t bi = i / block, bj = j / block;
                    if ((bi > bj ? bi - bj : bj - bi) > 1) continue;
                }
                allow[(b * length + i) * length + j] = 1;
            }
    return allow;
}

Tensor attention(const Tensor& h, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                 const Tensor& bo, std::size_t heads, std::span<const std::uint8_t> allow, bool rotary_on) {
    const std::size_t B = h.size(0), L = h.size(1), W = h.size(2), hd = W / heads;
    auto split = [&](const Tensor& t) { return transpose(reshape(t, {B, L, heads, hd}), 1, 2); };
    Tensor q = split(linear(h, wq));
    Tensor k = split(linear(h, wk));
    Tensor v = split(linear(h, wv));
    if (rotary_on) {
        q = rotary(q);
        k = rotary(k);
    }
    Tensor scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor ctx = bmm(masked_softmax(scores, allow), v);
    return linear(reshape(transpose(ctx, 1, 2), {B, L, W}), wo, bo);
}

Tensor ssm_convolve(const Tensor& h, const Tensor& k) {
    if (k.dim() != 3 || h.dim() != 3 || k.size(1) != h.size(2) || k.size(2) != h.size(1))
        throw DimensionError("ssm_convolve: kernel " + shape_str(k.shape()) + " does not fit input " +
                             shape_str(h.shape()));
    const std::size_t H = k.size(1), L = k.size(2);
    Tensor y = causal_conv(h, reshape(slice(k, 0, 0, 1), {H, L}));
    if (k.size(0) == 2) y = add(y, flip(causal_conv(flip(h, 1), reshape(slice(k, 0, 1, 2), {H, L})), 1));
    return y;
}

Tensor Model::embed(const ModelInput& in) const {
    const std::size_t B = in.batch, L = in.length;
    if (B == 0 || L == 0) throw LengthError("empty batch");
    if (L > cfg_.max_len)
        throw LengthError("sequence length " + std::to_string(L) + " exceeds model max_len " +
                          std::to_string(cfg_.max_len));
    if (in.lengths.size() != B) throw DimensionError("one length per sequence required");
    const bool has_mask = !in.masked.empty();
    if (has_mask && in.masked.size() != B * L) throw DimensionError("mask flags must cover [B, L]");
    Tensor e;
    if (cfg_.continuous()) {
        if (in.values.size() != B * L * cfg_.input_dim) throw DimensionError("continuous input size mismatch");
        e = linear(Tensor::from({B, L, cfg_.input_dim}, in.values), p("embed.proj.w"), p("embed.proj.b"));
        if (has_mask) {
            std::vector<std::uint8_t> keep(B * L);
            for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = in.masked[i] ? 0 : 1;
            e = select_rows(e, keep, p("embed.mask"));
        }
    } else {
        if (in.tokens.size() != B * L) throw DimensionError("token input size mismatch");
        std::vector<std::int32_t> ids(in.tokens);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg_.vocab_size)
                throw VocabularyError("unknown token id " + std::to_string(ids[i]) + " at flat position " +
                                      std::to_string(i));
            if (has_mask && in.masked[i]) ids[i] = static_cast<std::int32_t>(cfg_.vocab_size);
        }
        e = embedding(p("embed.table"), ids, {B, L});
    }
    if (cfg_.positional == Positional::Learned) e = add(e, slice(p("embed.pos"), 0, 0, L));
    return e;
}

namespace {

std::uint64_t site_seed(const BlockDropout& d, std::uint64_t site) { return derive_seed(d.seed, "block-dropout", site); }

}  // namespace

Tensor transformer_block(const Tensor& x, const TransformerBlockWeights& w, std::size_t heads,
                         std::span<const std::uint8_t> allow, bool rotary_on, const BlockDropout& drop) {
    Tensor h = layer_norm(x, w.ln1_g, w.ln1_b);
    Tensor a = attention(h, w.wq, w.wk, w.wv, w.wo, w.bo, heads, allow, rotary_on);
    Tensor y = add(x, dropout(a, drop.p, site_seed(drop, 0), drop.training));
    Tensor f = linear(gelu(linear(layer_norm(y, w.ln2_g, w.ln2_b), w.w1, w.b1)), w.w2, w.b2);
    return add(y, dropout(f, drop.p, site_seed(drop, 1), drop.training));
}

Tensor ssm_block(const Tensor& x, const Tensor& kernel, const SsmBlockWeights& w, std::span<const std::uint8_t> valid,
                 const BlockDropout& drop) {
    Tensor h = layer_norm(x, w.ln1_g, w.ln1_b);
    bool padded = false;
    for (auto v : valid) padded = padded || !v;
    if (padded) h = select_rows(h, valid);
    Tensor y = ssm_convolve(h, kernel);
    Tensor g = mul(gelu(linear(y, w.gate1_w, w.gate1_b)), linear(y, w.gate2_w, w.gate2_b));
    Tensor z = add(x, dropout(g, drop.p, site_seed(drop, 0), drop.training));
    Tensor f = linear(gelu(linear(layer_norm(z, w.ln2_g, w.ln2_b), w.w1, w.b1)), w.w2, w.b2);
    return add(z, dropout(f, drop.p, site_seed(drop, 1), drop.training));
}

TransformerBlockWeights Model::transformer_weights(std::size_t layer) const {
    const std::string pre = "layers." + std::to_string(layer);
    return {p(pre + ".ln1.g"),    p(pre + ".ln1.b"),    p(pre + ".attn.q.w"), p(pre + ".attn.k.w"),
            p(pre + ".attn.v.w"), p(pre + ".attn.o.w"), p(pre + ".attn.o.b"), p(pre + ".ln2.g"),
            p(pre + ".ln2.b"),    p(pre + ".ffn1.w"),   p(pre + ".ffn1.b"),   p(pre + ".ffn2.w"),
            p(pre + ".ffn2.b")};
}

SsmBlockWeights Model::ssm_weights(std::size_t layer) const {
    const std::string pre = "layers." + std::to_string(layer);
    return {p(pre + ".ln1.g"),   p(pre + ".ln1.b"),  p(pre + ".gate1.w"), p(pre + ".gate1.b"),
            p(pre + ".gate2.w"), p(pre + ".gate2.b"), p(pre + ".ln2.g"),   p(pre + ".ln2.b"),
            p(pre + ".ffn1.w"),  p(pre + ".ffn1.b"), p(pre + ".ffn2.w"),  p(pre + ".ffn2.b")};
}

ModelOutput Model::forward(const ModelInput& in, const ForwardOptions& opts) const {
    for (auto len : in.lengths)
        if (len == 0 || len > in.length) throw LengthError("sequence length out of range for the padded batch");
    const std::size_t B = in.batch, L = in.length;
    Tensor x = embed(in);
    x = dropout(x, cfg_.dropout, derive_seed(opts.dropout_seed, "embed-dropout"), opts.training);

    std::vector<std::uint8_t> allow, valid;
    if (cfg_.family == Family::Transformer) {
        std::size_t block = cfg_.attention_block;
        if (block > 0 && block < L && L % block != 0)
            throw ConfigError("attention block " + std::to_string(block) + " does not divide padded length " +
                              std::to_string(L));
        if (block > 0 && block >= L) {
            static bool logged = false;
            if (!logged) spdlog::info("attention block {} >= length {}; using full attention", block, L);
            logged = true;
            block = 0;
        }
        allow = attention_mask(B, L, in.lengths, cfg_.causal(), block);
    } else {
        valid.resize(B * L);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l) valid[b * L + l] = l < in.lengths[b] ? 1 : 0;
    }
    for (const auto& layer : layers_) {
        const BlockDropout drop{cfg_.dropout, derive_seed(opts.dropout_seed, "layer", layer.index), opts.training};
        if (cfg_.family == Family::Transformer)
            x = transformer_block(x, transformer_weights(layer.index), cfg_.heads, allow,
                                  cfg_.positional == Positional::Rotary, drop);
        else
            x = ssm_block(x, materialize(*layer.ssm, L).values, ssm_weights(layer.index), valid, drop);
    }
    ModelOutput out;
    out.sequence_states = x;
    out.pooled = pool(x, cfg_.pooling, in.lengths);
    if (opts.classify)
        out.logits = linear(layer_norm(out.pooled, p("final_ln.g"), p("final_ln.b")), p("head.task.w"),
                            p("head.task.b"));
    if (opts.denoise)
        out.denoise = linear(layer_norm(x, p("final_ln.g"), p("final_ln.b")), p("head.denoise.w"),
                             p("head.denoise.b"));
    return out;
}

namespace {

constexpr char kMagic[8] = {'S', 'P', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_doubles(std::string& out, std::span<const double> v) {
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
   public:
    Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::vector<double> doubles(std::size_t n) {
        need(n * sizeof(double));
        std::vector<double> v(n);
        std::memcpy(v.data(), data_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
        return v;
    }
    bool done() const { return pos_ == data_.size(); }

   private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) throw IoError("checkpoint '" + path_ + "' is truncated");
    }
    std::string data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_parameters(const std::vector<NamedTensor>& params) {
    std::string out;
    put<std::uint64_t>(out, params.size());
    for (const auto& np : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(np.name.size()));
        out += np.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(np.tensor.dim()));
        for (auto d : np.tensor.shape()) put<std::uint64_t>(out, d);
        put_doubles(out, np.tensor.data());
    }
    return out;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::vector<NamedTensor>& params,
                     const OptimizerState* opt, const json& extra) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    json header{{"model", to_json(cfg)}, {"extra", extra}};
    const std::string hs = header.dump();
    put<std::uint64_t>(out, hs.size());
    out += hs;
    out += serialize_parameters(params);
    put<std::uint8_t>(out, opt ? 1 : 0);
    if (opt) {
        put<std::uint64_t>(out, opt->step);
        put<std::uint64_t>(out, opt->first_moment.size());
        for (std::size_t i = 0; i < opt->first_moment.size(); ++i) {
            put<std::uint64_t>(out, opt->first_moment[i].size());
            put_doubles(out, opt->first_moment[i]);
            put_doubles(out, opt->second_moment[i]);
        }
    }
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint '" + path + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("short write to checkpoint '" + path + "'");
    }
    fs::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("checkpoint '" + path + "' not found");
    std::stringstream ss;
    ss << f.rdbuf();
    Reader r(ss.str(), path);
    if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw IoError("'" + path + "' is not a checkpoint file");
    if (r.get<std::uint32_t>() != kVersion) throw IoError("unsupported checkpoint version in '" + path + "'");
    json header;
    try {
        header = json::parse(r.bytes(r.get<std::uint64_t>()));
    } catch (const json::exception&) {
        throw IoError("corrupt checkpoint header in '" + path + "'");
    }
    Checkpoint ck;
    ck.config = model_config_from_json(header.at("model"));
    ck.extra = header.value("extra", json{});
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.get<std::uint32_t>());
        const auto nd = r.get<std::uint32_t>();
        Shape shape(nd);
        for (auto& d : shape) d = r.get<std::uint64_t>();
        ck.params.push_back({std::move(name), Tensor::from(shape, r.doubles(numel_of(shape)))});
    }
    if (r.get<std::uint8_t>()) {
        OptimizerState st;
        st.step = r.get<std::uint64_t>();
        const auto slots = r.get<std::uint64_t>();
        for (std::uint64_t i = 0; i < slots; ++i) {
            const auto n = r.get<std::uint64_t>();
            st.first_moment.push_back(r.doubles(n));
            st.second_moment.push_back(r.doubles(n));
        }
        ck.optimizer = std::move(st);
    }
    if (!r.done()) throw IoError("trailing bytes in checkpoint '" + path + "'");
    return ck;
}

}  // namespace spt
