#include "spt/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "spt/error.hpp"

namespace spt {

namespace fs = std::filesystem;

std::string to_string(Modality m) {
    switch (m) {
        case Modality::ListOps: return "listops";
        case Modality::Text: return "text";
        case Modality::Image: return "image";
        case Modality::Continuous: return "continuous";
        case Modality::Retrieval: return "retrieval";
    }
    return "?";
}

Modality parse_modality(const std::string& s) {
    for (auto m : {Modality::ListOps, Modality::Text, Modality::Image, Modality::Continuous, Modality::Retrieval})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown modality '" + s + "'");
}

std::size_t TaskDataset::length(std::size_t i) const {
    const Record& r = records.at(i);
    return continuous() ? r.values.size() / input_dim : r.tokens.size();
}

const std::vector<std::size_t>& TaskDataset::split(const std::string& name) const {
    if (name == "train") return splits.train;
    if (name == "val") return splits.val;
    if (name == "test") return splits.test;
    throw UsageError("unknown split '" + name + "'");
}

void TaskDataset::validate() const {
    std::vector<std::uint8_t> seen(records.size(), 0);
    for (const auto* s : {&splits.train, &splits.val, &splits.test})
        for (auto i : *s) {
            if (i >= records.size()) throw UsageError("split index " + std::to_string(i) + " out of range");
            if (seen[i]) throw UsageError("record " + std::to_string(i) + " appears in two splits");
            seen[i] = 1;
        }
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto len = length(i);
        if (len == 0 || len > max_len)
            throw LengthError("record " + std::to_string(i) + " has length " + std::to_string(len));
        for (auto t : records[i].tokens)
            if (t < 0 || static_cast<std::size_t>(t) >= vocab.size())
                throw VocabularyError("record " + std::to_string(i) + " has token " + std::to_string(t));
        if (!regression() && (records[i].label < 0 || static_cast<std::size_t>(records[i].label) >= num_classes))
            throw UsageError("record " + std::to_string(i) + " has label " + std::to_string(records[i].label));
    }
}

void fit_model_to_data(ModelConfig& cfg, const TaskDataset& data) {
    if (data.continuous()) {
        cfg.vocab_size = 0;
        cfg.input_dim = data.input_dim;
    } else {
        cfg.vocab_size = data.vocab_size();
    }
    cfg.regression = data.regression();
    cfg.num_outputs = data.regression() ? data.target_dim : data.num_classes;
    cfg.max_len = std::max(cfg.max_len, data.max_len);
}

UnlabeledView::UnlabeledView(const TaskDataset& data, std::vector<std::size_t> indices)
    : data_(&data), indices_(std::move(indices)) {}

std::span<const std::int32_t> UnlabeledView::tokens(std::size_t i) const { return data_->records.at(indices_.at(i)).tokens; }
std::span<const double> UnlabeledView::values(std::size_t i) const { return data_->records.at(indices_.at(i)).values; }

std::int32_t UnlabeledView::label(std::size_t) const {
    throw ProtocolError("labels are not readable during self-pretraining");
}
std::span<const double> UnlabeledView::target(std::size_t) const {
    throw ProtocolError("regression targets are not readable during self-pretraining");
}

namespace {

Splits make_splits(std::size_t n, double val_fraction, double test_fraction, std::uint64_t seed) {
    if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0)
        throw ConfigError("split fractions must be ≥ 0 and leave a training split");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng = make_rng(seed, "splits");
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto nv = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    const auto nt = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    Splits s;
    s.val.assign(perm.begin(), perm.begin() + static_cast<long>(nv));
    s.test.assign(perm.begin() + static_cast<long>(nv), perm.begin() + static_cast<long>(nv + nt));
    s.train.assign(perm.begin() + static_cast<long>(nv + nt), perm.end());
    for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
    return s;
}

std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// ---- ListOps ----

const std::array<const char*, listops::kVocab> kListOpsNames{"0", "1",       "2",       "3",        "4",     "5",
                                                             "6", "7",       "8",       "9",        "[MAX",  "[MIN",
                                                             "[MEDIAN", "[SUM_MOD", "[MEAN", "]", "<pad>"};

bool is_op(std::int32_t t) { return t >= listops::kMax && t <= listops::kMean; }

int apply_op(std::int32_t op, std::vector<int>& args) {
    switch (op) {
        case listops::kMax: return *std::max_element(args.begin(), args.end());
        case listops::kMin: return *std::min_element(args.begin(), args.end());
        case listops::kMedian: {
            std::sort(args.begin(), args.end());
            return args[(args.size() - 1) / 2];
        }
        case listops::kSumMod: return std::accumulate(args.begin(), args.end(), 0) % 10;
        case listops::kMean: {
            const int n = static_cast<int>(args.size());
            return (2 * std::accumulate(args.begin(), args.end(), 0) + n) / (2 * n);
        }
        default: break;
    }
    throw UsageError("not an operator");
}

int eval_rec(std::span<const std::int32_t> t, std::size_t& pos) {
    if (pos >= t.size()) throw ParseError("expected an operator, found end of input", pos);
    if (!is_op(t[pos])) throw ParseError("expected an operator", pos);
    const std::int32_t op = t[pos++];
    std::vector<int> args;
    while (true) {
        if (pos >= t.size()) throw ParseError("missing ']'", pos);
        const std::int32_t tok = t[pos];
        if (tok == listops::kClose) {
            if (args.empty()) throw ParseError("operator without arguments", pos);
            ++pos;
            return apply_op(op, args);
        }
        if (tok >= 0 && tok <= 9) {
            args.push_back(tok);
            ++pos;
        } else if (is_op(tok)) {
            args.push_back(eval_rec(t, pos));
        } else {
            throw ParseError("unexpected token", pos);
        }
    }
}

void gen_expr(Rng& rng, const ListOpsOptions& o, std::size_t depth, std::vector<std::int32_t>& out) {
    const std::int32_t last_op = o.with_mean ? listops::kMean : listops::kSumMod;
    out.push_back(static_cast<std::int32_t>(uniform_index(rng, listops::kMax, static_cast<std::size_t>(last_op))));
    const std::size_t nargs = uniform_index(rng, 2, std::max<std::size_t>(2, o.max_args));
    std::bernoulli_distribution nest(0.35);
    for (std::size_t a = 0; a < nargs; ++a) {
        if (depth > 1 && nest(rng))
            gen_expr(rng, o, depth - 1, out);
        else
            out.push_back(static_cast<std::int32_t>(uniform_index(rng, 0, 9)));
    }
    out.push_back(listops::kClose);
}

}  // namespace

std::vector<std::int32_t> listops_tokenize(const std::string& text) {
    std::vector<std::int32_t> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const char c = text[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (c == ']') {
            out.push_back(listops::kClose);
            ++i;
            continue;
        }
        std::size_t j = i + 1;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != ']' && text[j] != '[')
            ++j;
        const std::string word = text.substr(i, j - i);
        const auto* hit = std::find(kListOpsNames.begin(), kListOpsNames.begin() + listops::kClose, word);
        if (hit == kListOpsNames.begin() + listops::kClose) throw ParseError("unknown token '" + word + "'", out.size());
        out.push_back(static_cast<std::int32_t>(hit - kListOpsNames.begin()));
        i = j;
    }
    return out;
}

std::string listops_render(std::span<const std::int32_t> tokens) {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto t = tokens[i];
        if (t < 0 || static_cast<std::size_t>(t) >= listops::kVocab) throw VocabularyError("not a ListOps token");
        if (t == listops::kPad) break;
        if (!s.empty() && t != listops::kClose) s += ' ';
        s += kListOpsNames[static_cast<std::size_t>(t)];
    }
    return s;
}

int listops_eval(std::span<const std::int32_t> tokens) {
    std::size_t pos = 0;
    const int v = eval_rec(tokens, pos);
    if (pos != tokens.size()) throw ParseError("trailing tokens after expression", pos);
    return v;
}

int listops_eval_stack(std::span<const std::int32_t> tokens) {
    struct Frame {
        std::int32_t op;
        std::vector<int> args;
    };
    std::vector<Frame> stack;
    std::optional<int> result;
    for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
        const auto t = tokens[pos];
        if (result) throw ParseError("trailing tokens after expression", pos);
        if (is_op(t)) {
            stack.push_back({t, {}});
        } else if (t >= 0 && t <= 9) {
            if (stack.empty()) throw ParseError("digit outside an expression", pos);
            stack.back().args.push_back(t);
        } else if (t == listops::kClose) {
            if (stack.empty()) throw ParseError("unbalanced ']'", pos);
            Frame f = std::move(stack.back());
            stack.pop_back();
            if (f.args.empty()) throw ParseError("operator without arguments", pos);
            const int v = apply_op(f.op, f.args);
            if (stack.empty())
                result = v;
            else
                stack.back().args.push_back(v);
        } else {
            throw ParseError("unexpected token", pos);
        }
    }
    if (!result) throw ParseError(stack.empty() ? "empty expression" : "missing ']'", tokens.size());
    return *result;
}

TaskDataset listops_generate(const ListOpsOptions& o) {
    if (o.max_len < 8) throw ConfigError("listops max_len must be at least 8");
    if (o.max_depth < 1) throw ConfigError("listops max_depth must be at least 1");
    TaskDataset d;
    d.modality = Modality::ListOps;
    d.vocab.assign(kListOpsNames.begin(), kListOpsNames.end());
    d.pad_id = listops::kPad;
    d.num_classes = 10;
    d.max_len = o.max_len;
    d.seed = o.seed;
    d.generator = {{"id", "listops"},     {"n", o.n},
                   {"max_len", o.max_len}, {"max_depth", o.max_depth},
                   {"max_args", o.max_args}, {"with_mean", o.with_mean},
                   {"val_fraction", o.val_fraction}, {"test_fraction", o.test_fraction}};
    d.records.resize(o.n);
    for (std::size_t i = 0; i < o.n; ++i) {
        Rng rng = make_rng(o.seed, "listops", i);
        std::vector<std::int32_t> t;
        // Oversized draws are redrawn from the same stream; a two-argument
        // flat expression always fits.
        for (int attempt = 0; attempt < 64; ++attempt) {
            t.clear();
            gen_expr(rng, o, o.max_depth, t);
            if (t.size() <= o.max_len) break;
        }
        if (t.size() > o.max_len) {
            t = {listops::kMax, static_cast<std::int32_t>(uniform_index(rng, 0, 9)),
                 static_cast<std::int32_t>(uniform_index(rng, 0, 9)), listops::kClose};
        }
        d.records[i].label = listops_eval(t);
        d.records[i].tokens = std::move(t);
    }
    d.splits = make_splits(o.n, o.val_fraction, o.test_fraction, o.seed);
    return d;
}

// ---- text and images ----

PaddedTokens pad_tokens(std::span<const std::int32_t> tokens, std::size_t max_len, std::int32_t pad_id) {
    PaddedTokens p;
    const std::size_t n = std::min(tokens.size(), max_len);
    p.tokens.assign(tokens.begin(), tokens.begin() + static_cast<long>(n));
    p.tokens.resize(max_len, pad_id);
    p.loss_mask.assign(max_len, 0);
    std::fill(p.loss_mask.begin(), p.loss_mask.begin() + static_cast<long>(n), 1);
    return p;
}

namespace {

TaskDataset byte_dataset(Modality m) {
    TaskDataset d;
    d.modality = m;
    d.vocab.resize(kByteVocab);
    for (int b = 0; b < 256; ++b) d.vocab[static_cast<std::size_t>(b)] = std::to_string(b);
    d.vocab[kBytePad] = "<pad>";
    d.pad_id = kBytePad;
    return d;
}

int parse_label(const std::string& s, const std::string& where) {
    int v = -1;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || v < 0)
        throw IngestError(where + ": label '" + s + "' is not a non-negative integer");
    return v;
}

void finish_labeled(TaskDataset& d, const IngestOptions& o) {
    int top = -1;
    for (const auto& r : d.records) top = std::max(top, r.label);
    d.num_classes = static_cast<std::size_t>(top + 1);
    d.seed = o.seed;
    d.splits = make_splits(d.records.size(), o.val_fraction, o.test_fraction, o.seed);
}

std::vector<std::vector<int>> read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open image " + path.string());
    auto next_word = [&]() {
        std::string w;
        char c;
        while (in.get(c)) {
            if (c == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!w.empty()) break;
                continue;
            }
            w += c;
        }
        return w;
    };
    const std::string magic = next_word();
    if (magic != "P2" && magic != "P5") throw IngestError(path.string() + ": not a PGM file (magic '" + magic + "')");
    int width = 0, height = 0, maxval = 0;
    try {
        width = std::stoi(next_word());
        height = std::stoi(next_word());
        maxval = std::stoi(next_word());
    } catch (const std::exception&) {
        throw IngestError(path.string() + ": malformed PGM header");
    }
    if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) throw IngestError(path.string() + ": unsupported PGM header");
    std::vector<std::vector<int>> rows(static_cast<std::size_t>(height), std::vector<int>(static_cast<std::size_t>(width)));
    for (auto& row : rows)
        for (auto& v : row) {
            if (magic == "P5") {
                char c;
                if (!in.get(c)) throw IngestError(path.string() + ": truncated pixel data");
                v = static_cast<unsigned char>(c);
            } else {
                const std::string w = next_word();
                if (w.empty()) throw IngestError(path.string() + ": truncated pixel data");
                v = std::stoi(w);
            }
            if (v > maxval) throw IngestError(path.string() + ": pixel above maxval");
            if (maxval != 255) v = static_cast<int>(std::lround(255.0 * v / maxval));
        }
    return rows;
}

}  // namespace

TaskDataset text_ingest(const std::string& path, const IngestOptions& o) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open text file " + path);
    TaskDataset d = byte_dataset(Modality::Text);
    d.max_len = o.max_len;
    d.generator = {{"id", "text"}, {"path", path}, {"max_len", o.max_len}};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw IngestError(where + ": expected 'label<TAB>text'");
        Record r;
        r.label = parse_label(line.substr(0, tab), where);
        const std::string text = line.substr(tab + 1);
        if (text.empty()) throw IngestError(where + ": empty document");
        const std::size_t n = std::min(text.size(), o.max_len);
        r.tokens.resize(n);
        for (std::size_t i = 0; i < n; ++i) r.tokens[i] = static_cast<unsigned char>(text[i]);
        d.records.push_back(std::move(r));
    }
    if (d.records.empty()) throw IngestError(path + ": no documents");
    finish_labeled(d, o);
    return d;
}

std::vector<std::int32_t> image_tokens(const std::vector<std::vector<int>>& rows) {
    const std::size_t h = rows.size();
    for (const auto& r : rows)
        if (r.size() != h)
            throw ShapeError("image must be square, got " + std::to_string(h) + " rows of width " + std::to_string(r.size()));
    std::vector<std::int32_t> t;
    t.reserve(h * h);
    for (const auto& r : rows)
        for (int v : r) {
            if (v < 0 || v > 255) throw IngestError("pixel value " + std::to_string(v) + " outside 0..255");
            t.push_back(v);
        }
    return t;
}

TaskDataset image_ingest(const std::string& manifest, const IngestOptions& o) {
    std::ifstream in(manifest);
    if (!in) throw IngestError("cannot open image manifest " + manifest);
    const fs::path base = fs::path(manifest).parent_path();
    TaskDataset d = byte_dataset(Modality::Image);
    d.generator = {{"id", "image"}, {"manifest", manifest}};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = manifest + ":" + std::to_string(lineno);
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw IngestError(where + ": expected 'label<TAB>path'");
        Record r;
        r.label = parse_label(line.substr(0, tab), where);
        r.tokens = image_tokens(read_pgm(base / line.substr(tab + 1)));
        if (!d.records.empty() && r.tokens.size() != d.records.front().tokens.size())
            throw ShapeError(where + ": image size differs from the first image");
        d.max_len = r.tokens.size();
        d.records.push_back(std::move(r));
    }
    if (d.records.empty()) throw IngestError(manifest + ": no images");
    finish_labeled(d, o);
    return d;
}

TaskDataset synthetic_images(const SyntheticImageOptions& o) {
    if (o.side < 2 || o.classes < 2) throw ConfigError("synthetic images need side ≥ 2 and classes ≥ 2");
    const std::size_t s = o.side, px = s * s;
    std::vector<std::vector<double>> templ(o.classes, std::vector<double>(px));
    for (std::size_t c = 0; c < o.classes; ++c) {
        Rng rng = make_rng(o.seed, "image-template", c);
        std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
        std::normal_distribution<double> amp(0.0, 1.0);
        auto& t = templ[c];
        for (int f = 0; f < 4; ++f) {
            const double u = static_cast<double>(uniform_index(rng, 0, 2)), v = static_cast<double>(uniform_index(rng, 0, 2));
            const double a = amp(rng), ph = phase(rng);
            for (std::size_t i = 0; i < s; ++i)
                for (std::size_t j = 0; j < s; ++j)
                    t[i * s + j] += a * std::cos(2.0 * std::numbers::pi * (u * i + v * j) / static_cast<double>(s) + ph);
        }
        // Mirror coupling ties pixel (i, j) to (s-1-i, s-1-j), the far end of
        // the flattened sequence.
        const double sign = c % 2 == 0 ? 1.0 : -1.0;
        std::vector<double> m(px);
        for (std::size_t k = 0; k < px; ++k) m[k] = t[k] + sign * t[px - 1 - k];
        double mu = std::accumulate(m.begin(), m.end(), 0.0) / static_cast<double>(px), var = 0.0;
        for (auto x : m) var += (x - mu) * (x - mu);
        const double sd = std::sqrt(var / static_cast<double>(px)) + 1e-12;
        for (std::size_t k = 0; k < px; ++k) t[k] = (m[k] - mu) / sd;
    }
    TaskDataset d = byte_dataset(Modality::Image);
    d.num_classes = o.classes;
    d.max_len = px;
    d.seed = o.seed;
    d.generator = {{"id", "synthetic-images"}, {"n", o.n}, {"side", o.side}, {"classes", o.classes},
                   {"noise", o.noise}, {"val_fraction", o.val_fraction}, {"test_fraction", o.test_fraction}};
    d.records.resize(o.n);
    for (std::size_t i = 0; i < o.n; ++i) {
        Rng rng = make_rng(o.seed, "image", i);
        const std::size_t c = uniform_index(rng, 0, o.classes - 1);
        std::normal_distribution<double> noise(0.0, o.noise), shift(0.0, 0.3);
        const double offset = shift(rng);
        auto& r = d.records[i];
        r.label = static_cast<std::int32_t>(c);
        r.tokens.resize(px);
        for (std::size_t k = 0; k < px; ++k) {
            const double v = 128.0 + 40.0 * (templ[c][k] + offset + noise(rng));
            r.tokens[k] = static_cast<std::int32_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    d.splits = make_splits(o.n, o.val_fraction, o.test_fraction, o.seed);
    return d;
}

// ---- retrieval and continuous ----

TaskDataset synthetic_retrieval(const RetrievalOptions& o) {
    if (o.length < 2 || o.key_distance >= o.length) throw ConfigError("retrieval needs key_distance < length");
    TaskDataset d;
    d.modality = Modality::Retrieval;
    for (int i = 0; i < 8; ++i) d.vocab.push_back("d" + std::to_string(i));
    for (int i = 0; i < 4; ++i) d.vocab.push_back("v" + std::to_string(i));
    d.vocab.push_back("<pad>");
    d.pad_id = 12;
    d.num_classes = 2;
    d.max_len = o.length;
    d.seed = o.seed;
    d.generator = {{"id", "retrieval"}, {"n", o.n}, {"length", o.length}, {"key_distance", o.key_distance},
                   {"val_fraction", o.val_fraction}, {"test_fraction", o.test_fraction}};
    const std::size_t gap = std::max<std::size_t>(1, o.key_distance);
    d.records.resize(o.n);
    for (std::size_t i = 0; i < o.n; ++i) {
        Rng rng = make_rng(o.seed, "retrieval", i);
        auto& r = d.records[i];
        r.tokens.resize(o.length);
        for (auto& t : r.tokens) t = static_cast<std::int32_t>(uniform_index(rng, 0, 7));
        const std::size_t p1 = uniform_index(rng, 0, o.length - 1 - gap);
        const auto v1 = static_cast<std::int32_t>(uniform_index(rng, 0, 3));
        const auto v2 = static_cast<std::int32_t>(uniform_index(rng, 0, 3));
        r.tokens[p1] = 8 + v1;
        r.tokens[p1 + gap] = 8 + v2;
        r.label = (v1 + v2) % 2;
    }
    d.splits = make_splits(o.n, o.val_fraction, o.test_fraction, o.seed);
    return d;
}

int retrieval_label(std::span<const std::int32_t> tokens) {
    std::vector<int> keys;
    for (auto t : tokens)
        if (t >= 8 && t <= 11) keys.push_back(t - 8);
    if (keys.size() != 2) throw UsageError("retrieval record must hold exactly two keys");
    return (keys[0] + keys[1]) % 2;
}

TaskDataset synthetic_continuous(const ContinuousOptions& o) {
    if (o.length < 2 || o.input_dim < 1) throw ConfigError("continuous data needs length ≥ 2 and input_dim ≥ 1");
    TaskDataset d;
    d.modality = Modality::Continuous;
    d.input_dim = o.input_dim;
    d.num_classes = o.classes;
    d.target_dim = o.classes == 0 ? 1 : 0;
    d.max_len = o.length;
    d.seed = o.seed;
    d.generator = {{"id", "continuous"}, {"n", o.n},     {"length", o.length}, {"input_dim", o.input_dim},
                   {"classes", o.classes}, {"noise", o.noise}, {"val_fraction", o.val_fraction},
                   {"test_fraction", o.test_fraction}};
    const std::size_t bands = std::max<std::size_t>(o.classes, 4);
    d.records.resize(o.n);
    for (std::size_t i = 0; i < o.n; ++i) {
        Rng rng = make_rng(o.seed, "continuous", i);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> noise(0.0, o.noise);
        const std::size_t band = uniform_index(rng, 0, bands - 1);
        const double cycles = 2.0 * static_cast<double>(band + 1) + unit(rng) - 0.5;
        const double amplitude = 0.5 + 1.5 * unit(rng);
        auto& r = d.records[i];
        r.values.resize(o.length * o.input_dim);
        for (std::size_t c = 0; c < o.input_dim; ++c) {
            const double phase = 2.0 * std::numbers::pi * unit(rng);
            for (std::size_t t = 0; t < o.length; ++t)
                r.values[t * o.input_dim + c] =
                    amplitude * std::sin(2.0 * std::numbers::pi * cycles * static_cast<double>(t) / static_cast<double>(o.length) + phase) +
                    noise(rng);
        }
        if (o.classes == 0)
            r.target = {amplitude};
        else
            r.label = static_cast<std::int32_t>(band % o.classes);
    }
    d.splits = make_splits(o.n, o.val_fraction, o.test_fraction, o.seed);
    return d;
}

TaskDataset synthetic_local_text(const LocalTextOptions& o) {
    if (o.window < 1 || o.window >= o.length) throw ConfigError("local text needs 1 ≤ window < length");
    if (!(o.resample >= 0.0 && o.resample <= 1.0)) throw ConfigError("local text resample must lie in [0, 1]");
    TaskDataset d = byte_dataset(Modality::Text);
    d.num_classes = 1;
    d.max_len = o.length;
    d.seed = o.seed;
    d.generator = {{"id", "local-text"}, {"n", o.n}, {"length", o.length}, {"window", o.window}, {"resample", o.resample}};
    d.records.resize(o.n);
    for (std::size_t i = 0; i < o.n; ++i) {
        Rng rng = make_rng(o.seed, "local-text", i);
        std::uniform_real_distribution<double> coin(0.0, 1.0);
        auto& r = d.records[i];
        r.label = 0;
        r.tokens.resize(o.length);
        for (std::size_t t = 0; t < o.length; ++t) {
            const bool fresh = t < o.window || coin(rng) < o.resample;
            r.tokens[t] = fresh ? 'a' + static_cast<std::int32_t>(uniform_index(rng, 0, 15)) : r.tokens[t - o.window];
        }
    }
    d.splits = make_splits(o.n, 0.1, 0.1, o.seed);
    return d;
}

// ---- sampling and masking ----

std::vector<std::vector<std::size_t>> subset_sample(const std::vector<std::size_t>& pool,
                                                    const std::vector<double>& fractions, std::uint64_t seed) {
    std::vector<std::size_t> perm(pool);
    Rng rng = make_rng(seed, "subset");
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError("subset fraction " + std::to_string(f) + " outside (0, 1]");
        const auto n = static_cast<std::size_t>(std::llround(f * static_cast<double>(pool.size())));
        if (n == 0)
            throw ConfigError("subset fraction " + std::to_string(f) + " of " + std::to_string(pool.size()) +
                              " records is empty");
        std::vector<std::size_t> sub(perm.begin(), perm.begin() + static_cast<long>(n));
        std::sort(sub.begin(), sub.end());
        out.push_back(std::move(sub));
    }
    return out;
}

std::size_t masked_count(std::size_t length, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("masking ratio must lie in (0, 1)");
    if (length == 0) return 0;
    const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(length)));
    return std::clamp<std::size_t>(k, 1, length);
}

std::vector<std::size_t> MaskPlan::positions(std::size_t length, std::uint64_t record, std::uint64_t epoch) const {
    const std::size_t k = masked_count(length, ratio);
    Rng rng = make_rng(derive_seed(seed, "mask-epoch", epoch), "mask-record", record);
    std::vector<std::size_t> idx(length);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[uniform_index(rng, i, length - 1)]);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

MaskedRecord mask_apply(std::span<const std::int32_t> tokens, std::span<const double> values, std::size_t input_dim,
                        const std::vector<std::size_t>& positions, std::int32_t mask_id) {
    const std::size_t L = tokens.empty() ? values.size() / std::max<std::size_t>(input_dim, 1) : tokens.size();
    MaskedRecord m;
    m.tokens.assign(tokens.begin(), tokens.end());
    m.values.assign(values.begin(), values.end());
    m.masked.assign(L, 0);
    m.positions = positions;
    for (auto p : positions) {
        if (p >= L) throw UsageError("mask position " + std::to_string(p) + " outside length " + std::to_string(L));
        if (m.masked[p]) throw UsageError("duplicate mask position " + std::to_string(p));
        m.masked[p] = 1;
        if (!tokens.empty()) {
            m.target_tokens.push_back(tokens[p]);
            m.tokens[p] = mask_id;
        } else {
            for (std::size_t c = 0; c < input_dim; ++c) m.target_values.push_back(values[p * input_dim + c]);
        }
    }
    return m;
}

// ---- batching ----

namespace {

template <class LenFn, class TokFn, class ValFn>
ModelInput build_input(std::size_t batch, LenFn len, TokFn tok, ValFn val, bool continuous, std::size_t dim,
                       std::int32_t pad_id, std::size_t pad_multiple) {
    ModelInput in;
    in.batch = batch;
    std::size_t L = 0;
    for (std::size_t b = 0; b < batch; ++b) L = std::max(L, len(b));
    const std::size_t m = std::max<std::size_t>(pad_multiple, 1);
    L = (L + m - 1) / m * m;
    in.length = L;
    in.lengths.resize(batch);
    if (continuous)
        in.values.assign(batch * L * dim, 0.0);
    else
        in.tokens.assign(batch * L, pad_id);
    for (std::size_t b = 0; b < batch; ++b) {
        in.lengths[b] = len(b);
        if (continuous) {
            auto v = val(b);
            std::copy(v.begin(), v.end(), in.values.begin() + static_cast<long>(b * L * dim));
        } else {
            auto t = tok(b);
            std::copy(t.begin(), t.end(), in.tokens.begin() + static_cast<long>(b * L));
        }
    }
    return in;
}

}  // namespace

Batch make_batch(const TaskDataset& data, std::span<const std::size_t> indices, std::size_t pad_multiple,
                 bool with_labels) {
    Batch b;
    b.input = build_input(
        indices.size(), [&](std::size_t i) { return data.length(indices[i]); },
        [&](std::size_t i) { return std::span<const std::int32_t>(data.records[indices[i]].tokens); },
        [&](std::size_t i) { return std::span<const double>(data.records[indices[i]].values); }, data.continuous(),
        data.input_dim, data.pad_id, pad_multiple);
    if (with_labels) {
        for (auto i : indices) {
            const auto& r = data.records[i];
            if (data.regression())
                b.targets.insert(b.targets.end(), r.target.begin(), r.target.end());
            else
                b.labels.push_back(r.label);
        }
    }
    return b;
}

Batch make_batch(const UnlabeledView& view, std::span<const std::size_t> rows, std::size_t pad_multiple) {
    const TaskDataset& meta = view.meta();
    Batch b;
    b.input = build_input(
        rows.size(), [&](std::size_t i) { return view.length(rows[i]); },
        [&](std::size_t i) { return view.tokens(rows[i]); }, [&](std::size_t i) { return view.values(rows[i]); },
        meta.continuous(), meta.input_dim, meta.pad_id, pad_multiple);
    return b;
}

// ---- cache ----

namespace {

nlohmann::json header_json(const TaskDataset& d) {
    return {{"format", "sptlab-dataset"},
            {"version", 1},
            {"modality", to_string(d.modality)},
            {"vocab", d.vocab},
            {"pad_id", d.pad_id},
            {"input_dim", d.input_dim},
            {"num_classes", d.num_classes},
            {"target_dim", d.target_dim},
            {"max_len", d.max_len},
            {"seed", d.seed},
            {"generator", d.generator},
            {"records", d.records.size()}};
}

nlohmann::json record_json(const TaskDataset& d, std::size_t i) {
    const Record& r = d.records[i];
    nlohmann::json j{{"i", i}};
    if (d.continuous())
        j["x"] = r.values;
    else
        j["x"] = r.tokens;
    if (d.regression())
        j["y"] = r.target;
    else
        j["y"] = r.label;
    return j;
}

}  // namespace

void save_dataset(const TaskDataset& data, const std::string& dir) {
    data.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());
    const std::string hash = dataset_hash(data);
    for (const char* name : {"train", "val", "test"}) {
        const fs::path path = fs::path(dir) / (std::string(name) + ".jsonl");
        const fs::path tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot write " + tmp.string());
            auto h = header_json(data);
            h["split"] = name;
            h["content_hash"] = hash;
            out << h.dump() << '\n';
            for (auto i : data.split(name)) out << record_json(data, i).dump() << '\n';
            if (!out) throw IoError("write failed for " + tmp.string());
        }
        fs::rename(tmp, path, ec);
        if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

TaskDataset load_dataset(const std::string& dir) {
    TaskDataset d;
    bool first = true;
    std::string expected_hash;
    for (const char* name : {"train", "val", "test"}) {
        const fs::path path = fs::path(dir) / (std::string(name) + ".jsonl");
        std::ifstream in(path);
        if (!in) throw MissingArtifactError("dataset split " + path.string() + " not found; run 'sptlab generate-data' first");
        std::string line;
        if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
        nlohmann::json h;
        try {
            h = nlohmann::json::parse(line);
            if (h.at("format") != "sptlab-dataset") throw IoError(path.string() + ": not a dataset file");
            if (first) {
                d.modality = parse_modality(h.at("modality"));
                d.vocab = h.at("vocab").get<std::vector<std::string>>();
                d.pad_id = h.at("pad_id");
                d.input_dim = h.at("input_dim");
                d.num_classes = h.at("num_classes");
                d.target_dim = h.at("target_dim");
                d.max_len = h.at("max_len");
                d.seed = h.at("seed");
                d.generator = h.at("generator");
                d.records.resize(h.at("records").get<std::size_t>());
                expected_hash = h.at("content_hash");
                first = false;
            }
            auto& split = name == std::string("train") ? d.splits.train
                          : name == std::string("val") ? d.splits.val
                                                       : d.splits.test;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                auto j = nlohmann::json::parse(line);
                const std::size_t i = j.at("i");
                if (i >= d.records.size()) throw IoError(path.string() + ": record index out of range");
                Record& r = d.records[i];
                if (d.continuous())
                    r.values = j.at("x").get<std::vector<double>>();
                else
                    r.tokens = j.at("x").get<std::vector<std::int32_t>>();
                if (d.regression())
                    r.target = j.at("y").get<std::vector<double>>();
                else
                    r.label = j.at("y");
                split.push_back(i);
            }
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ": " + e.what());
        }
    }
    d.validate();
    if (dataset_hash(d) != expected_hash) throw IoError("dataset in " + dir + " does not match its content hash");
    return d;
}

std::string sha1_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) throw IoError("SHA-1 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
        s += hex[md[i] >> 4];
        s += hex[md[i] & 15];
    }
    return s;
}

std::string dataset_hash(const TaskDataset& d) {
    std::string body = header_json(d).dump() + '\n';
    for (std::size_t i = 0; i < d.records.size(); ++i) body += record_json(d, i).dump() + '\n';
    for (const char* name : {"train", "val", "test"}) body += nlohmann::json(d.split(name)).dump() + '\n';
    const std::string blob = "blob " + std::to_string(body.size()) + '\0' + body;
    return sha1_hex(blob);
}

}  // namespace spt
