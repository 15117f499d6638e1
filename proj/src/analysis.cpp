#include "spt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "spt/error.hpp"
#include "spt/sweep.hpp"

namespace spt {

double DecayProfile::tail_mass(std::size_t l0) const {
    double total = 0.0, tail = 0.0;
    for (std::size_t l = 0; l < kmax.size(); ++l) {
        total += kmax[l];
        if (l >= l0) tail += kmax[l];
    }
    return total > 0.0 ? tail / total : 0.0;
}

std::vector<double> kmax_rows(std::span<const double> k, std::size_t rows, std::size_t length) {
    if (k.size() != rows * length) throw DimensionError("kmax_rows: expected rows × length values");
    std::vector<double> out(length, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t l = 0; l < length; ++l) out[l] = std::max(out[l], std::abs(k[r * length + l]));
    return out;
}

DecayProfile kmax_profile(const KernelBank& bank, std::size_t layer, const std::string& source) {
    const auto& shape = bank.values.shape();
    if (shape.size() != 3) throw DimensionError("kernel bank must be [dirs, H, L]");
    DecayProfile p;
    p.layer = layer;
    p.source = source;
    p.kmax = kmax_rows(bank.values.data(), shape[0] * shape[1], shape[2]);
    return p;
}

std::vector<DecayProfile> kmax_profiles(const Model& model, std::size_t length, const std::string& source) {
    auto banks = model.kernels(length);
    std::vector<DecayProfile> out;
    for (std::size_t i = 0; i < banks.size(); ++i) out.push_back(kmax_profile(banks[i], i, source));
    return out;
}

std::vector<DecayProfile> kmax_profiles(const std::string& checkpoint, std::size_t length) {
    Checkpoint ck = load_checkpoint(checkpoint);
    if (ck.config.family == Family::Transformer)
        throw UnsupportedFamilyError(checkpoint + " holds a transformer; kernel analysis needs an SSM model");
    Model m(ck.config, 0);
    m.load_values(ck.params, false);
    return kmax_profiles(m, length, checkpoint);
}

DecayProfile kmax_profile(const std::string& checkpoint, std::size_t layer, std::size_t length) {
    auto all = kmax_profiles(checkpoint, length);
    if (layer >= all.size())
        throw UsageError("layer " + std::to_string(layer) + " out of range; the model has " + std::to_string(all.size()));
    return all[layer];
}

double compare_decay(const DecayProfile& a, const DecayProfile& b, std::size_t l0) {
    if (a.kmax.size() != b.kmax.size())
        throw DimensionError("compare_decay: profiles of length " + std::to_string(a.kmax.size()) + " and " +
                             std::to_string(b.kmax.size()));
    const double den = b.tail_mass(l0);
    if (den == 0.0) throw DegenerateProfileError("compare_decay: reference tail mass is zero at lag " + std::to_string(l0));
    return a.tail_mass(l0) / den;
}

std::string profiles_csv(const std::vector<DecayProfile>& profiles) {
    std::vector<const DecayProfile*> order;
    for (const auto& p : profiles) order.push_back(&p);
    std::stable_sort(order.begin(), order.end(), [](auto* x, auto* y) { return x->layer < y->layer; });
    std::ostringstream o;
    o << "layer,lag,kmax\n";
    char buf[40];
    for (const auto* p : order)
        for (std::size_t l = 0; l < p->kmax.size(); ++l) {
            std::snprintf(buf, sizeof buf, "%.17g", p->kmax[l]);
            o << p->layer << ',' << l << ',' << buf << '\n';
        }
    return o.str();
}

void export_csv(const std::vector<DecayProfile>& profiles, const std::string& path) {
    write_text(path, profiles_csv(profiles));
}

std::vector<DecayProfile> parse_profiles_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "layer,lag,kmax") throw IoError("kernel CSV: missing 'layer,lag,kmax' header");
    std::map<std::size_t, DecayProfile> by_layer;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::size_t layer = 0, lag = 0;
        double v = 0.0;
        char c1 = 0, c2 = 0;
        std::istringstream ls(line);
        if (!(ls >> layer >> c1 >> lag >> c2) || c1 != ',' || c2 != ',')
            throw IoError("kernel CSV: malformed row " + std::to_string(row));
        std::string rest;
        ls >> rest;
        try {
            std::size_t used = 0;
            v = std::stod(rest, &used);
            if (used != rest.size()) throw std::invalid_argument(rest);
        } catch (const std::exception&) {
            throw IoError("kernel CSV: bad value on row " + std::to_string(row));
        }
        auto& p = by_layer[layer];
        p.layer = layer;
        if (lag != p.kmax.size()) throw IoError("kernel CSV: lags out of order on row " + std::to_string(row));
        p.kmax.push_back(v);
    }
    std::vector<DecayProfile> out;
    for (auto& [k, p] : by_layer) out.push_back(std::move(p));
    return out;
}

}  // namespace spt
