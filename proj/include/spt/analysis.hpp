#pragma once
// Kernel decay statistics: per-lag maximum kernel magnitude over channels
// and directions, tail mass, and CSV export.

#include <span>
#include <string>
#include <vector>

#include "spt/model.hpp"

namespace spt {

struct DecayProfile {
    std::size_t layer = 0;
    std::string source;       // checkpoint path or a label
    std::vector<double> kmax;  // one entry per lag, all ≥ 0

    // Σ_{l ≥ l0} kmax / Σ kmax; 0 for an all-zero profile.
    double tail_mass(std::size_t l0) const;
};

// kmax[l] = max over rows of |k[row, l]|, k stored row-major [rows, length].
std::vector<double> kmax_rows(std::span<const double> k, std::size_t rows, std::size_t length);
// Over both directions and all channels of a [dirs, H, L] bank.
DecayProfile kmax_profile(const KernelBank& bank, std::size_t layer, const std::string& source = "");

// One profile per layer. Transformer models raise UnsupportedFamilyError.
std::vector<DecayProfile> kmax_profiles(const Model& model, std::size_t length, const std::string& source = "");
std::vector<DecayProfile> kmax_profiles(const std::string& checkpoint, std::size_t length);
DecayProfile kmax_profile(const std::string& checkpoint, std::size_t layer, std::size_t length);

// tail_mass_a(l0) / tail_mass_b(l0); < 1 means a is more local. Unequal
// lengths raise DimensionError, a zero denominator DegenerateProfileError.
double compare_decay(const DecayProfile& a, const DecayProfile& b, std::size_t l0);

// "layer,lag,kmax" rows sorted by layer then lag, values printed with %.17g.
std::string profiles_csv(const std::vector<DecayProfile>& profiles);
void export_csv(const std::vector<DecayProfile>& profiles, const std::string& path);
std::vector<DecayProfile> parse_profiles_csv(const std::string& text);

}  // namespace spt
