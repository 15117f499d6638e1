#pragma once
// Oracle and invariant checks shared by `sptlab verify` and the acceptance
// binary. Each check reports its worst measured deviation against a limit.

#include <cstdint>
#include <string>
#include <vector>

namespace spt {

struct PropertyResult {
    std::string name;
    bool passed = false;
    double measured = 0.0;  // worst deviation (or the statistic checked)
    double limit = 0.0;
    std::string detail;
};

// FFT convolution with the materialized kernel vs. recurrence_scan, over
// `draws` random stable parameter sets per state size and every length.
PropertyResult verify_scan_dplr(std::size_t draws, const std::vector<std::size_t>& state_sizes,
                                const std::vector<std::size_t>& lengths, double tol);
PropertyResult verify_scan_dlr(std::size_t draws, const std::vector<std::size_t>& state_sizes,
                               const std::vector<std::size_t>& lengths, double tol);

// Finite-difference checks: one result per op or block, worst over seeds.
std::vector<PropertyResult> verify_tensor_gradients(std::size_t seeds, double tol);
std::vector<PropertyResult> verify_kernel_gradients(std::size_t seeds, double tol);

// max Re eig(Λ − PQ*) at HiPPO init, dense eigensolver.
PropertyResult verify_hippo_hurwitz(const std::vector<std::size_t>& state_sizes, double tol);

// Future-to-past influence in unidirectional models of every family.
std::vector<PropertyResult> verify_causality();
// Loss gradients at unmasked positions are exactly zero, and changing an
// unmasked target leaves the loss unchanged.
PropertyResult verify_masked_gradients(std::size_t draws);
// masked_count and MaskPlan sizes follow max(1, round(r·L)) for L in [lo, hi].
PropertyResult verify_masked_count(std::size_t lo, std::size_t hi);

PropertyResult verify_block_equals_full(double tol);
PropertyResult verify_flip_symmetry();

// Everything above at the acceptance sizes.
std::vector<PropertyResult> run_verification();

}  // namespace spt
