#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "spt/tensor.hpp"

namespace spt {

struct GradCheckResult {
    // max over inputs of ‖analytic − numeric‖∞ / ‖numeric‖∞
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
};

using GradCheckFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of <r, f(inputs)> against central
// differences with step h, where r is a fixed random projection drawn from
// seed. Runs in Float64 regardless of the ambient precision.
GradCheckResult grad_check(const GradCheckFn& f, std::vector<Tensor> inputs, double h = 1e-5,
                           std::uint64_t seed = 0);

}  // namespace spt
