#pragma once

#include <cstdint>
#include <span>

#include "spt/tensor.hpp"

namespace spt {

// All losses average over the positions selected by `mask` (one flag per
// row of the prediction). An empty selection raises NumericError.

// logits[M, V], targets[M] in [0, V).
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask);

// pred[M, D] against targets[M * D]; mean absolute error over selected
// rows and all D columns.
Tensor l1_loss(const Tensor& pred, std::span<const double> targets, std::span<const std::uint8_t> mask);
Tensor mse_loss(const Tensor& pred, std::span<const double> targets, std::span<const std::uint8_t> mask);

}  // namespace spt
