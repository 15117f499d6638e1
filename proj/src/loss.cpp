#include "spt/loss.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "spt/error.hpp"

namespace spt {

namespace {

std::size_t count_selected(std::span<const std::uint8_t> mask, std::size_t rows, const char* op) {
    if (mask.size() != rows)
        throw DimensionError(std::string(op) + ": mask has " + std::to_string(mask.size()) + " entries for " +
                             std::to_string(rows) + " rows");
    const auto n = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
    if (n == 0) throw NumericError(std::string(op) + ": degenerate loss, no positions selected");
    return n;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
    if (logits.dim() != 2) throw DimensionError("cross_entropy: logits must be [M, V]");
    const std::size_t M = logits.size(0), V = logits.size(1);
    if (targets.size() != M) throw DimensionError("cross_entropy: one target per row required");
    const std::size_t count = count_selected(mask, M, "cross_entropy");
    auto ld = logits.data();
    std::vector<double> probs(M * V, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < M; ++r) {
        if (!mask[r]) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V)
            throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
        const double* row = ld.data() + r * V;
        const double mx = *std::max_element(row, row + V);
        double s = 0.0;
        for (std::size_t j = 0; j < V; ++j) s += (probs[r * V + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < V; ++j) probs[r * V + j] /= s;
        total += -(row[targets[r]] - mx - std::log(s));
    }
    const double n = static_cast<double>(count);
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    return custom_op("cross_entropy", {}, {total / n}, {logits},
                     [probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), V, n](std::span<const double> g,
                                                                                               GradSpans& gi) {
                         const double s = g[0] / n;
                         for (std::size_t r = 0; r < mk.size(); ++r) {
                             if (!mk[r]) continue;
                             for (std::size_t j = 0; j < V; ++j) gi[0][r * V + j] += s * probs[r * V + j];
                             gi[0][r * V + static_cast<std::size_t>(tg[r])] -= s;
                         }
                     });
}

namespace {

enum class Norm { L1, L2 };

Tensor regression_loss(const Tensor& pred, std::span<const double> targets, std::span<const std::uint8_t> mask,
                       Norm norm) {
    const char* name = norm == Norm::L1 ? "l1_loss" : "mse_loss";
    if (pred.dim() < 1) throw DimensionError(std::string(name) + ": prediction must have rows");
    const std::size_t M = pred.size(0);
    const std::size_t D = pred.numel() / std::max<std::size_t>(M, 1);
    if (targets.size() != pred.numel()) throw DimensionError(std::string(name) + ": target size mismatch");
    const std::size_t count = count_selected(mask, M, name);
    const double n = static_cast<double>(count * D);
    auto pd = pred.data();
    std::vector<double> diff(pd.size(), 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < M; ++r) {
        if (!mask[r]) continue;
        for (std::size_t j = 0; j < D; ++j) {
            const double d = pd[r * D + j] - targets[r * D + j];
            diff[r * D + j] = d;
            total += norm == Norm::L1 ? std::abs(d) : d * d;
        }
    }
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    return custom_op(name, {}, {total / n}, {pred},
                     [diff = std::move(diff), mk = std::move(mk), D, n, norm](std::span<const double> g, GradSpans& gi) {
                         const double s = g[0] / n;
                         for (std::size_t r = 0; r < mk.size(); ++r) {
                             if (!mk[r]) continue;
                             for (std::size_t j = 0; j < D; ++j) {
                                 const double d = diff[r * D + j];
                                 const double dd = norm == Norm::L1 ? (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) : 2.0 * d;
                                 gi[0][r * D + j] += s * dd;
                             }
                         }
                     });
}

}  // namespace

Tensor l1_loss(const Tensor& pred, std::span<const double> targets, std::span<const std::uint8_t> mask) {
    return regression_loss(pred, targets, mask, Norm::L1);
}

Tensor mse_loss(const Tensor& pred, std::span<const double> targets, std::span<const std::uint8_t> mask) {
    return regression_loss(pred, targets, mask, Norm::L2);
}

}  // namespace spt
