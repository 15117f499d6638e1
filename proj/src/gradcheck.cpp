#include "spt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "spt/error.hpp"
#include "spt/ops.hpp"

namespace spt {

namespace {

double projected(const GradCheckFn& f, const std::vector<Tensor>& inputs, const std::vector<double>& r) {
    NoGradGuard guard;
    Tensor y = f(inputs);
    if (y.numel() != r.size()) throw DimensionError("grad_check: output size changed between evaluations");
    double s = 0.0;
    auto yd = y.data();
    for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * yd[i];
    return s;
}

}  // namespace

GradCheckResult grad_check(const GradCheckFn& f, std::vector<Tensor> inputs, double h, std::uint64_t seed) {
    PrecisionScope precision_scope(Precision::Float64);
    for (auto& in : inputs) {
        if (!in.is_leaf()) throw UsageError("grad_check inputs must be leaves");
        in.set_requires_grad(true);
        in.zero_grad();
    }

    Tensor y = f(inputs);
    Rng rng = make_rng(seed, "grad_check");
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> r(y.numel());
    for (auto& v : r) v = dist(rng);
    Tensor loss = sum(mul(y, Tensor::from(y.shape(), r)));
    loss.backward();

    GradCheckResult result;
    for (auto& in : inputs) {
        std::vector<double> analytic(in.numel(), 0.0);
        if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
        auto data = in.mutable_data();
        double num_norm = 0.0, err = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = projected(f, inputs, r);
            data[i] = saved - h;
            const double down = projected(f, inputs, r);
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            num_norm = std::max(num_norm, std::abs(numeric));
            err = std::max(err, std::abs(numeric - analytic[i]));
        }
        result.max_abs_error = std::max(result.max_abs_error, err);
        const double rel = num_norm > 0.0 ? err / num_norm : err;
        result.max_rel_error = std::max(result.max_rel_error, rel);
        in.zero_grad();
    }
    return result;
}

}  // namespace spt
