#include "spt/optim.hpp"

#include <cmath>
#include <numbers>

#include "spt/error.hpp"

namespace spt {

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWSettings settings)
    : groups_(std::move(groups)), settings_(settings) {
    for (const auto& g : groups_)
        for (const auto& p : g.params) {
            if (!p.requires_grad()) throw UsageError("optimizer group '" + g.name + "' holds a frozen tensor");
            state_.first_moment.emplace_back(p.numel(), 0.0);
            state_.second_moment.emplace_back(p.numel(), 0.0);
        }
}

void AdamW::step(double lr_multiplier) {
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(settings_.beta1, t);
    const double bc2 = 1.0 - std::pow(settings_.beta2, t);
    std::size_t slot = 0;
    for (auto& g : groups_) {
        const double lr = g.lr * lr_multiplier;
        for (auto& p : g.params) {
            auto& m = state_.first_moment[slot];
            auto& v = state_.second_moment[slot];
            ++slot;
            auto data = p.mutable_data();
            auto grad = p.grad();
            const bool has = !grad.empty();
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double gi = has ? grad[i] : 0.0;
                m[i] = settings_.beta1 * m[i] + (1.0 - settings_.beta1) * gi;
                v[i] = settings_.beta2 * v[i] + (1.0 - settings_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (std::sqrt(vhat) + settings_.eps) + g.weight_decay * data[i]);
            }
        }
    }
}

void AdamW::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params) p.zero_grad();
}

void AdamW::load_state(OptimizerState state) {
    if (state.first_moment.size() != state_.first_moment.size() ||
        state.second_moment.size() != state_.second_moment.size())
        throw IncompatibleError("optimizer state has a different parameter count");
    for (std::size_t i = 0; i < state.first_moment.size(); ++i)
        if (state.first_moment[i].size() != state_.first_moment[i].size() ||
            state.second_moment[i].size() != state_.second_moment[i].size())
            throw IncompatibleError("optimizer state moment shape mismatch at slot " + std::to_string(i));
    state_ = std::move(state);
}

double warmup_cosine(std::size_t step, std::size_t total_steps, double warmup_fraction) {
    if (total_steps == 0) return 1.0;
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(total_steps - warmup, 1));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / (norm + 1e-12);
        for (auto& p : params)
            if (p.has_grad())
                for (auto& g : p.mutable_grad()) g *= s;
    }
    return norm;
}

}  // namespace spt
