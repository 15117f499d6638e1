#pragma once

#include <string>
#include <vector>

#include "spt/tensor.hpp"

namespace spt {

struct ParamGroup {
    std::string name;
    std::vector<Tensor> params;
    double lr = 1e-3;
    double weight_decay = 0.0;
};

struct AdamWSettings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Serializable moments, in the order the optimizer's groups list params.
struct OptimizerState {
    std::size_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

// AdamW with decoupled weight decay. Parameters without a gradient are
// treated as having a zero gradient (their moments still decay).
class AdamW {
   public:
    explicit AdamW(std::vector<ParamGroup> groups, AdamWSettings settings = {});

    // lr_multiplier scales every group's base rate (used by schedules).
    void step(double lr_multiplier = 1.0);
    void zero_grad();

    std::size_t step_count() const { return state_.step; }
    const std::vector<ParamGroup>& groups() const { return groups_; }
    const OptimizerState& state() const { return state_; }
    void load_state(OptimizerState state);

   private:
    std::vector<ParamGroup> groups_;
    AdamWSettings settings_;
    OptimizerState state_;
};

// Linear warmup over the first warmup_fraction of total steps, then cosine
// decay to zero. Returns the multiplier for 0-based step index.
double warmup_cosine(std::size_t step, std::size_t total_steps, double warmup_fraction = 0.1);

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace spt
