#pragma once

#include <span>
#include <vector>

#include "lpn/gradcheck.hpp"

namespace lpn {

struct SgdConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<std::size_t> decay_epochs;  // 0-based epochs where lr is multiplied by decay_factor
    double decay_factor = 0.1;
};

// Learning rate in effect during `epoch` (0-based).
double lr_at_epoch(const SgdConfig& config, std::size_t epoch);

struct OptimizerState {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<std::vector<double>> velocity;  // one buffer per parameter, same order
};

OptimizerState make_optimizer(const SgdConfig& config, std::span<const NamedTensor> params);

/// v <- momentum * v + grad + wd * p;  p <- p - lr * v.
/// A parameter without a grad counts as zero grad. Non-finite grads raise
/// TrainingError naming the parameter; nothing is updated in that case.
void sgd_step(std::span<const NamedTensor> params, OptimizerState& state);

void zero_grads(std::span<const NamedTensor> params);

} // namespace lpn
