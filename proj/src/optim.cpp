#include "lpn/optim.hpp"

#include <cmath>

#include "lpn/error.hpp"

namespace lpn {

double lr_at_epoch(const SgdConfig& config, std::size_t epoch) {
    double lr = config.lr;
    for (std::size_t e : config.decay_epochs) {
        if (epoch >= e) lr *= config.decay_factor;
    }
    return lr;
}

OptimizerState make_optimizer(const SgdConfig& config, std::span<const NamedTensor> params) {
    OptimizerState s;
    s.lr = config.lr;
    s.momentum = config.momentum;
    s.weight_decay = config.weight_decay;
    for (const auto& p : params) s.velocity.emplace_back(p.tensor.numel(), 0.0);
    return s;
}

void sgd_step(std::span<const NamedTensor> params, OptimizerState& state) {
    if (state.velocity.size() != params.size()) {
        throw ContractError("sgd: optimizer holds " + std::to_string(state.velocity.size()) +
                            " buffers for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = params[i].tensor;
        if (state.velocity[i].size() != t.numel()) {
            throw DimensionError("sgd: momentum buffer for '" + params[i].name +
                                 "' does not match " + shape_str(t.shape()));
        }
        if (!t.has_grad()) continue;
        for (double g : t.grad()) {
            if (!std::isfinite(g)) {
                throw TrainingError("sgd: non-finite gradient in parameter '" + params[i].name + "'");
            }
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto value = t.mutable_values();
        auto& v = state.velocity[i];
        const bool has = t.has_grad();
        std::span<const double> g = has ? t.grad() : std::span<const double>{};
        for (std::size_t k = 0; k < v.size(); ++k) {
            const double gk = has ? g[k] : 0.0;
            v[k] = state.momentum * v[k] + gk + state.weight_decay * value[k];
            value[k] -= state.lr * v[k];
        }
    }
}

void zero_grads(std::span<const NamedTensor> params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

} // namespace lpn
