#include "lpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lpn/error.hpp"

namespace lpn {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_diff_report(const std::function<Tensor()>& loss_fn,
                                   std::span<const NamedTensor> params, const GradCheckOptions& options) {
    const double eps = options.eps;
    if (!(eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
    if (!(options.floor > 0.0)) throw ConfigError("finite_diff_check: floor must be positive");
    for (double e : options.retry_eps) {
        if (!(e > 0.0)) throw ConfigError("finite_diff_check: retry steps must be positive");
    }
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
    Tensor loss = loss_fn();
    const double base = loss.item();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        if (p.tensor.has_grad()) {
            analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
        } else {
            analytic.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    auto evaluate = [&] {
        NoGradGuard guard;
        return loss_fn().item();
    };
    if (evaluate() != base) {
        throw DeterminismError("finite_diff_check: loss function is not deterministic");
    }

    GradCheckReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor t = params[k].tensor;
        auto values = t.mutable_values();
        GroupCheck group{params[k].name, values.size(), 0.0, 0};
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            auto central = [&](double step) {
                values[i] = original + step;
                const double up = evaluate();
                values[i] = original - step;
                const double down = evaluate();
                values[i] = original;
                return (up - down) / (2.0 * step);
            };
            const double a = analytic[k][i];
            double err = relative_error(a, central(eps), options.floor);
            if (err > options.retry_above && !options.retry_eps.empty()) {
                ++group.retried;
                for (double step : options.retry_eps) {
                    err = std::min(err, relative_error(a, central(step), options.floor));
                }
            }
            group.max_rel_error = std::max(group.max_rel_error, err);
        }
        report.max_rel_error = std::max(report.max_rel_error, group.max_rel_error);
        report.groups.push_back(std::move(group));
        t.zero_grad();
    }
    return report;
}

double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                         double eps) {
    std::vector<NamedTensor> named;
    for (std::size_t i = 0; i < params.size(); ++i) {
        named.push_back({"param" + std::to_string(i), params[i]});
    }
    GradCheckOptions options;
    options.eps = eps;
    return finite_diff_report(loss_fn, named, options).max_rel_error;
}

} // namespace lpn
