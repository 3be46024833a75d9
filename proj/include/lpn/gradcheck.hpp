#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lpn/tensor.hpp"

namespace lpn {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct GroupCheck {
    std::string name;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
    std::size_t retried = 0;  // coordinates that needed another step size
};

struct GradCheckReport {
    std::vector<GroupCheck> groups;
    double max_rel_error = 0.0;
    bool passed(double threshold) const { return max_rel_error < threshold; }
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-8);

struct GradCheckOptions {
    double eps = 1e-5;
    // A coordinate whose error at `eps` exceeds `retry_above` is re-measured at
    // each of these steps and keeps its smallest error. A step that straddles
    // a ReLU kink, or one too small for a tiny gradient, then does not count
    // as a mismatch, while a wrong gradient rule disagrees at every step.
    std::vector<double> retry_eps;
    double retry_above = 1e-6;
    double floor = 1e-8;  // denominator floor of the relative error
};

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// for every coordinate of every tensor in `params`.
///
/// `loss_fn` must rebuild the graph on each call and return a scalar. It is
/// evaluated twice up front; differing values raise DeterminismError.
/// Parameters are restored bit-exactly afterwards and their grads cleared.
GradCheckReport finite_diff_report(const std::function<Tensor()>& loss_fn,
                                   std::span<const NamedTensor> params, const GradCheckOptions& options = {});

double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                         double eps = 1e-5);

} // namespace lpn
