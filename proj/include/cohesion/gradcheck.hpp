#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "cohesion/rng.hpp"
#include "cohesion/tensor.hpp"

namespace cohesion {

/// Compares the analytic gradient of `loss_fn` at `params` against central
/// finite differences, in double precision. Returns the largest relative
/// error over all parameter components, where the relative error uses
/// max(|analytic|, |numeric|, 1e-8) as denominator.
///
/// `loss_fn` must build a fresh scalar graph from the given leaves each call.
inline double max_gradient_error(
    std::vector<Tensor<double>>& params,
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& loss_fn,
    double step = 1e-5) {
    for (auto& p : params) p.zero_grad();
    Tensor<double> loss = loss_fn(params);
    backward(loss);

    double worst = 0.0;
    for (auto& p : params) {
        if (!p.requires_grad()) continue;  // untracked state has no gradient to check
        std::vector<double> analytic =
            p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
        auto& vals = p.values_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + step;
            const double up = loss_fn(params).item();
            vals[i] = keep - step;
            const double down = loss_fn(params).item();
            vals[i] = keep;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

/// Like max_gradient_error, but checks at most `samples_per_param` randomly
/// chosen components of each parameter instead of all of them. Composite
/// models have too many parameters for exhaustive finite differences; a
/// seeded random subset keeps the check fast and reproducible.
inline double max_gradient_error_sampled(
    std::vector<Tensor<double>>& params,
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& loss_fn,
    std::size_t samples_per_param, Rng& rng, double step = 1e-5) {
    for (auto& p : params) p.zero_grad();
    Tensor<double> loss = loss_fn(params);
    backward(loss);

    double worst = 0.0;
    for (auto& p : params) {
        if (!p.requires_grad()) continue;  // untracked state has no gradient to check
        std::vector<double> analytic =
            p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
        std::vector<std::size_t> picks;
        if (p.size() <= samples_per_param) {
            picks.resize(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) picks[i] = i;
        } else {
            for (std::size_t s = 0; s < samples_per_param; ++s)
                picks.push_back(rng.below(p.size()));
        }
        auto& vals = p.values_mut();
        for (const std::size_t i : picks) {
            const double keep = vals[i];
            vals[i] = keep + step;
            const double up = loss_fn(params).item();
            vals[i] = keep - step;
            const double down = loss_fn(params).item();
            vals[i] = keep;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace cohesion
