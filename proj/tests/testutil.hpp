#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bevit/rng.hpp"
#include "bevit/tensor.hpp"

namespace testutil {

// Central difference of a scalar forward pass w.r.t. one coordinate of `leaf`.
// `forward` must recompute the loss from current leaf values; runs no-grad.
template <class T>
double fd_one(bevit::num::Tensor<T>& leaf, std::size_t idx,
              const std::function<double()>& forward, double h) {
    bevit::num::NoGradGuard ng;
    auto vals = leaf.values_mut();
    const T orig = vals[idx];
    vals[idx] = static_cast<T>(static_cast<double>(orig) + h);
    const double fp = forward();
    vals[idx] = static_cast<T>(static_cast<double>(orig) - h);
    const double fm = forward();
    vals[idx] = orig;
    return (fp - fm) / (2.0 * h);
}

template <class T>
std::vector<double> fd_grad(bevit::num::Tensor<T>& leaf,
                            const std::function<double()>& forward, double h) {
    std::vector<double> out(static_cast<std::size_t>(leaf.numel()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fd_one(leaf, i, forward, h);
    return out;
}

inline double rel_err(double got, double want) {
    const double denom = std::max({std::fabs(got), std::fabs(want), 1e-8});
    return std::fabs(got - want) / denom;
}

// Compares analytic gradient of `leaf` against central differences, returning
// the worst relative error over all coordinates (absolute error used where the
// expected magnitude is below `floor`).
template <class T>
double max_grad_rel_err(bevit::num::Tensor<T>& leaf,
                        const std::function<double()>& forward, double h,
                        double floor = 1e-6) {
    const auto fd = fd_grad(leaf, forward, h);
    double worst = 0.0;
    const auto g = leaf.grad();
    for (std::size_t i = 0; i < fd.size(); ++i) {
        const double a = static_cast<double>(g[i]);
        const double err = std::fabs(a - fd[i]);
        const double denom = std::max(std::fabs(fd[i]), floor);
        worst = std::max(worst, std::min(err, err / denom));
    }
    return worst;
}

template <class T>
bevit::num::Tensor<T> random_tensor(bevit::num::Shape shape, bevit::RandomStream& rng,
                                    bool requires_grad = false, double spread = 1.0) {
    std::vector<T> vals(static_cast<std::size_t>(bevit::num::shape_numel(shape)));
    for (auto& v : vals) v = static_cast<T>(rng.uniform(-spread, spread));
    return bevit::num::Tensor<T>::from(std::move(shape), std::move(vals), requires_grad);
}

}  // namespace testutil
