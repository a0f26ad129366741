#pragma once

#include <cmath>
#include <functional>

#include "stylefuse/autograd.hpp"
#include "stylefuse/random.hpp"

namespace sftest {

using namespace stylefuse;

// relative error between analytic and numeric gradients, guarded for tiny norms
inline double grad_rel_err(const Tensor& analytic, const Tensor& numeric) {
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < analytic.numel(); ++i) {
        num += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        den += numeric[i] * numeric[i] + analytic[i] * analytic[i];
    }
    return std::sqrt(num) / (std::sqrt(den) + 1e-10);
}

// Checks d f / d leaf for a scalar-valued graph builder. The builder is
// re-invoked per evaluation so finite differences see a fresh graph.
inline double check_gradient(const std::function<ag::Var()>& build, const ag::Var& leaf,
                             double step = 1e-4) {
    ag::Var out = build();
    ag::clear_grads(out);  // leaves may hold accumulation from earlier checks
    ag::backward(out);
    Tensor analytic = leaf->grad;
    ag::clear_grads(out);
    Tensor numeric = ag::numeric_grad([&] { return build()->value[0]; }, leaf, step);
    return grad_rel_err(analytic, numeric);
}

}  // namespace sftest
