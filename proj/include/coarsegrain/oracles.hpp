#pragma once

// Independent numerical oracles: finite differences and seeded random
// problem instances. Used by the verification suite and the tests; nothing
// in the closed-form paths depends on this header.

#include <functional>

#include "coarsegrain/core.hpp"
#include "coarsegrain/rng.hpp"

namespace coarsegrain::oracles {

using ScalarFn = std::function<double(const Vector&)>;

/// Central differences.
Vector fd_gradient(const ScalarFn& f, const Vector& at, double step);
/// Second-order central differences; the result is symmetrized.
Matrix fd_hessian(const ScalarFn& f, const Vector& at, double step);
/// K x p Jacobian of the logits by central differences.
Matrix fd_logit_jacobian(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, double step);

/// -E[Hessian of the per-sample log-likelihood] over the label posterior at x,
/// each Hessian by finite differences. Binary mode takes the expectation over z.
Matrix expected_negative_hessian(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                                 LikelihoodMode mode, double step);

struct Instance {
    SoftmaxModel model;
    ParameterVector theta;
    Vector x;
    int target = 0;
};

struct InstanceOptions {
    int min_classes = 2;
    int max_classes = 8;
    int min_dim = 1;
    int max_dim = 5;
    int hidden_width = 4;
    double theta_scale = 1.0;
    double input_scale = 1.0;
};

/// Gaussian parameters and input; class count, dimension and target drawn uniformly.
Instance random_instance(Rng& rng, Architecture architecture, const InstanceOptions& options = {});

}  // namespace coarsegrain::oracles
