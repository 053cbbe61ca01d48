#include "coarsegrain/oracles.hpp"

namespace coarsegrain::oracles {

Vector fd_gradient(const ScalarFn& f, const Vector& at, double step) {
    Vector g(at.size());
    Vector x = at;
    for (Eigen::Index i = 0; i < at.size(); ++i) {
        x[i] = at[i] + step;
        const double up = f(x);
        x[i] = at[i] - step;
        const double down = f(x);
        x[i] = at[i];
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

Matrix fd_hessian(const ScalarFn& f, const Vector& at, double step) {
    const Eigen::Index p = at.size();
    Matrix H(p, p);
    Vector x = at;
    const double center = f(at);
    for (Eigen::Index i = 0; i < p; ++i) {
        x[i] = at[i] + step;
        const double up = f(x);
        x[i] = at[i] - step;
        const double down = f(x);
        x[i] = at[i];
        H(i, i) = (up - 2.0 * center + down) / (step * step);
        for (Eigen::Index j = i + 1; j < p; ++j) {
            double corner[4];
            int idx = 0;
            for (double si : {1.0, -1.0}) {
                for (double sj : {1.0, -1.0}) {
                    x[i] = at[i] + si * step;
                    x[j] = at[j] + sj * step;
                    corner[idx++] = f(x);
                }
            }
            x[i] = at[i];
            x[j] = at[j];
            H(i, j) = H(j, i) = (corner[0] - corner[1] - corner[2] + corner[3]) / (4.0 * step * step);
        }
    }
    return H;
}

Matrix fd_logit_jacobian(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, double step) {
    Matrix J(model.class_count(), model.parameter_count());
    Vector t = theta.values();
    for (int j = 0; j < model.parameter_count(); ++j) {
        t[j] = theta[j] + step;
        const Vector up = model.logits(ParameterVector(t), x);
        t[j] = theta[j] - step;
        const Vector down = model.logits(ParameterVector(t), x);
        t[j] = theta[j];
        J.col(j) = (up - down) / (2.0 * step);
    }
    return J;
}

Matrix expected_negative_hessian(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                                 LikelihoodMode mode, double step) {
    const ClassProbabilities eta = predict(model, theta, x);
    const int K = model.class_count();
    auto loglik_for = [&](int y) {
        return [&model, &x, mode, y](const Vector& t) {
            return sample_log_likelihood(model.logits(ParameterVector(t), x), y, mode);
        };
    };
    Matrix total = Matrix::Zero(model.parameter_count(), model.parameter_count());
    if (!mode.binary) {
        for (int y = 0; y < K; ++y) total -= eta[y] * fd_hessian(loglik_for(y), theta.values(), step);
        return total;
    }
    const int c = mode.target;
    const int other = c == 0 ? 1 : 0;
    const double q = eta[c];
    total -= q * fd_hessian(loglik_for(c), theta.values(), step);
    total -= eta.non_target_mass(c) * fd_hessian(loglik_for(other), theta.values(), step);
    return total;
}

Instance random_instance(Rng& rng, Architecture architecture, const InstanceOptions& options) {
    const int K = options.min_classes + static_cast<int>(rng.below(options.max_classes - options.min_classes + 1));
    const int d = options.min_dim + static_cast<int>(rng.below(options.max_dim - options.min_dim + 1));
    const SoftmaxModel model = architecture == Architecture::linear
                                   ? SoftmaxModel::linear(d, K)
                                   : SoftmaxModel::hidden_layer(d, K, options.hidden_width);
    Vector theta(model.parameter_count());
    for (auto& v : theta) v = options.theta_scale * rng.normal();
    Vector x(d);
    for (auto& v : x) v = options.input_scale * rng.normal();
    const int target = static_cast<int>(rng.below(K));
    return {model, ParameterVector(std::move(theta)), std::move(x), target};
}

}  // namespace coarsegrain::oracles
