#pragma once

// Probability-simplex primitives, the softmax model families and label
// coarsening maps. Class indices are 0-based throughout the library.

#include <Eigen/Dense>

#include <vector>

#include "coarsegrain/error.hpp"

namespace coarsegrain {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Unnormalized class scores f(x; theta). Entries must be finite.
class LogitVector {
public:
    explicit LogitVector(Vector values);

    const Vector& values() const { return values_; }
    int size() const { return static_cast<int>(values_.size()); }

private:
    Vector values_;
};

/// A point on the (K-1)-simplex.
class ClassProbabilities {
public:
    /// Validates that entries are non-negative and sum to one within 1e-12.
    explicit ClassProbabilities(Vector probs);

    int class_count() const { return static_cast<int>(probs_.size()); }
    double operator[](int k) const { return probs_[k]; }
    const Vector& vector() const { return probs_; }

    /// q = eta_c.
    double target(int c) const;
    /// 1 - eta_c, summed over the non-target entries so it stays accurate when eta_c is close to 1.
    double non_target_mass(int c) const;
    /// pi with pi_k = eta_k / (1 - eta_c) for k != c and pi_c = 0.
    Vector non_target_distribution(int c) const;

private:
    Vector probs_;
};

class ParameterVector {
public:
    explicit ParameterVector(Vector theta);
    static ParameterVector zeros(int size) { return ParameterVector(Vector::Zero(size)); }

    const Vector& values() const { return theta_; }
    int size() const { return static_cast<int>(theta_.size()); }
    double operator[](int i) const { return theta_[i]; }

private:
    Vector theta_;
};

enum class Architecture { linear, hidden_layer };

/// `reference_last` pins the logit of the last class at zero (linear models only),
/// removing the shift non-identifiability of the softmax.
enum class Parameterization { full, reference_last };

/// Parametric logit map f(x; theta) with an analytic Jacobian.
///
/// Linear layout: for each free class k, d weights followed by one bias
/// (slot k*(d+1) + i). Hidden-layer layout: input weights A (h x d, row-major),
/// hidden biases a (h), output weights V (K x h, row-major), output biases (K);
/// logits are V tanh(A x + a) + b.
class SoftmaxModel {
public:
    static SoftmaxModel linear(int feature_dim, int class_count,
                               Parameterization parameterization = Parameterization::full);
    static SoftmaxModel hidden_layer(int feature_dim, int class_count, int width);

    Architecture architecture() const { return architecture_; }
    Parameterization parameterization() const { return parameterization_; }
    int feature_dim() const { return feature_dim_; }
    int class_count() const { return class_count_; }
    int hidden_width() const { return hidden_width_; }
    int parameter_count() const { return parameter_count_; }

    /// Number of classes whose logits carry free parameters.
    int free_class_count() const;

    Vector logits(const ParameterVector& theta, const Vector& x) const;
    /// K x p matrix of d f_k / d theta_j.
    Matrix jacobian(const ParameterVector& theta, const Vector& x) const;
    /// out += scale * J(x)^T v without materializing J.
    void accumulate_vjp(const ParameterVector& theta, const Vector& x, const Vector& v, double scale,
                        Eigen::Ref<Vector> out) const;

    void check(const ParameterVector& theta, const Vector& x) const;

    bool operator==(const SoftmaxModel&) const = default;

private:
    SoftmaxModel() = default;

    Architecture architecture_ = Architecture::linear;
    Parameterization parameterization_ = Parameterization::full;
    int feature_dim_ = 0;
    int class_count_ = 0;
    int hidden_width_ = 0;
    int parameter_count_ = 0;
};

/// Deterministic label coarsening Z = g(Y).
class CoarseningMap {
public:
    /// Z = 1{Y = target}: coarse label 1 is the target, 0 is the rest.
    static CoarseningMap target_vs_rest(int class_count, int target);
    /// mapping[y] = g(y); must be total and surjective onto {0..M-1}.
    static CoarseningMap general(std::vector<int> mapping);
    static CoarseningMap identity(int class_count);

    int class_count() const { return static_cast<int>(mapping_.size()); }
    int coarse_count() const { return coarse_count_; }
    bool is_target_vs_rest() const { return target_ >= 0; }
    int target() const { return target_; }
    int apply(int y) const;
    /// Fine labels y with g(y) = z, in increasing order.
    std::vector<int> fiber(int z) const;

private:
    CoarseningMap() = default;

    std::vector<int> mapping_;
    int coarse_count_ = 0;
    int target_ = -1;
};

/// Inputs are stored one sample per row.
struct Dataset {
    Matrix inputs;
    std::vector<int> labels;

    Dataset(Matrix inputs, std::vector<int> labels, int class_count);
    int size() const { return static_cast<int>(labels.size()); }
    int feature_dim() const { return static_cast<int>(inputs.cols()); }
};

/// Which likelihood is evaluated: the full multiclass one or the collapsed target-vs-rest one.
struct LikelihoodMode {
    bool binary = false;
    int target = -1;

    static LikelihoodMode multiclass() { return {}; }
    static LikelihoodMode binary_target(int c) { return {true, c}; }
    bool operator==(const LikelihoodMode&) const = default;
};

constexpr double kDefaultProbabilityFloor = 1e-300;

/// Max-shifted softmax. Throws InvalidInput on non-finite logits.
ClassProbabilities softmax(const LogitVector& logits);

ClassProbabilities predict(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x);

Matrix logit_jacobian(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x);

int coarsen(int y, const CoarseningMap& map);

/// Sum over samples of log eta_{y_i} (multiclass) or the Bernoulli log-likelihood of
/// z_i = 1{y_i = c} (binary). Each log-probability is clamped below at log(floor).
double log_likelihood(const SoftmaxModel& model, const ParameterVector& theta, const Dataset& data,
                      LikelihoodMode mode, double floor = kDefaultProbabilityFloor);

/// Per-sample log p(y | x) under `mode`, computed in the log domain.
double sample_log_likelihood(const Vector& logits, int y, LikelihoodMode mode,
                             double floor = kDefaultProbabilityFloor);

}  // namespace coarsegrain
