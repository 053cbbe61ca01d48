#pragma once

// Monte-Carlo MLE laboratory: draw data from a known softmax model, fit the
// multiclass and collapsed-binary MLEs over the same parameter space with the
// same optimizer settings, and compare their sampling variances against the
// inverse-Fisher and delta-method predictions.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "coarsegrain/core.hpp"
#include "coarsegrain/information.hpp"
#include "coarsegrain/rng.hpp"

namespace coarsegrain {

/// p(X). `scale` is the standard deviation (gaussian) or the half-width (cube).
struct InputDistribution {
    enum class Kind { standard_gaussian, uniform_cube, fixed_pool };

    Kind kind = Kind::standard_gaussian;
    int dim = 1;
    double scale = 1.0;
    Matrix pool;

    static InputDistribution gaussian(int dim, double scale = 1.0);
    static InputDistribution uniform_cube(int dim, double half_width = 1.0);
    static InputDistribution fixed_pool(Matrix pool);

    /// n draws, one per row. fixed_pool draws rows uniformly with replacement.
    Matrix sample(int n, Rng& rng) const;
};

enum class Optimizer {
    gradient_ascent,
    /// Ascent along (empirical Fisher + ridge I)^{-1} grad, same Armijo line search.
    fisher_scoring,
};

/// Shared by both arms of every comparison.
struct FitConfig {
    Optimizer optimizer = Optimizer::fisher_scoring;
    int max_iters = 500;
    /// Convergence when ||grad||_inf / n <= grad_tol.
    double grad_tol = 1e-9;
    /// Objective is loglik - ridge * ||theta||^2 / 2.
    double ridge = 1e-8;
    double armijo = 1e-4;
    int max_backtracks = 60;

    bool operator==(const FitConfig&) const = default;
};

struct FitResult {
    ParameterVector theta;
    bool converged = false;
    int iterations = 0;
    double grad_norm = 0.0;
    double objective = 0.0;
};

/// Inputs i.i.d. from `dist`, labels from predict(model, true_theta, x). Deterministic in `seed`.
Dataset sample_dataset(const SoftmaxModel& model, const ParameterVector& true_theta,
                       const InputDistribution& dist, int n, std::uint64_t seed);

/// Maximizes the penalized log-likelihood under `mode` over the full parameter vector of
/// `model`. Non-convergence is reported in the result; a NaN objective throws NumericalError.
FitResult fit_mle(const SoftmaxModel& model, const Dataset& data, LikelihoodMode mode, const FitConfig& cfg,
                  const ParameterVector& init);

struct Trial {
    int id = 0;
    bool converged = false;
    int iterations = 0;
    ParameterVector theta_hat = ParameterVector::zeros(0);
    double tau_hat = 0.0;
};

struct MLEStudy {
    LikelihoodMode mode;
    int target = 0;
    int n = 0;
    ParameterVector true_theta = ParameterVector::zeros(0);
    Vector probe_x;
    FitConfig config;
    std::uint64_t seed = 0;
    std::vector<Trial> trials;

    int excluded() const;
    /// At most 2% of trials failed to converge.
    bool acceptable() const;
    std::string arm_label() const;
};

struct StudySpec {
    int n = 4000;
    int trials = 300;
    int target = 0;
    Vector probe_x;
    FitConfig config;
    std::uint64_t seed = 0;
};

/// Trial t fits the dataset drawn with derive_seed(seed, "mle-trial", t), starting from the
/// true parameters. The dataset stream does not depend on `mode`, so two arms built with the
/// same spec see the same data. Results are ordered by trial index for any `jobs`.
MLEStudy replicate_mle(const SoftmaxModel& model, const ParameterVector& true_theta,
                       const InputDistribution& dist, LikelihoodMode mode, const StudySpec& spec,
                       unsigned jobs = 1);

/// grad_theta eta_c(x; theta) = J^T (eta_c (e_c - eta)).
Vector target_probability_gradient(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                                   int c);

struct DeltaVariance {
    double variance = 0.0;
    /// Ridge added to the Fisher matrix before inversion (0 when it was already well conditioned).
    double ridge_added = 0.0;
    Vector gradient;
};

/// G^T I^{-1} G with G the gradient of eta_c(probe_x; theta*). If lambda_min(I) < 1e-10 the
/// matrix is regularized by `ridge` * identity first.
DeltaVariance delta_variance(const SoftmaxModel& model, const ParameterVector& theta_star,
                             const InfoMatrix& fisher, const Vector& probe_x, int c, double ridge = 1e-8);

struct ArmReport {
    LikelihoodMode mode;
    std::string label;
    int trials_used = 0;
    int excluded = 0;
    bool acceptable = true;
    /// Covariance of sqrt(n) (theta_hat - theta*) over converged trials.
    Matrix empirical_cov;
    /// I(theta*)^{-1}.
    Matrix theoretical_cov;
    double cov_relative_error = 0.0;
    double theoretical_var_tau = 0.0;
    double ridge_added = 0.0;
    /// Var of sqrt(n) tau_hat.
    double empirical_var_tau = 0.0;
    double mean_theta_error = 0.0;
};

enum class EmpiricalVerdict { first_lower, second_lower, indistinguishable };

struct EfficiencyReport {
    ArmReport first;
    ArmReport second;
    int n = 0;
    FitConfig config;
    std::uint64_t seed = 0;
    int bootstrap_resamples = 0;
    double confidence = 0.95;

    /// Theoretical Var_first / Var_second.
    double theoretical_ratio = 0.0;
    bool theoretical_first_le_second = false;
    /// Empirical Var(tau_hat_first) / Var(tau_hat_second) and its percentile bootstrap interval.
    double empirical_ratio = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    EmpiricalVerdict verdict = EmpiricalVerdict::indistinguishable;

    bool valid() const { return first.acceptable && second.acceptable; }
};

struct ReportOptions {
    /// Inputs used to integrate the Fisher information over p(X).
    int fisher_sample = 100000;
    int bootstrap_resamples = 10000;
    double confidence = 0.95;
    std::uint64_t seed = 0;
    unsigned jobs = 1;
};

/// Compares two studies run under identical settings. Throws InvalidInput if they differ in
/// true parameters, n, probe point, target class or FitConfig.
EfficiencyReport efficiency_report(const MLEStudy& first, const MLEStudy& second, const SoftmaxModel& model,
                                   const InputDistribution& dist, const ReportOptions& options);

/// A linear, reference-last, d = 2 design. The target class has a bias of 1 and no weights;
/// the other K - 1 classes have unit weight vectors spread evenly on the circle. Inputs are
/// gaussian with standard deviation 2 and the probe point is the origin, where every non-target
/// class is active.
struct MLEDesign {
    SoftmaxModel model;
    ParameterVector true_theta;
    InputDistribution dist;
    Vector probe_x;
    int target = 0;
};

MLEDesign default_mle_design(int class_count, int target = 0);

/// One row per trial: trial_id,converged,tau_hat,theta_0,...
void write_trials_csv(std::ostream& out, const MLEStudy& study);
/// arm,n,trials,empirical_var_tau,theoretical_var_tau,ratio,ci_low,ci_high,verdict; each row
/// states its arm relative to the other one.
void write_summary_csv(std::ostream& out, const EfficiencyReport& report);

std::string to_string(EmpiricalVerdict verdict);

}  // namespace coarsegrain
