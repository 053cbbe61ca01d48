#include "coarsegrain/estimation.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <tuple>
#include <ostream>

#include "coarsegrain/format.hpp"
#include "coarsegrain/parallel.hpp"

namespace coarsegrain {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

struct Objective {
    double value = 0.0;
    Vector grad;
    Matrix scoring;
};

/// Per-sample quantities of the softmax posterior, all taken from the log domain.
struct Posterior {
    Vector eta;
    double loglik = 0.0;
    /// d loglik / d logits.
    Vector residual;
    /// Logit-space Fisher weight matrix at this input.
    Matrix weight;
};

double log_sum_exp(const Vector& f, int skip = -1) {
    double m = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < f.size(); ++k) {
        if (k != skip) m = std::max(m, f[k]);
    }
    double s = 0.0;
    for (int k = 0; k < f.size(); ++k) {
        if (k != skip) s += std::exp(f[k] - m);
    }
    return m + std::log(s);
}

Posterior posterior(const Vector& f, int y, LikelihoodMode mode, bool want_weight) {
    const int K = static_cast<int>(f.size());
    Posterior out;
    const double lse = log_sum_exp(f);
    out.eta = (f.array() - lse).exp().matrix();
    out.loglik = sample_log_likelihood(f, y, mode);
    if (!mode.binary) {
        out.residual = -out.eta;
        out.residual[y] += 1.0;
        if (want_weight) {
            out.weight = out.eta.asDiagonal();
            out.weight -= out.eta * out.eta.transpose();
        }
        return out;
    }
    const int c = mode.target;
    const double lse_rest = log_sum_exp(f, c);
    const double q = std::exp(f[c] - lse);
    const double rest = std::exp(lse_rest - lse);
    // pi over the non-target classes, and e_c - pi.
    Vector target_minus_pi(K);
    for (int k = 0; k < K; ++k) target_minus_pi[k] = k == c ? 1.0 : -std::exp(f[k] - lse_rest);
    if (y == c) {
        out.residual = -out.eta;
        out.residual[c] += 1.0;
    } else {
        out.residual = -q * target_minus_pi;
    }
    if (want_weight) out.weight = (q * rest) * (target_minus_pi * target_minus_pi.transpose());
    return out;
}

Objective evaluate(const SoftmaxModel& model, const ParameterVector& theta, const Dataset& data,
                   LikelihoodMode mode, double ridge, bool want_grad, bool want_scoring) {
    const int p = model.parameter_count();
    Objective obj;
    if (want_grad) obj.grad = Vector::Zero(p);
    if (want_scoring) obj.scoring = Matrix::Zero(p, p);
    const bool linear = model.architecture() == Architecture::linear;
    const int stride = model.feature_dim() + 1;
    const int free = model.free_class_count();
    Vector xa(stride);
    Matrix outer(stride, stride);
    for (int i = 0; i < data.size(); ++i) {
        const Vector x = data.inputs.row(i).transpose();
        const Vector f = model.logits(theta, x);
        const Posterior post = posterior(f, data.labels[i], mode, want_scoring);
        obj.value += post.loglik;
        if (want_grad) model.accumulate_vjp(theta, x, post.residual, 1.0, obj.grad);
        if (!want_scoring) continue;
        if (linear) {
            xa.head(model.feature_dim()) = x;
            xa[model.feature_dim()] = 1.0;
            outer.noalias() = xa * xa.transpose();
            for (int k = 0; k < free; ++k) {
                for (int l = 0; l < free; ++l) {
                    obj.scoring.block(k * stride, l * stride, stride, stride) += post.weight(k, l) * outer;
                }
            }
        } else {
            const Matrix J = model.jacobian(theta, x);
            obj.scoring.noalias() += J.transpose() * (post.weight * J);
        }
    }
    obj.value -= 0.5 * ridge * theta.values().squaredNorm();
    if (want_grad) obj.grad -= ridge * theta.values();
    if (want_scoring) obj.scoring.diagonal().array() += ridge;
    if (!std::isfinite(obj.value)) throw NumericalError("log-likelihood objective is not finite");
    return obj;
}

double sample_variance(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return ss / (n - 1.0);
}

/// Order statistics at rank round(tail * (B - 1)) from each end. Taking the same rank from
/// both ends keeps the interval exactly reciprocal when the ratio is inverted.
std::pair<double, double> percentile_interval(std::vector<double> values, double tail) {
    std::sort(values.begin(), values.end());
    const auto last = values.size() - 1;
    const auto rank = static_cast<std::size_t>(std::llround(tail * static_cast<double>(last)));
    return {values[rank], values[last - rank]};
}

}  // namespace

InputDistribution InputDistribution::gaussian(int dim, double scale) {
    if (dim < 0 || !(scale > 0.0)) throw InvalidInput("gaussian input distribution needs dim >= 0, scale > 0");
    return {Kind::standard_gaussian, dim, scale, {}};
}

InputDistribution InputDistribution::uniform_cube(int dim, double half_width) {
    if (dim < 0 || !(half_width > 0.0)) throw InvalidInput("uniform cube needs dim >= 0, half-width > 0");
    return {Kind::uniform_cube, dim, half_width, {}};
}

InputDistribution InputDistribution::fixed_pool(Matrix pool) {
    if (pool.rows() < 1) throw InvalidInput("fixed input pool is empty");
    const int dim = static_cast<int>(pool.cols());
    return {Kind::fixed_pool, dim, 1.0, std::move(pool)};
}

Matrix InputDistribution::sample(int n, Rng& rng) const {
    Matrix X(n, dim);
    for (int i = 0; i < n; ++i) {
        switch (kind) {
            case Kind::standard_gaussian:
                for (int j = 0; j < dim; ++j) X(i, j) = scale * rng.normal();
                break;
            case Kind::uniform_cube:
                for (int j = 0; j < dim; ++j) X(i, j) = rng.uniform(-scale, scale);
                break;
            case Kind::fixed_pool:
                X.row(i) = pool.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(pool.rows()))));
                break;
        }
    }
    return X;
}

Dataset sample_dataset(const SoftmaxModel& model, const ParameterVector& true_theta,
                       const InputDistribution& dist, int n, std::uint64_t seed) {
    if (n < 1) throw InvalidInput("sample size must be positive");
    if (dist.dim != model.feature_dim()) throw DimensionMismatch("input distribution dimension");
    Rng rng(seed);
    Matrix X = dist.sample(n, rng);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
        const ClassProbabilities eta = predict(model, true_theta, X.row(i).transpose());
        const double u = rng.uniform();
        double acc = 0.0;
        int y = model.class_count() - 1;
        for (int k = 0; k < model.class_count(); ++k) {
            acc += eta[k];
            if (u < acc) {
                y = k;
                break;
            }
        }
        labels[i] = y;
    }
    return Dataset(std::move(X), std::move(labels), model.class_count());
}

FitResult fit_mle(const SoftmaxModel& model, const Dataset& data, LikelihoodMode mode, const FitConfig& cfg,
                  const ParameterVector& init) {
    if (data.feature_dim() != model.feature_dim()) throw DimensionMismatch("dataset feature dimension");
    if (init.size() != model.parameter_count()) throw DimensionMismatch("initial parameter size");
    if (mode.binary && (mode.target < 0 || mode.target >= model.class_count())) {
        throw InvalidInput("binary target class out of range");
    }
    if (cfg.ridge < 0.0) throw InvalidInput("ridge must be non-negative");
    const bool scoring = cfg.optimizer == Optimizer::fisher_scoring;
    const double n = static_cast<double>(data.size());

    FitResult result{init, false, 0, 0.0, 0.0};
    Vector theta = init.values();
    Objective obj = evaluate(model, init, data, mode, cfg.ridge, true, scoring);
    double step = 1.0 / n;
    for (int iter = 0;; ++iter) {
        result.iterations = iter;
        result.grad_norm = obj.grad.cwiseAbs().maxCoeff() / n;
        if (result.grad_norm <= cfg.grad_tol) {
            result.converged = true;
            break;
        }
        if (iter >= cfg.max_iters) break;

        Vector direction;
        if (scoring) {
            Eigen::LDLT<Matrix> ldlt(obj.scoring);
            direction = ldlt.solve(obj.grad);
            if (ldlt.info() != Eigen::Success || !direction.allFinite() || direction.dot(obj.grad) <= 0.0) {
                direction = obj.grad / n;
            }
            step = 1.0;
        } else {
            direction = obj.grad;
            step = std::min(2.0 * step, 1e6);
        }
        const double slope = direction.dot(obj.grad);
        bool accepted = false;
        for (int b = 0; b < cfg.max_backtracks; ++b) {
            const ParameterVector trial(theta + step * direction);
            Objective next = evaluate(model, trial, data, mode, cfg.ridge, true, false);
            // Near the optimum the objective stops resolving changes; a step that keeps it
            // level within round-off and shrinks the gradient is accepted too.
            const bool level = next.value >= obj.value - 64.0 * kEps * std::abs(obj.value) &&
                               next.grad.cwiseAbs().maxCoeff() < obj.grad.cwiseAbs().maxCoeff();
            if (next.value >= obj.value + cfg.armijo * step * slope || level) {
                theta = trial.values();
                obj = scoring ? evaluate(model, trial, data, mode, cfg.ridge, true, true) : std::move(next);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
    }
    result.theta = ParameterVector(theta);
    result.objective = obj.value;
    return result;
}

int MLEStudy::excluded() const {
    return static_cast<int>(std::count_if(trials.begin(), trials.end(), [](const Trial& t) { return !t.converged; }));
}

bool MLEStudy::acceptable() const {
    return static_cast<double>(excluded()) <= 0.02 * static_cast<double>(trials.size());
}

std::string MLEStudy::arm_label() const { return mode.binary ? "binary" : "multiclass"; }

MLEStudy replicate_mle(const SoftmaxModel& model, const ParameterVector& true_theta,
                       const InputDistribution& dist, LikelihoodMode mode, const StudySpec& spec, unsigned jobs) {
    if (spec.trials < 2) throw InvalidInput("a study needs at least two trials");
    if (spec.probe_x.size() != model.feature_dim()) throw DimensionMismatch("probe point dimension");
    if (spec.target < 0 || spec.target >= model.class_count()) throw InvalidInput("target class out of range");
    if (mode.binary && mode.target != spec.target) throw InvalidInput("binary arm must collapse onto the target");
    MLEStudy study;
    study.mode = mode;
    study.target = spec.target;
    study.n = spec.n;
    study.true_theta = true_theta;
    study.probe_x = spec.probe_x;
    study.config = spec.config;
    study.seed = spec.seed;
    study.trials.resize(static_cast<std::size_t>(spec.trials));
    parallel_for(study.trials.size(), jobs, [&](std::size_t t) {
        const Dataset data = sample_dataset(model, true_theta, dist, spec.n, derive_seed(spec.seed, "mle-trial", t));
        FitResult fit = fit_mle(model, data, mode, spec.config, true_theta);
        Trial& trial = study.trials[t];
        trial.id = static_cast<int>(t);
        trial.converged = fit.converged;
        trial.iterations = fit.iterations;
        trial.tau_hat = predict(model, fit.theta, spec.probe_x).target(spec.target);
        trial.theta_hat = std::move(fit.theta);
    });
    return study;
}

Vector target_probability_gradient(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                                   int c) {
    const ClassProbabilities eta = predict(model, theta, x);
    Vector v = -eta.target(c) * eta.vector();
    v[c] += eta.target(c);
    Vector g = Vector::Zero(model.parameter_count());
    model.accumulate_vjp(theta, x, v, 1.0, g);
    return g;
}

DeltaVariance delta_variance(const SoftmaxModel& model, const ParameterVector& theta_star,
                             const InfoMatrix& fisher, const Vector& probe_x, int c, double ridge) {
    if (fisher.dim() != model.parameter_count()) throw DimensionMismatch("Fisher matrix size");
    DeltaVariance out;
    out.gradient = target_probability_gradient(model, theta_star, probe_x, c);
    Matrix info = 0.5 * (fisher.entries() + fisher.entries().transpose());
    if (fisher.min_eigenvalue() < 1e-10) {
        out.ridge_added = ridge;
        info.diagonal().array() += ridge;
    }
    Eigen::LLT<Matrix> llt(info);
    if (llt.info() != Eigen::Success) throw NumericalError("Fisher information is singular after regularization");
    out.variance = out.gradient.dot(llt.solve(out.gradient));
    return out;
}

namespace {

ArmReport summarize_arm(const MLEStudy& study, const SoftmaxModel& model, const Matrix& inputs,
                        const ReportOptions& options) {
    ArmReport arm;
    arm.mode = study.mode;
    arm.label = study.arm_label();
    arm.excluded = study.excluded();
    arm.acceptable = study.acceptable();
    const LikelihoodMode fisher_mode =
        study.mode.binary ? study.mode : LikelihoodMode::multiclass();
    const InfoMatrix fisher = expected_fisher(model, study.true_theta, inputs, fisher_mode, options.jobs);
    const DeltaVariance dv =
        delta_variance(model, study.true_theta, fisher, study.probe_x, study.target, study.config.ridge);
    arm.theoretical_var_tau = dv.variance;
    arm.ridge_added = dv.ridge_added;
    Matrix info = fisher.entries();
    info.diagonal().array() += dv.ridge_added;
    arm.theoretical_cov = info.llt().solve(Matrix::Identity(info.rows(), info.cols()));

    const int p = model.parameter_count();
    const double root_n = std::sqrt(static_cast<double>(study.n));
    std::vector<Vector> deviations;
    std::vector<double> taus;
    double error_sum = 0.0;
    for (const Trial& t : study.trials) {
        if (!t.converged) continue;
        const Vector dev = t.theta_hat.values() - study.true_theta.values();
        error_sum += dev.norm();
        deviations.push_back(root_n * dev);
        taus.push_back(root_n * t.tau_hat);
    }
    arm.trials_used = static_cast<int>(deviations.size());
    if (arm.trials_used < 2) {
        arm.acceptable = false;
        arm.empirical_cov = Matrix::Zero(p, p);
        return arm;
    }
    Vector mean = Vector::Zero(p);
    for (const auto& d : deviations) mean += d;
    mean /= static_cast<double>(deviations.size());
    Matrix cov = Matrix::Zero(p, p);
    for (const auto& d : deviations) cov += (d - mean) * (d - mean).transpose();
    arm.empirical_cov = cov / static_cast<double>(deviations.size() - 1);
    arm.cov_relative_error = (arm.empirical_cov - arm.theoretical_cov).norm() / arm.theoretical_cov.norm();
    arm.empirical_var_tau = sample_variance(taus);
    arm.mean_theta_error = error_sum / static_cast<double>(deviations.size());
    return arm;
}

std::vector<double> converged_taus(const MLEStudy& study) {
    std::vector<double> taus;
    for (const Trial& t : study.trials) {
        if (t.converged) taus.push_back(t.tau_hat);
    }
    return taus;
}

}  // namespace

EfficiencyReport efficiency_report(const MLEStudy& first, const MLEStudy& second, const SoftmaxModel& model,
                                   const InputDistribution& dist, const ReportOptions& options) {
    if (first.n != second.n || first.target != second.target || !(first.config == second.config) ||
        first.true_theta.values() != second.true_theta.values() || first.probe_x != second.probe_x) {
        throw InvalidInput("studies differ in true parameters, n, probe point, target class or fit settings");
    }
    if (options.bootstrap_resamples < 1) throw InvalidInput("bootstrap needs at least one resample");
    if (!(options.confidence > 0.0 && options.confidence < 1.0)) throw InvalidInput("confidence must be in (0, 1)");

    Matrix inputs;
    if (dist.kind == InputDistribution::Kind::fixed_pool) {
        inputs = dist.pool;
    } else {
        Rng rng(derive_seed(options.seed, "fisher-sample"));
        inputs = dist.sample(options.fisher_sample, rng);
    }

    EfficiencyReport report;
    report.n = first.n;
    report.config = first.config;
    report.seed = options.seed;
    report.bootstrap_resamples = options.bootstrap_resamples;
    report.confidence = options.confidence;
    report.first = summarize_arm(first, model, inputs, options);
    report.second = summarize_arm(second, model, inputs, options);
    report.theoretical_ratio = report.first.theoretical_var_tau / report.second.theoretical_var_tau;
    report.theoretical_first_le_second =
        report.first.theoretical_var_tau <= report.second.theoretical_var_tau + 1e-12;

    const std::vector<double> a = converged_taus(first);
    const std::vector<double> b = converged_taus(second);
    if (a.size() < 2 || b.size() < 2) {
        report.verdict = EmpiricalVerdict::indistinguishable;
        return report;
    }
    report.empirical_ratio = sample_variance(a) / sample_variance(b);

    // Each arm is resampled from its own stream keyed by the arm label, so swapping the
    // arguments reuses the same resamples and inverts every ratio.
    Rng rng_a(derive_seed(options.seed, "bootstrap:" + first.arm_label()));
    Rng rng_b(derive_seed(options.seed, "bootstrap:" + second.arm_label()));
    std::vector<double> ratios(static_cast<std::size_t>(options.bootstrap_resamples));
    std::vector<double> ra(a.size()), rb(b.size());
    for (auto& ratio : ratios) {
        for (auto& v : ra) v = a[rng_a.below(a.size())];
        for (auto& v : rb) v = b[rng_b.below(b.size())];
        ratio = sample_variance(ra) / sample_variance(rb);
    }
    const double alpha = 1.0 - options.confidence;
    std::tie(report.ci_low, report.ci_high) = percentile_interval(std::move(ratios), alpha / 2.0);
    if (report.ci_high < 1.0) {
        report.verdict = EmpiricalVerdict::first_lower;
    } else if (report.ci_low > 1.0) {
        report.verdict = EmpiricalVerdict::second_lower;
    } else {
        report.verdict = EmpiricalVerdict::indistinguishable;
    }
    return report;
}

MLEDesign default_mle_design(int class_count, int target) {
    if (class_count < 2) throw InvalidInput("design needs at least two classes");
    if (target < 0 || target >= class_count) throw InvalidInput("target class out of range");
    constexpr int d = 2;
    const double pi = std::acos(-1.0);
    Matrix full = Matrix::Zero(class_count, d + 1);
    int j = 0;
    for (int k = 0; k < class_count; ++k) {
        if (k == target) {
            full(k, d) = 1.0;
            continue;
        }
        const double angle = 2.0 * pi * j++ / (class_count - 1);
        full(k, 0) = std::cos(angle);
        full(k, 1) = std::sin(angle);
    }
    const int free = class_count - 1;
    Vector theta(free * (d + 1));
    for (int k = 0; k < free; ++k) {
        for (int i = 0; i <= d; ++i) theta[k * (d + 1) + i] = full(k, i) - full(class_count - 1, i);
    }
    return {SoftmaxModel::linear(d, class_count, Parameterization::reference_last), ParameterVector(theta),
            InputDistribution::gaussian(d, 2.0), Vector::Zero(d), target};
}

std::string to_string(EmpiricalVerdict verdict) {
    switch (verdict) {
        case EmpiricalVerdict::first_lower: return "first_lower";
        case EmpiricalVerdict::second_lower: return "second_lower";
        case EmpiricalVerdict::indistinguishable: return "indistinguishable";
    }
    return "indistinguishable";
}

void write_trials_csv(std::ostream& out, const MLEStudy& study) {
    out << "trial_id,converged,tau_hat";
    const int p = study.true_theta.size();
    for (int j = 0; j < p; ++j) out << ",theta_" << j;
    out << '\n';
    for (const Trial& t : study.trials) {
        out << t.id << ',' << (t.converged ? 1 : 0) << ',' << format_real(t.tau_hat);
        for (int j = 0; j < t.theta_hat.size(); ++j) out << ',' << format_real(t.theta_hat[j]);
        out << '\n';
    }
}

void write_summary_csv(std::ostream& out, const EfficiencyReport& report) {
    out << "arm,n,trials,empirical_var_tau,theoretical_var_tau,ratio,ci_low,ci_high,verdict\n";
    auto row = [&](const ArmReport& arm, double ratio, double lo, double hi, const char* verdict) {
        out << arm.label << ',' << report.n << ',' << arm.trials_used << ',' << format_real(arm.empirical_var_tau)
            << ',' << format_real(arm.theoretical_var_tau) << ',' << format_real(ratio) << ','
            << format_real(lo) << ',' << format_real(hi) << ',' << verdict << '\n';
    };
    const char* first_verdict = report.verdict == EmpiricalVerdict::first_lower    ? "lower"
                                : report.verdict == EmpiricalVerdict::second_lower ? "higher"
                                                                                   : "indistinguishable";
    const char* second_verdict = report.verdict == EmpiricalVerdict::first_lower    ? "higher"
                                 : report.verdict == EmpiricalVerdict::second_lower ? "lower"
                                                                                    : "indistinguishable";
    const auto inv = [](double v) { return v == 0.0 ? 0.0 : 1.0 / v; };
    row(report.first, report.empirical_ratio, report.ci_low, report.ci_high, first_verdict);
    row(report.second, inv(report.empirical_ratio), inv(report.ci_high), inv(report.ci_low), second_verdict);
}

}  // namespace coarsegrain
