#pragma once

// Score functions and conditional expected Fisher information for softmax
// models, together with the coarsening decomposition
//
//   I_Y(theta | x) = I_Z(theta | x) + E[Var(s_Y | Z, x)],
//
// where the missing-information term equals the closed-form gap
// (1 - eta_c) J^T (Diag(pi) - pi pi^T) J for the target-vs-rest map.
//
// Every operation comes in two forms: one taking a model, parameters and an
// input, and one taking the logit Jacobian J (K x p) and the posterior eta
// directly. The second form is what the closed forms are written in.
// Expectations over labels are exhaustive finite sums; nothing here samples.

#include <iosfwd>
#include <optional>

#include "coarsegrain/core.hpp"

namespace coarsegrain {

using ScoreVector = Vector;

enum class InfoKind { multiclass, binary, gap, missing, observed };

/// Symmetric p x p information matrix tagged with what it represents.
class InfoMatrix {
public:
    /// Throws InvalidInput unless square, finite and symmetric within 1e-10 (relative to its scale).
    InfoMatrix(Matrix entries, InfoKind kind);

    const Matrix& entries() const { return entries_; }
    InfoKind kind() const { return kind_; }
    int dim() const { return static_cast<int>(entries_.rows()); }
    double operator()(int i, int j) const { return entries_(i, j); }

    /// Smallest eigenvalue of (A + A^T) / 2.
    double min_eigenvalue() const;
    bool is_psd(double tol = 1e-8) const { return min_eigenvalue() >= -tol; }

private:
    Matrix entries_;
    InfoKind kind_;
};

/// Which Fisher information oracle_fisher evaluates: the full label or a coarsening of it.
struct FisherMode {
    std::optional<CoarseningMap> coarsening;

    static FisherMode multiclass() { return {}; }
    static FisherMode coarsened(CoarseningMap map) { return {std::move(map)}; }
};

// ---- scores --------------------------------------------------------------

/// s_Y = J^T (e_y - eta).
ScoreVector score_multiclass(const Matrix& J, const ClassProbabilities& eta, int y);
/// s_Z = ((z - q) / (q (1 - q))) grad_theta q with grad_theta q = J^T (q (e_c - eta)).
/// Throws DegeneratePosterior when q is 0 or 1.
ScoreVector score_binary(const Matrix& J, const ClassProbabilities& eta, int z, int c);
/// E[s_Y | Z = z, x] as the exhaustive weighted average over the fiber g^{-1}(z).
ScoreVector project_score(const Matrix& J, const ClassProbabilities& eta, int z, const CoarseningMap& map);

ScoreVector score_multiclass(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int y);
ScoreVector score_binary(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int z, int c);
ScoreVector project_score(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int z,
                          const CoarseningMap& map);

// ---- closed forms --------------------------------------------------------

/// J^T (Diag(eta) - eta eta^T) J.
InfoMatrix fisher_multiclass(const Matrix& J, const ClassProbabilities& eta);
/// J^T ((eta_c / (1 - eta_c)) (e_c - eta)(e_c - eta)^T) J.
InfoMatrix fisher_binary(const Matrix& J, const ClassProbabilities& eta, int c);
/// (1 - eta_c) J^T (Diag(pi) - pi pi^T) J.
InfoMatrix fisher_gap(const Matrix& J, const ClassProbabilities& eta, int c);
/// sum_z p(z | x) Var(s_Y | Z = z, x), by exhaustive sums over each fiber.
InfoMatrix missing_information(const Matrix& J, const ClassProbabilities& eta, const CoarseningMap& map);
/// Exhaustive E[s s^T] over the label posterior; the coarsened score is taken from project_score.
InfoMatrix oracle_fisher(const Matrix& J, const ClassProbabilities& eta, const FisherMode& mode);

InfoMatrix fisher_multiclass(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x);
InfoMatrix fisher_binary(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int c);
InfoMatrix fisher_gap(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int c);
InfoMatrix missing_information(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                               const CoarseningMap& map);
InfoMatrix oracle_fisher(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                         const FisherMode& mode);

/// Mean of the closed-form conditional matrix (multiclass or binary) over the rows of
/// `inputs`. Work is split into fixed-size chunks reduced in chunk order, so the result is
/// bit-identical for any `jobs`.
InfoMatrix expected_fisher(const SoftmaxModel& model, const ParameterVector& theta, const Matrix& inputs,
                           LikelihoodMode mode, unsigned jobs = 1);

// ---- Loewner order -------------------------------------------------------

struct LoewnerVerdict {
    bool holds = false;
    /// lambda_min of the symmetrized difference A - B.
    double min_eigenvalue = 0.0;
};

/// A >= B in the Loewner order iff lambda_min(A - B) >= -tol.
LoewnerVerdict loewner_ge(const InfoMatrix& a, const InfoMatrix& b, double tol = 1e-8);

/// Row-major CSV, scientific notation with 17 significant digits.
void write_matrix_csv(std::ostream& out, const Matrix& m);

}  // namespace coarsegrain
