#include "coarsegrain/information.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "coarsegrain/parallel.hpp"

namespace coarsegrain {

namespace {

void check_operands(const Matrix& J, const ClassProbabilities& eta) {
    if (J.rows() != eta.class_count()) {
        throw DimensionMismatch("Jacobian has " + std::to_string(J.rows()) + " rows for " +
                                std::to_string(eta.class_count()) + " classes");
    }
}

void check_class(int c, int K) {
    if (c < 0 || c >= K) throw InvalidInput("class index " + std::to_string(c) + " out of range");
}

Vector unit(int K, int k) {
    Vector e = Vector::Zero(K);
    e[k] = 1.0;
    return e;
}

/// q and 1 - q, rejecting degenerate posteriors.
std::pair<double, double> binary_split(const ClassProbabilities& eta, int c) {
    check_class(c, eta.class_count());
    const double q = eta.target(c);
    const double rest = eta.non_target_mass(c);
    if (q <= 0.0 || rest <= 0.0) {
        throw DegeneratePosterior("target posterior is exactly " + std::string(q <= 0.0 ? "0" : "1"));
    }
    return {q, rest};
}

// e_c - eta with the target entry taken as the non-target mass, which avoids the
// cancellation in 1 - eta_c when the target is nearly certain.
Vector target_direction(const ClassProbabilities& eta, int c, double rest) {
    Vector v = -eta.vector();
    v[c] = rest;
    return v;
}

Matrix sandwich(const Matrix& J, const Matrix& M) { return J.transpose() * (M * J); }

struct Evaluated {
    Matrix J;
    ClassProbabilities eta;
};

Evaluated evaluate(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x) {
    return {model.jacobian(theta, x), predict(model, theta, x)};
}

}  // namespace

InfoMatrix::InfoMatrix(Matrix entries, InfoKind kind) : entries_(std::move(entries)), kind_(kind) {
    if (entries_.rows() != entries_.cols()) throw InvalidInput("information matrix must be square");
    if (!entries_.allFinite()) throw InvalidInput("information matrix has non-finite entries");
    const double scale = std::max(1.0, entries_.cwiseAbs().maxCoeff());
    if ((entries_ - entries_.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
        throw InvalidInput("information matrix is not symmetric");
    }
}

double InfoMatrix::min_eigenvalue() const {
    if (entries_.size() == 0) return 0.0;
    const Matrix sym = 0.5 * (entries_ + entries_.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(sym, Eigen::EigenvaluesOnly);
    return solver.eigenvalues().minCoeff();
}

ScoreVector score_multiclass(const Matrix& J, const ClassProbabilities& eta, int y) {
    check_operands(J, eta);
    check_class(y, eta.class_count());
    return J.transpose() * (unit(eta.class_count(), y) - eta.vector());
}

ScoreVector score_binary(const Matrix& J, const ClassProbabilities& eta, int z, int c) {
    check_operands(J, eta);
    if (z != 0 && z != 1) throw InvalidInput("binary label must be 0 or 1");
    const auto [q, rest] = binary_split(eta, c);
    // (z - q) / (q (1 - q)) * q, with 1 - q taken as the non-target mass.
    const double coef = z == 1 ? 1.0 : -q / rest;
    return J.transpose() * (coef * target_direction(eta, c, rest));
}

ScoreVector project_score(const Matrix& J, const ClassProbabilities& eta, int z, const CoarseningMap& map) {
    check_operands(J, eta);
    if (map.class_count() != eta.class_count()) throw DimensionMismatch("coarsening map class count");
    const std::vector<int> fiber = map.fiber(z);
    double pz = 0.0;
    for (int y : fiber) pz += eta[y];
    if (pz <= 0.0) throw DegeneratePosterior("coarse label " + std::to_string(z) + " has zero probability");
    // Average e_y - eta over the fiber in logit space, then map through J once.
    Vector w = -eta.vector();
    for (int y : fiber) w[y] += eta[y] / pz;
    return J.transpose() * w;
}

ScoreVector score_multiclass(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int y) {
    const auto e = evaluate(model, theta, x);
    return score_multiclass(e.J, e.eta, y);
}

ScoreVector score_binary(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int z,
                         int c) {
    const auto e = evaluate(model, theta, x);
    return score_binary(e.J, e.eta, z, c);
}

ScoreVector project_score(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int z,
                          const CoarseningMap& map) {
    const auto e = evaluate(model, theta, x);
    return project_score(e.J, e.eta, z, map);
}

InfoMatrix fisher_multiclass(const Matrix& J, const ClassProbabilities& eta) {
    check_operands(J, eta);
    const Vector& p = eta.vector();
    Matrix M = p.asDiagonal();
    M -= p * p.transpose();
    return InfoMatrix(sandwich(J, M), InfoKind::multiclass);
}

InfoMatrix fisher_binary(const Matrix& J, const ClassProbabilities& eta, int c) {
    check_operands(J, eta);
    const auto [q, rest] = binary_split(eta, c);
    const Vector v = target_direction(eta, c, rest);
    const Matrix M = (q / rest) * (v * v.transpose());
    return InfoMatrix(sandwich(J, M), InfoKind::binary);
}

InfoMatrix fisher_gap(const Matrix& J, const ClassProbabilities& eta, int c) {
    check_operands(J, eta);
    const double rest = binary_split(eta, c).second;
    const Vector pi = eta.non_target_distribution(c);
    Matrix M = pi.asDiagonal();
    M -= pi * pi.transpose();
    return InfoMatrix(sandwich(J, rest * M), InfoKind::gap);
}

InfoMatrix missing_information(const Matrix& J, const ClassProbabilities& eta, const CoarseningMap& map) {
    check_operands(J, eta);
    if (map.class_count() != eta.class_count()) throw DimensionMismatch("coarsening map class count");
    const int K = eta.class_count();
    Matrix total = Matrix::Zero(J.cols(), J.cols());
    for (int z = 0; z < map.coarse_count(); ++z) {
        const std::vector<int> fiber = map.fiber(z);
        double pz = 0.0;
        for (int y : fiber) pz += eta[y];
        if (pz <= 0.0) continue;
        const Vector mean = project_score(J, eta, z, map);
        for (int y : fiber) {
            if (eta[y] == 0.0) continue;
            const Vector dev = J.transpose() * (unit(K, y) - eta.vector()) - mean;
            // p(z) * p(y | z) = eta_y.
            total += eta[y] * (dev * dev.transpose());
        }
    }
    return InfoMatrix(0.5 * (total + total.transpose()), InfoKind::missing);
}

InfoMatrix oracle_fisher(const Matrix& J, const ClassProbabilities& eta, const FisherMode& mode) {
    check_operands(J, eta);
    const int K = eta.class_count();
    Matrix total = Matrix::Zero(J.cols(), J.cols());
    if (!mode.coarsening) {
        for (int y = 0; y < K; ++y) {
            const Vector s = score_multiclass(J, eta, y);
            total += eta[y] * (s * s.transpose());
        }
        return InfoMatrix(0.5 * (total + total.transpose()), InfoKind::multiclass);
    }
    const CoarseningMap& map = *mode.coarsening;
    for (int z = 0; z < map.coarse_count(); ++z) {
        double pz = 0.0;
        for (int y : map.fiber(z)) pz += eta[y];
        if (pz <= 0.0) continue;
        const Vector s = project_score(J, eta, z, map);
        total += pz * (s * s.transpose());
    }
    return InfoMatrix(0.5 * (total + total.transpose()), InfoKind::binary);
}

InfoMatrix fisher_multiclass(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x) {
    const auto e = evaluate(model, theta, x);
    return fisher_multiclass(e.J, e.eta);
}

InfoMatrix fisher_binary(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int c) {
    const auto e = evaluate(model, theta, x);
    return fisher_binary(e.J, e.eta, c);
}

InfoMatrix fisher_gap(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x, int c) {
    const auto e = evaluate(model, theta, x);
    return fisher_gap(e.J, e.eta, c);
}

InfoMatrix missing_information(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                               const CoarseningMap& map) {
    const auto e = evaluate(model, theta, x);
    return missing_information(e.J, e.eta, map);
}

InfoMatrix oracle_fisher(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x,
                         const FisherMode& mode) {
    const auto e = evaluate(model, theta, x);
    return oracle_fisher(e.J, e.eta, mode);
}

InfoMatrix expected_fisher(const SoftmaxModel& model, const ParameterVector& theta, const Matrix& inputs,
                           LikelihoodMode mode, unsigned jobs) {
    const Eigen::Index m = inputs.rows();
    if (m < 1) throw InvalidInput("expected Fisher information needs at least one input");
    if (inputs.cols() != model.feature_dim()) throw DimensionMismatch("input feature dimension");
    constexpr Eigen::Index kChunk = 256;
    const std::size_t chunks = static_cast<std::size_t>((m + kChunk - 1) / kChunk);
    const int p = model.parameter_count();
    std::vector<Matrix> partial(chunks);
    parallel_for(chunks, jobs, [&](std::size_t chunk) {
        Matrix acc = Matrix::Zero(p, p);
        const Eigen::Index begin = static_cast<Eigen::Index>(chunk) * kChunk;
        const Eigen::Index end = std::min(m, begin + kChunk);
        for (Eigen::Index i = begin; i < end; ++i) {
            const auto e = evaluate(model, theta, inputs.row(i).transpose());
            acc += mode.binary ? fisher_binary(e.J, e.eta, mode.target).entries()
                               : fisher_multiclass(e.J, e.eta).entries();
        }
        partial[chunk] = std::move(acc);
    });
    Matrix total = Matrix::Zero(p, p);
    for (const auto& block : partial) total += block;
    total /= static_cast<double>(m);
    return InfoMatrix(0.5 * (total + total.transpose()), mode.binary ? InfoKind::binary : InfoKind::multiclass);
}

LoewnerVerdict loewner_ge(const InfoMatrix& a, const InfoMatrix& b, double tol) {
    if (a.dim() != b.dim()) throw DimensionMismatch("Loewner comparison of matrices of different sizes");
    const InfoMatrix diff(0.5 * ((a.entries() - b.entries()) + (a.entries() - b.entries()).transpose()),
                          InfoKind::gap);
    const double lambda = diff.min_eigenvalue();
    return {lambda >= -tol, lambda};
}

void write_matrix_csv(std::ostream& out, const Matrix& m) {
    char buf[40];
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.16e", m(i, j));
            if (j > 0) out << ',';
            out << buf;
        }
        out << '\n';
    }
}

}  // namespace coarsegrain
