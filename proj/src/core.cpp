#include "coarsegrain/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace coarsegrain {

namespace {

void require_class_index(int y, int class_count, const char* what) {
    if (y < 0 || y >= class_count) {
        throw InvalidInput(std::string(what) + " " + std::to_string(y) + " outside [0, " +
                           std::to_string(class_count) + ")");
    }
}

double log_sum_exp(const Vector& f) {
    const double m = f.maxCoeff();
    return m + std::log((f.array() - m).exp().sum());
}

double log_sum_exp_excluding(const Vector& f, int skip) {
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

}  // namespace

LogitVector::LogitVector(Vector values) : values_(std::move(values)) {
    if (values_.size() < 2) throw InvalidInput("logit vector needs at least two classes");
    if (!values_.allFinite()) throw InvalidInput("non-finite logit");
}

ClassProbabilities::ClassProbabilities(Vector probs) : probs_(std::move(probs)) {
    if (probs_.size() < 2) throw InvalidInput("probability vector needs at least two classes");
    if (!probs_.allFinite() || probs_.minCoeff() < 0.0) {
        throw InvalidInput("probabilities must be finite and non-negative");
    }
    if (std::abs(probs_.sum() - 1.0) > 1e-12) throw InvalidInput("probabilities must sum to one");
}

double ClassProbabilities::target(int c) const {
    require_class_index(c, class_count(), "target class");
    return probs_[c];
}

double ClassProbabilities::non_target_mass(int c) const {
    require_class_index(c, class_count(), "target class");
    double s = 0.0;
    for (int k = 0; k < class_count(); ++k) {
        if (k != c) s += probs_[k];
    }
    return s;
}

Vector ClassProbabilities::non_target_distribution(int c) const {
    const double rest = non_target_mass(c);
    if (rest <= 0.0) throw DegeneratePosterior("non-target mass is zero");
    Vector pi = probs_ / rest;
    pi[c] = 0.0;
    return pi;
}

ParameterVector::ParameterVector(Vector theta) : theta_(std::move(theta)) {
    if (!theta_.allFinite()) throw InvalidInput("non-finite parameter");
}

SoftmaxModel SoftmaxModel::linear(int feature_dim, int class_count, Parameterization parameterization) {
    if (feature_dim < 0) throw InvalidInput("feature dimension must be non-negative");
    if (class_count < 2) throw InvalidInput("softmax model needs at least two classes");
    SoftmaxModel m;
    m.architecture_ = Architecture::linear;
    m.parameterization_ = parameterization;
    m.feature_dim_ = feature_dim;
    m.class_count_ = class_count;
    m.parameter_count_ = m.free_class_count() * (feature_dim + 1);
    return m;
}

SoftmaxModel SoftmaxModel::hidden_layer(int feature_dim, int class_count, int width) {
    if (feature_dim < 1) throw InvalidInput("hidden-layer model needs at least one feature");
    if (class_count < 2) throw InvalidInput("softmax model needs at least two classes");
    if (width < 1) throw InvalidInput("hidden width must be positive");
    SoftmaxModel m;
    m.architecture_ = Architecture::hidden_layer;
    m.feature_dim_ = feature_dim;
    m.class_count_ = class_count;
    m.hidden_width_ = width;
    m.parameter_count_ = width * feature_dim + width + class_count * width + class_count;
    return m;
}

int SoftmaxModel::free_class_count() const {
    return parameterization_ == Parameterization::reference_last ? class_count_ - 1 : class_count_;
}

void SoftmaxModel::check(const ParameterVector& theta, const Vector& x) const {
    if (theta.size() != parameter_count_) {
        throw DimensionMismatch("parameter vector has " + std::to_string(theta.size()) +
                                " entries, model expects " + std::to_string(parameter_count_));
    }
    if (x.size() != feature_dim_) {
        throw DimensionMismatch("input has " + std::to_string(x.size()) + " features, model expects " +
                                std::to_string(feature_dim_));
    }
}

Vector SoftmaxModel::logits(const ParameterVector& theta, const Vector& x) const {
    check(theta, x);
    const Vector& t = theta.values();
    Vector f = Vector::Zero(class_count_);
    if (architecture_ == Architecture::linear) {
        const int stride = feature_dim_ + 1;
        for (int k = 0; k < free_class_count(); ++k) {
            f[k] = t.segment(k * stride, feature_dim_).dot(x) + t[k * stride + feature_dim_];
        }
        return f;
    }
    const int h = hidden_width_, d = feature_dim_, K = class_count_;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> A(t.data(), h, d);
    Eigen::Map<const Vector> a(t.data() + h * d, h);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> V(
        t.data() + h * d + h, K, h);
    Eigen::Map<const Vector> b(t.data() + h * d + h + K * h, K);
    const Vector hidden = (A * x + a).array().tanh().matrix();
    f = V * hidden + b;
    return f;
}

Matrix SoftmaxModel::jacobian(const ParameterVector& theta, const Vector& x) const {
    check(theta, x);
    Matrix J = Matrix::Zero(class_count_, parameter_count_);
    if (architecture_ == Architecture::linear) {
        const int stride = feature_dim_ + 1;
        for (int k = 0; k < free_class_count(); ++k) {
            J.block(k, k * stride, 1, feature_dim_) = x.transpose();
            J(k, k * stride + feature_dim_) = 1.0;
        }
        return J;
    }
    const Vector& t = theta.values();
    const int h = hidden_width_, d = feature_dim_, K = class_count_;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> A(t.data(), h, d);
    Eigen::Map<const Vector> a(t.data() + h * d, h);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> V(
        t.data() + h * d + h, K, h);
    const Vector hidden = (A * x + a).array().tanh().matrix();
    const Vector slope = (1.0 - hidden.array().square()).matrix();
    const int off_a = h * d, off_v = off_a + h, off_b = off_v + K * h;
    for (int k = 0; k < K; ++k) {
        for (int j = 0; j < h; ++j) {
            const double g = V(k, j) * slope[j];
            for (int i = 0; i < d; ++i) J(k, j * d + i) = g * x[i];
            J(k, off_a + j) = g;
            J(k, off_v + k * h + j) = hidden[j];
        }
        J(k, off_b + k) = 1.0;
    }
    return J;
}

void SoftmaxModel::accumulate_vjp(const ParameterVector& theta, const Vector& x, const Vector& v, double scale,
                                  Eigen::Ref<Vector> out) const {
    if (v.size() != class_count_ || out.size() != parameter_count_) {
        throw DimensionMismatch("vector-Jacobian product operand sizes do not match the model");
    }
    if (architecture_ == Architecture::linear) {
        if (x.size() != feature_dim_) throw DimensionMismatch("input size does not match the model");
        const int stride = feature_dim_ + 1;
        for (int k = 0; k < free_class_count(); ++k) {
            const double w = scale * v[k];
            out.segment(k * stride, feature_dim_) += w * x;
            out[k * stride + feature_dim_] += w;
        }
        return;
    }
    check(theta, x);
    const Vector& t = theta.values();
    const int h = hidden_width_, d = feature_dim_, K = class_count_;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> A(t.data(), h, d);
    Eigen::Map<const Vector> a(t.data() + h * d, h);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> V(
        t.data() + h * d + h, K, h);
    const Vector hidden = (A * x + a).array().tanh().matrix();
    const Vector back = ((V.transpose() * v).array() * (1.0 - hidden.array().square())).matrix() * scale;
    const int off_a = h * d, off_v = off_a + h, off_b = off_v + K * h;
    for (int j = 0; j < h; ++j) {
        out.segment(j * d, d) += back[j] * x;
        out[off_a + j] += back[j];
    }
    for (int k = 0; k < K; ++k) {
        out.segment(off_v + k * h, h) += (scale * v[k]) * hidden;
        out[off_b + k] += scale * v[k];
    }
}

CoarseningMap CoarseningMap::target_vs_rest(int class_count, int target) {
    if (class_count < 2) throw InvalidInput("coarsening needs at least two classes");
    require_class_index(target, class_count, "target class");
    CoarseningMap m;
    m.mapping_.assign(class_count, 0);
    m.mapping_[target] = 1;
    m.coarse_count_ = 2;
    m.target_ = target;
    return m;
}

CoarseningMap CoarseningMap::general(std::vector<int> mapping) {
    if (mapping.empty()) throw InvalidInput("coarsening map is empty");
    const int coarse = *std::max_element(mapping.begin(), mapping.end()) + 1;
    std::vector<bool> hit(std::max(coarse, 0), false);
    for (int z : mapping) {
        if (z < 0) throw InvalidInput("coarse labels must be non-negative");
        hit[z] = true;
    }
    if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
        throw InvalidInput("coarsening map is not surjective onto its coarse labels");
    }
    CoarseningMap m;
    m.mapping_ = std::move(mapping);
    m.coarse_count_ = coarse;
    return m;
}

CoarseningMap CoarseningMap::identity(int class_count) {
    std::vector<int> g(class_count);
    for (int y = 0; y < class_count; ++y) g[y] = y;
    return general(std::move(g));
}

int CoarseningMap::apply(int y) const {
    require_class_index(y, class_count(), "label");
    return mapping_[y];
}

std::vector<int> CoarseningMap::fiber(int z) const {
    require_class_index(z, coarse_count_, "coarse label");
    std::vector<int> ys;
    for (int y = 0; y < class_count(); ++y) {
        if (mapping_[y] == z) ys.push_back(y);
    }
    return ys;
}

Dataset::Dataset(Matrix in, std::vector<int> lab, int class_count)
    : inputs(std::move(in)), labels(std::move(lab)) {
    if (labels.empty()) throw InvalidInput("dataset is empty");
    if (inputs.rows() != static_cast<Eigen::Index>(labels.size())) {
        throw DimensionMismatch("dataset has mismatched input and label counts");
    }
    for (int y : labels) require_class_index(y, class_count, "label");
}

ClassProbabilities softmax(const LogitVector& logits) {
    const Vector& f = logits.values();
    Vector e = (f.array() - f.maxCoeff()).unaryExpr([](double v) { return std::exp(v); }).matrix();
    e /= e.sum();
    return ClassProbabilities(std::move(e));
}

ClassProbabilities predict(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x) {
    return softmax(LogitVector(model.logits(theta, x)));
}

Matrix logit_jacobian(const SoftmaxModel& model, const ParameterVector& theta, const Vector& x) {
    return model.jacobian(theta, x);
}

int coarsen(int y, const CoarseningMap& map) { return map.apply(y); }

double sample_log_likelihood(const Vector& f, int y, LikelihoodMode mode, double floor) {
    const double log_floor = std::log(floor);
    const double lse = log_sum_exp(f);
    double value;
    if (!mode.binary) {
        value = f[y] - lse;
    } else if (y == mode.target) {
        value = f[mode.target] - lse;
    } else {
        value = log_sum_exp_excluding(f, mode.target) - lse;
    }
    return std::max(value, log_floor);
}

double log_likelihood(const SoftmaxModel& model, const ParameterVector& theta, const Dataset& data,
                      LikelihoodMode mode, double floor) {
    if (data.feature_dim() != model.feature_dim()) throw DimensionMismatch("dataset feature dimension");
    if (mode.binary) require_class_index(mode.target, model.class_count(), "target class");
    if (!(floor > 0.0)) throw InvalidInput("probability floor must be positive");
    double total = 0.0;
    for (int i = 0; i < data.size(); ++i) {
        const int y = data.labels[i];
        require_class_index(y, model.class_count(), "label");
        const Vector f = model.logits(theta, data.inputs.row(i).transpose());
        total += sample_log_likelihood(f, y, mode, floor);
    }
    return total;
}

}  // namespace coarsegrain
