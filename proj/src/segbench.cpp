#include "coarsegrain/segbench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "coarsegrain/error.hpp"
#include "coarsegrain/format.hpp"
#include "coarsegrain/parallel.hpp"
#include "coarsegrain/rng.hpp"

namespace coarsegrain {

namespace {

constexpr int kBackground = 0;
constexpr int kLesion = 1;
constexpr int kHost = 2;
constexpr int kProne = 3;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Ellipse {
    double r0, c0, a, b, angle;

    double reach() const { return std::max(a, b); }

    bool contains(int r, int c) const {
        const double y = r - r0;
        const double x = c - c0;
        const double ct = std::cos(angle);
        const double st = std::sin(angle);
        const double u = (x * ct + y * st) / b;
        const double v = (-x * st + y * ct) / a;
        return u * u + v * v <= 1.0;
    }

    bool inside_frame(int rows, int cols) const {
        return r0 - reach() >= 0.0 && c0 - reach() >= 0.0 && r0 + reach() <= rows - 1 && c0 + reach() <= cols - 1;
    }

    /// Pixels covered, clipped to the frame.
    std::vector<std::pair<int, int>> pixels(int rows, int cols) const {
        std::vector<std::pair<int, int>> out;
        const int r_lo = std::max(0, static_cast<int>(std::floor(r0 - reach())));
        const int r_hi = std::min(rows - 1, static_cast<int>(std::ceil(r0 + reach())));
        const int c_lo = std::max(0, static_cast<int>(std::floor(c0 - reach())));
        const int c_hi = std::min(cols - 1, static_cast<int>(std::ceil(c0 + reach())));
        for (int r = r_lo; r <= r_hi; ++r)
            for (int c = c_lo; c <= c_hi; ++c)
                if (contains(r, c)) out.emplace_back(r, c);
        return out;
    }
};

double class_value(const std::vector<double>& values, int k) {
    return values[static_cast<std::size_t>(std::min<int>(k, static_cast<int>(values.size()) - 1))];
}

int uniform_count(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

std::vector<std::pair<int, int>> pixels_with_label(const LabelGrid& g, int label) {
    std::vector<std::pair<int, int>> out;
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c)
            if (g.at(r, c) == label) out.emplace_back(r, c);
    return out;
}

bool touches(const LabelGrid& g, int r, int c, int label) {
    const int dr[4] = {-1, 1, 0, 0};
    const int dc[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
        const int rr = r + dr[k];
        const int cc = c + dc[k];
        if (rr >= 0 && cc >= 0 && rr < g.rows && cc < g.cols && g.at(rr, cc) == label) return true;
    }
    return false;
}

/// Small structures placed inside pixels labeled `host`, disjoint from `taken`.
std::vector<std::pair<int, int>> place_inside(const SceneConfig& cfg, Rng& rng, const LabelGrid& labels, int host,
                                              const std::vector<std::uint8_t>& taken, const char* what) {
    const auto candidates = pixels_with_label(labels, host);
    if (candidates.empty()) throw GenerationError(std::string("no room to place ") + what);
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        const auto [r0, c0] = candidates[rng.below(candidates.size())];
        const Ellipse e{static_cast<double>(r0), static_cast<double>(c0),
                        rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max),
                        rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max), rng.uniform(0.0, std::acos(-1.0))};
        if (!e.inside_frame(labels.rows, labels.cols)) continue;
        const auto px = e.pixels(labels.rows, labels.cols);
        const bool fits = std::all_of(px.begin(), px.end(), [&](const auto& p) {
            return labels.at(p.first, p.second) == host && !taken[static_cast<std::size_t>(p.first) * labels.cols + p.second];
        });
        if (fits) return px;
    }
    throw GenerationError(std::string("could not place ") + what + " after " + std::to_string(cfg.max_retries) +
                          " attempts");
}

/// A lesion in the background that shares at least one edge with the host organ.
std::vector<std::pair<int, int>> place_adjacent(const SceneConfig& cfg, Rng& rng, const LabelGrid& labels) {
    std::vector<std::pair<int, int>> rim;
    for (const auto& [r, c] : pixels_with_label(labels, kHost))
        if (touches(labels, r, c, kBackground)) rim.emplace_back(r, c);
    if (rim.empty()) throw GenerationError("host organ has no background border for an adjacent lesion");
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        const auto [rb, cb] = rim[rng.below(rim.size())];
        const double a = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
        const double b = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
        const double angle = rng.uniform(0.0, std::acos(-1.0));
        const double dir = rng.uniform(0.0, 2.0 * std::acos(-1.0));
        const double dist = std::min(a, b) + 0.5;
        const Ellipse e{rb + dist * std::sin(dir), cb + dist * std::cos(dir), a, b, angle};
        if (!e.inside_frame(labels.rows, labels.cols)) continue;
        const auto px = e.pixels(labels.rows, labels.cols);
        if (px.empty()) continue;
        bool free = true;
        bool adjacent = false;
        for (const auto& [r, c] : px) {
            free = free && labels.at(r, c) == kBackground;
            adjacent = adjacent || touches(labels, r, c, kHost);
        }
        if (free && adjacent) return px;
    }
    throw GenerationError("could not place an adjacent lesion after " + std::to_string(cfg.max_retries) +
                          " attempts");
}

// Shortest text that reads back to the same double.
std::string trim_real(double v) {
    char buf[32];
    const auto result = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, result.ptr);
}

// Per-image relabeling before boundary noise.
int map_label(int label, const LabelScheme& scheme, bool keep_aux) {
    if (label == kBackground || label == kLesion) return label;
    switch (scheme.kind) {
        case LabelScheme::Kind::binary:
        case LabelScheme::Kind::virtual_class: return kBackground;
        case LabelScheme::Kind::backsplit: return label;
        case LabelScheme::Kind::partial: return keep_aux ? label : kBackground;
        case LabelScheme::Kind::aux_sweep: return label < 2 + scheme.prefix ? label : kBackground;
    }
    return kBackground;
}

void perturb_boundaries(LabelGrid& labels, Rng& rng) {
    int top = 0;
    for (int v : labels.labels) top = std::max(top, v);
    for (int id = 2; id <= top; ++id) {
        const bool dilate = rng.coin();
        const LabelGrid before = labels;
        for (int r = 0; r < labels.rows; ++r) {
            for (int c = 0; c < labels.cols; ++c) {
                if (dilate && before.at(r, c) == kBackground && touches(before, r, c, id)) labels.at(r, c) = id;
                if (!dilate && before.at(r, c) == id) {
                    const bool border = r == 0 || c == 0 || r == labels.rows - 1 || c == labels.cols - 1 ||
                                        before.at(r - 1, c) != id || before.at(r + 1, c) != id ||
                                        before.at(r, c - 1) != id || before.at(r, c + 1) != id;
                    if (border) labels.at(r, c) = kBackground;
                }
            }
        }
    }
}

// Parameter blocks of a segmenter in the SoftmaxModel layout.
struct Blocks {
    int d, K, h;
    bool linear;

    int count() const { return linear ? K * (d + 1) : h * d + h + K * h + K; }
};

Blocks blocks_of(const SoftmaxModel& m) {
    return {m.feature_dim(), m.class_count(), m.hidden_width(), m.architecture() == Architecture::linear};
}

/// Logits for a batch of standardized feature rows.
Matrix batch_logits(const Blocks& bl, const Vector& theta, const Matrix& X, Matrix* hidden = nullptr) {
    if (bl.linear) {
        Eigen::Map<const RowMatrix> W(theta.data(), bl.K, bl.d + 1);
        Matrix L = X * W.leftCols(bl.d).transpose();
        L.rowwise() += W.col(bl.d).transpose();
        return L;
    }
    const double* p = theta.data();
    Eigen::Map<const RowMatrix> A(p, bl.h, bl.d);
    Eigen::Map<const Vector> a(p + bl.h * bl.d, bl.h);
    Eigen::Map<const RowMatrix> V(p + bl.h * bl.d + bl.h, bl.K, bl.h);
    Eigen::Map<const Vector> b(p + bl.h * bl.d + bl.h + bl.K * bl.h, bl.K);
    Matrix H = X * A.transpose();
    H.rowwise() += a.transpose();
    H = H.array().tanh().matrix();
    Matrix L = H * V.transpose();
    L.rowwise() += b.transpose();
    if (hidden) *hidden = std::move(H);
    return L;
}

/// Mean cross-entropy of the batch and its gradient.
double batch_gradient(const Blocks& bl, const Vector& theta, const Matrix& X, const std::vector<int>& y,
                      Vector& grad) {
    Matrix H;
    Matrix L = batch_logits(bl, theta, X, &H);
    const Eigen::Index B = X.rows();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < B; ++i) {
        const double m = L.row(i).maxCoeff();
        double s = 0.0;
        for (int k = 0; k < bl.K; ++k) {
            L(i, k) = std::exp(L(i, k) - m);
            s += L(i, k);
        }
        L.row(i) /= s;
        loss -= std::log(std::max(L(i, y[static_cast<std::size_t>(i)]), 1e-300));
        L(i, y[static_cast<std::size_t>(i)]) -= 1.0;
    }
    const double inv = 1.0 / static_cast<double>(B);
    L *= inv;
    grad.setZero(bl.count());
    if (bl.linear) {
        Eigen::Map<RowMatrix> gW(grad.data(), bl.K, bl.d + 1);
        gW.leftCols(bl.d) = L.transpose() * X;
        gW.col(bl.d) = L.colwise().sum().transpose();
        return loss * inv;
    }
    const double* p = theta.data();
    Eigen::Map<const RowMatrix> V(p + bl.h * bl.d + bl.h, bl.K, bl.h);
    double* g = grad.data();
    Eigen::Map<RowMatrix> gA(g, bl.h, bl.d);
    Eigen::Map<Vector> ga(g + bl.h * bl.d, bl.h);
    Eigen::Map<RowMatrix> gV(g + bl.h * bl.d + bl.h, bl.K, bl.h);
    Eigen::Map<Vector> gb(g + bl.h * bl.d + bl.h + bl.K * bl.h, bl.K);
    gV = L.transpose() * H;
    gb = L.colwise().sum().transpose();
    const Matrix dH = ((L * V).array() * (1.0 - H.array().square())).matrix();
    gA = dH.transpose() * X;
    ga = dH.colwise().sum().transpose();
    return loss * inv;
}

Matrix standardize(const Matrix& F, const Vector& mean, const Vector& scale) {
    Matrix X = F.rowwise() - mean.transpose();
    X.array().rowwise() /= scale.transpose().array();
    return X;
}

void copy_warm_start(const Segmenter& src, const Blocks& dst, Vector& theta) {
    const Blocks sb = blocks_of(src.model);
    const Vector& s = src.theta.values();
    if (dst.linear) {
        theta.head(sb.count()) = s;
        return;
    }
    const int first = dst.h * dst.d + dst.h;
    theta.head(first) = s.head(first);
    for (int k = 0; k < sb.K; ++k) {
        theta.segment(first + k * dst.h, dst.h) = s.segment(first + k * sb.h, sb.h);
        theta[first + dst.K * dst.h + k] = s[first + sb.K * sb.h + k];
    }
}

struct Evaluation {
    double dice = 0.0, hd95 = 0.0, nsd = 0.0;
};

Evaluation evaluate_segmenter(const Segmenter& seg, const std::vector<LabeledImage>& test,
                              const MetricOptions& options) {
    Evaluation e;
    for (const LabeledImage& img : test) {
        const MetricsResult m =
            evaluate_masks(predict_mask(seg, img, kLesion), BinaryMask::from_labels(img.labels, kLesion), options);
        e.dice += m.dice;
        e.hd95 += m.hd95;
        e.nsd += m.nsd;
    }
    const double n = static_cast<double>(test.size());
    return {e.dice / n, e.hd95 / n, e.nsd / n};
}

struct Split {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> test;
};

Split make_scenes(const BenchConfig& cfg, std::uint64_t seed) {
    Split s;
    for (int i = 0; i < cfg.train_scenes + cfg.test_scenes; ++i) {
        LabeledImage img = generate_scene(cfg.scene, derive_seed(seed, "scene", static_cast<std::uint64_t>(i)));
        (i < cfg.train_scenes ? s.train : s.test).push_back(std::move(img));
    }
    return s;
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

void SceneConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw InvalidInput("scene config: " + what);
    };
    require(rows >= 8 && cols >= 8, "image must be at least 8x8");
    require(organ_major_min > 0 && organ_major_min <= organ_major_max, "organ major axis range");
    require(organ_minor_min > 0 && organ_minor_min <= organ_minor_max, "organ minor axis range");
    require(2.0 * std::max(organ_major_max, organ_minor_max) < std::min(rows, cols), "organs do not fit the image");
    require(extra_organs >= 0, "extra_organs must be >= 0");
    require(lesion_min >= 0 && lesion_min <= lesion_max, "lesion count range");
    require(confuser_min >= 0 && confuser_min <= confuser_max, "confuser count range");
    require(lesion_radius_min > 0 && lesion_radius_min <= lesion_radius_max, "lesion radius range");
    require(!class_means.empty() && !class_sds.empty(), "class intensity lists are empty");
    require(std::all_of(class_sds.begin(), class_sds.end(), [](double v) { return v >= 0.0; }),
            "class standard deviations must be >= 0");
    require(noise >= 0.0, "noise must be >= 0");
    require(max_retries >= 1, "max_retries must be >= 1");
}

int LabeledImage::class_count() const {
    int top = 0;
    for (int v : labels.labels) top = std::max(top, v);
    return top + 1;
}

LabeledImage generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    LabeledImage img;
    img.rows = cfg.rows;
    img.cols = cfg.cols;
    img.labels = LabelGrid(cfg.rows, cfg.cols, kBackground);
    LabelGrid& labels = img.labels;

    // Extra organs first, the host organ last, each claiming only background pixels.
    std::vector<int> organs;
    for (int k = cfg.class_count() - 1; k >= kHost; --k) organs.push_back(k);
    for (int organ : organs) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
            const double a = rng.uniform(cfg.organ_major_min, cfg.organ_major_max);
            const double b = rng.uniform(cfg.organ_minor_min, cfg.organ_minor_max);
            const double reach = std::max(a, b);
            const Ellipse e{rng.uniform(reach, cfg.rows - 1 - reach), rng.uniform(reach, cfg.cols - 1 - reach), a, b,
                            rng.uniform(0.0, std::acos(-1.0))};
            const auto px = e.pixels(cfg.rows, cfg.cols);
            const auto free = std::count_if(px.begin(), px.end(),
                                            [&](const auto& p) { return labels.at(p.first, p.second) == kBackground; });
            if (static_cast<double>(free) < 0.85 * static_cast<double>(px.size())) continue;
            for (const auto& [r, c] : px)
                if (labels.at(r, c) == kBackground) labels.at(r, c) = organ;
            placed = true;
        }
        if (!placed) {
            throw GenerationError("could not place organ " + std::to_string(organ) + " after " +
                                  std::to_string(cfg.max_retries) + " attempts");
        }
    }

    std::vector<std::uint8_t> confuser(static_cast<std::size_t>(cfg.rows) * cfg.cols, 0);
    std::vector<std::uint8_t> none(confuser.size(), 0);
    const int lesions = uniform_count(rng, cfg.lesion_min, cfg.lesion_max);
    for (int i = 0; i < lesions; ++i) {
        const auto px = cfg.placement == Placement::inside_organ
                            ? place_inside(cfg, rng, labels, kHost, none, "lesion")
                            : place_adjacent(cfg, rng, labels);
        for (const auto& [r, c] : px) labels.at(r, c) = kLesion;
    }
    const int confusers = uniform_count(rng, cfg.confuser_min, cfg.confuser_max);
    for (int i = 0; i < confusers; ++i) {
        for (const auto& [r, c] : place_inside(cfg, rng, labels, kProne, confuser, "confuser")) {
            confuser[static_cast<std::size_t>(r) * cfg.cols + c] = 1;
        }
    }

    img.intensities.resize(confuser.size());
    for (std::size_t i = 0; i < confuser.size(); ++i) {
        const int k = labels.labels[i];
        const double mean = confuser[i] ? cfg.confuser_mean : class_value(cfg.class_means, k);
        const double texture = class_value(cfg.class_sds, k) * rng.normal();
        img.intensities[i] = mean + texture + cfg.noise * rng.normal();
    }
    return img;
}

void write_scene(std::ostream& intensities, std::ostream& labels, const LabeledImage& img) {
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            if (c > 0) intensities << ' ';
            intensities << format_real(img.intensity(r, c));
        }
        intensities << '\n';
    }
    write_label_grid(labels, img.labels);
}

LabeledImage read_scene(std::istream& intensities, std::istream& labels) {
    LabeledImage img;
    img.labels = read_label_grid(labels);
    img.rows = img.labels.rows;
    img.cols = img.labels.cols;
    std::string line;
    int r = 0;
    while (std::getline(intensities, line)) {
        std::istringstream row(line);
        std::vector<double> values;
        double v;
        while (row >> v) values.push_back(v);
        if (!row.eof()) throw IoError("intensity row " + std::to_string(r + 1) + " has a non-numeric entry");
        if (values.empty()) continue;
        if (static_cast<int>(values.size()) != img.cols) {
            throw IoError("intensity row " + std::to_string(r + 1) + " has " + std::to_string(values.size()) +
                          " values, labels have " + std::to_string(img.cols));
        }
        img.intensities.insert(img.intensities.end(), values.begin(), values.end());
        ++r;
    }
    if (r != img.rows) throw IoError("intensity grid has " + std::to_string(r) + " rows, labels have " +
                                     std::to_string(img.rows));
    return img;
}

Matrix extract_features(const LabeledImage& img) {
    const int H = img.rows;
    const int W = img.cols;
    constexpr int pad = 3;
    const int PH = H + 2 * pad;
    const int PW = W + 2 * pad;
    // Integral images of the edge-clamped padded image and its square.
    std::vector<double> s1(static_cast<std::size_t>(PH + 1) * (PW + 1), 0.0);
    std::vector<double> s2(s1.size(), 0.0);
    auto idx = [PW](int r, int c) { return static_cast<std::size_t>(r) * (PW + 1) + c; };
    for (int r = 0; r < PH; ++r) {
        const int sr = std::clamp(r - pad, 0, H - 1);
        for (int c = 0; c < PW; ++c) {
            const double v = img.intensity(sr, std::clamp(c - pad, 0, W - 1));
            s1[idx(r + 1, c + 1)] = v + s1[idx(r, c + 1)] + s1[idx(r + 1, c)] - s1[idx(r, c)];
            s2[idx(r + 1, c + 1)] = v * v + s2[idx(r, c + 1)] + s2[idx(r + 1, c)] - s2[idx(r, c)];
        }
    }
    auto window = [&](const std::vector<double>& s, int r, int c, int half) {
        const int r0 = r + pad - half, c0 = c + pad - half, r1 = r + pad + half + 1, c1 = c + pad + half + 1;
        return s[idx(r1, c1)] - s[idx(r0, c1)] - s[idx(r1, c0)] + s[idx(r0, c0)];
    };
    Matrix F(static_cast<Eigen::Index>(H) * W, kFeatureDim);
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            const Eigen::Index i = static_cast<Eigen::Index>(r) * W + c;
            F(i, 0) = img.intensity(r, c);
            int col = 1;
            for (int half : {1, 3}) {
                const double n = (2.0 * half + 1) * (2.0 * half + 1);
                const double mean = window(s1, r, c, half) / n;
                F(i, col++) = mean;
                F(i, col++) = std::max(0.0, window(s2, r, c, half) / n - mean * mean);
            }
            F(i, 5) = H > 1 ? static_cast<double>(r) / (H - 1) : 0.0;
            F(i, 6) = W > 1 ? static_cast<double>(c) / (W - 1) : 0.0;
        }
    }
    return F;
}

LabelScheme LabelScheme::partial(double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidInput("partial fraction must lie in [0, 1]");
    LabelScheme s{Kind::partial};
    s.fraction = fraction;
    return s;
}

LabelScheme LabelScheme::aux_sweep(int prefix) {
    if (prefix < 0) throw InvalidInput("auxiliary prefix must be >= 0");
    LabelScheme s{Kind::aux_sweep};
    s.prefix = prefix;
    return s;
}

std::string LabelScheme::name() const {
    std::string base;
    switch (kind) {
        case Kind::binary: base = "binary"; break;
        case Kind::backsplit: base = "backsplit"; break;
        case Kind::virtual_class: base = "virtual"; break;
        case Kind::partial: base = "partial:" + trim_real(fraction); break;
        case Kind::aux_sweep: base = "aux:" + std::to_string(prefix); break;
    }
    return boundary_noise ? base + "+noise" : base;
}

LabelScheme LabelScheme::parse(const std::string& text) {
    std::string name = text;
    bool noise = false;
    if (const auto plus = name.find('+'); plus != std::string::npos) {
        if (name.substr(plus) != "+noise") throw InvalidInput("unknown scheme modifier in '" + text + "'");
        noise = true;
        name = name.substr(0, plus);
    }
    LabelScheme s;
    auto number = [&](const std::string& digits) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(digits, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (digits.empty() || used != digits.size()) throw InvalidInput("bad number in scheme '" + text + "'");
        return v;
    };
    if (name == "binary") {
        s = binary();
    } else if (name == "backsplit") {
        s = backsplit();
    } else if (name == "virtual") {
        s = virtual_class();
    } else if (name.rfind("partial:", 0) == 0) {
        s = partial(number(name.substr(8)));
    } else if (name.rfind("aux:", 0) == 0) {
        const double k = number(name.substr(4));
        if (k != std::floor(k)) throw InvalidInput("auxiliary prefix must be an integer in '" + text + "'");
        s = aux_sweep(static_cast<int>(k));
    } else {
        throw InvalidInput("unknown label scheme '" + text + "'");
    }
    s.boundary_noise = noise;
    return s;
}

int LabelScheme::class_count(int scene_classes) const {
    if (scene_classes < 2) throw InvalidInput("scenes need at least background and lesion classes");
    switch (kind) {
        case Kind::binary: return 2;
        case Kind::backsplit: return scene_classes;
        case Kind::virtual_class: return 3;
        case Kind::partial: return fraction == 0.0 ? 2 : scene_classes;
        case Kind::aux_sweep:
            if (prefix > scene_classes - 2) {
                throw InvalidInput("auxiliary prefix " + std::to_string(prefix) + " exceeds the " +
                                   std::to_string(scene_classes - 2) + " auxiliary classes");
            }
            return 2 + prefix;
    }
    return 2;
}

LabeledImage apply_scheme(const LabeledImage& img, const LabelScheme& scheme, int scene_classes, std::uint64_t seed,
                          int image_index) {
    scheme.class_count(scene_classes);
    const auto index = static_cast<std::uint64_t>(image_index);
    const bool keep_aux =
        scheme.kind != LabelScheme::Kind::partial || Rng(derive_seed(seed, "partial", index)).uniform() < scheme.fraction;
    LabeledImage out = img;
    for (int& label : out.labels.labels) {
        if (label < 0 || label >= scene_classes) {
            throw InvalidInput("label " + std::to_string(label) + " outside the scene's " +
                               std::to_string(scene_classes) + " classes");
        }
        label = map_label(label, scheme, keep_aux);
    }
    if (scheme.boundary_noise) {
        Rng rng(derive_seed(seed, "aux-noise", index));
        perturb_boundaries(out.labels, rng);
    }
    return out;
}

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw InvalidInput("train config: " + what);
    };
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(learning_rate > 0.0, "learning_rate must be > 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
    require(adam_eps > 0.0, "adam_eps must be > 0");
    require(pixels_per_image >= 0, "pixels_per_image must be >= 0");
    require(hidden_width >= 1, "hidden_width must be >= 1");
    require(converge_tol >= 0.0, "converge_tol must be >= 0");
}

Segmenter train_segmenter(const std::vector<LabeledImage>& train, const LabelScheme& scheme, int scene_classes,
                          const TrainConfig& cfg, std::uint64_t seed, std::optional<WarmStart> warm,
                          const EpochCallback& on_epoch) {
    cfg.validate();
    if (train.empty()) throw InvalidInput("training needs at least one image");
    const int K = scheme.class_count(scene_classes);
    const int d = kFeatureDim;
    Segmenter seg{cfg.architecture == Architecture::linear ? SoftmaxModel::linear(d, K)
                                                           : SoftmaxModel::hidden_layer(d, K, cfg.hidden_width),
                  ParameterVector::zeros(0), scheme, Vector(), Vector(), 0, 0.0, false};
    const Blocks bl = blocks_of(seg.model);
    double lr = cfg.learning_rate;
    if (warm) {
        const Segmenter& src = *warm->source;
        if (src.scheme.kind != LabelScheme::Kind::binary) {
            throw InvalidInput("warm start must come from a binary segmenter");
        }
        if (!(warm->lr_scale > 0.0)) throw InvalidInput("warm-start lr_scale must be > 0");
        if (src.model.architecture() != seg.model.architecture() || src.model.hidden_width() != seg.model.hidden_width() ||
            src.model.class_count() > K) {
            throw InvalidInput("warm-start source architecture does not match the target");
        }
        lr *= warm->lr_scale;
    }

    // Training pool. Pixel draws depend on the seed and image index only.
    std::vector<Matrix> parts;
    std::vector<int> labels;
    Eigen::Index total = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const Matrix F = extract_features(train[i]);
        const LabeledImage relabeled = apply_scheme(train[i], scheme, scene_classes, seed, static_cast<int>(i));
        std::vector<Eigen::Index> rows(static_cast<std::size_t>(F.rows()));
        std::iota(rows.begin(), rows.end(), 0);
        if (cfg.pixels_per_image > 0 && cfg.pixels_per_image < F.rows()) {
            Rng rng(derive_seed(seed, "pixels", i));
            for (int k = 0; k < cfg.pixels_per_image; ++k) {
                const auto j = k + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(F.rows() - k)));
                std::swap(rows[static_cast<std::size_t>(k)], rows[static_cast<std::size_t>(j)]);
            }
            rows.resize(static_cast<std::size_t>(cfg.pixels_per_image));
        }
        Matrix part(static_cast<Eigen::Index>(rows.size()), d);
        for (std::size_t k = 0; k < rows.size(); ++k) {
            part.row(static_cast<Eigen::Index>(k)) = F.row(rows[k]);
            labels.push_back(relabeled.labels.labels[static_cast<std::size_t>(rows[k])]);
        }
        total += part.rows();
        parts.push_back(std::move(part));
    }
    Matrix pool(total, d);
    Eigen::Index at = 0;
    for (const Matrix& part : parts) {
        pool.middleRows(at, part.rows()) = part;
        at += part.rows();
    }
    parts.clear();

    if (warm) {
        seg.feature_mean = warm->source->feature_mean;
        seg.feature_scale = warm->source->feature_scale;
    } else {
        seg.feature_mean = pool.colwise().mean().transpose();
        seg.feature_scale = ((pool.rowwise() - seg.feature_mean.transpose()).array().square().colwise().mean())
                                .sqrt()
                                .transpose()
                                .matrix();
        for (auto& s : seg.feature_scale) s = s > 0.0 ? s : 1.0;
    }
    const Matrix X = standardize(pool, seg.feature_mean, seg.feature_scale);

    Vector theta = Vector::Zero(bl.count());
    if (warm) {
        copy_warm_start(*warm->source, bl, theta);
    } else if (!bl.linear) {
        Rng rng(derive_seed(seed, "init"));
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        for (int i = 0; i < bl.h * d; ++i) theta[i] = s * rng.normal();
    }

    Vector m1 = Vector::Zero(theta.size());
    Vector m2 = Vector::Zero(theta.size());
    Vector grad;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(X.rows()));
    Matrix batch(cfg.batch_size, d);
    std::vector<int> batch_labels;
    long step = 0;
    double previous_loss = 0.0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(seed, warm ? "finetune-shuffle" : "shuffle", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0.0;
        for (std::size_t start = 0, b = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++b) {
            const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
            if (batch.rows() != static_cast<Eigen::Index>(len)) batch.resize(static_cast<Eigen::Index>(len), d);
            batch_labels.resize(len);
            for (std::size_t k = 0; k < len; ++k) {
                batch.row(static_cast<Eigen::Index>(k)) = X.row(order[start + k]);
                batch_labels[k] = labels[static_cast<std::size_t>(order[start + k])];
            }
            const double loss = batch_gradient(bl, theta, batch, batch_labels, grad);
            if (!std::isfinite(loss) || !grad.allFinite()) {
                throw NumericalError("non-finite training loss under scheme " + scheme.name() + " at epoch " +
                                     std::to_string(epoch) + ", batch " + std::to_string(b) + " (learning rate " +
                                     format_real(lr) + ")");
            }
            epoch_loss += loss * static_cast<double>(len);
            ++step;
            m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad;
            m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            theta.array() -= lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + cfg.adam_eps);
        }
        epoch_loss /= static_cast<double>(order.size());
        seg.converged = epoch > 1 && std::abs(epoch_loss - previous_loss) <= cfg.converge_tol * previous_loss;
        previous_loss = epoch_loss;
        seg.loss = epoch_loss;
        seg.epochs = epoch;
        seg.theta = ParameterVector(theta);
        if (on_epoch) on_epoch(epoch, seg);
    }
    return seg;
}

namespace {

Matrix pixel_logits(const Segmenter& seg, const LabeledImage& img) {
    const Matrix F = extract_features(img);
    if (F.cols() != seg.model.feature_dim()) throw DimensionMismatch("segmenter feature dimension");
    return batch_logits(blocks_of(seg.model), seg.theta.values(), standardize(F, seg.feature_mean, seg.feature_scale));
}

}  // namespace

Matrix predict_probabilities(const Segmenter& seg, const LabeledImage& img) {
    Matrix P = pixel_logits(seg, img);
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
        P.row(i).array() -= P.row(i).maxCoeff();
        P.row(i) = P.row(i).array().exp().matrix();
        P.row(i) /= P.row(i).sum();
    }
    return P;
}

LabelGrid predict_labels(const Segmenter& seg, const LabeledImage& img) {
    const Matrix L = pixel_logits(seg, img);
    LabelGrid out(img.rows, img.cols);
    for (Eigen::Index i = 0; i < L.rows(); ++i) {
        int best = 0;
        for (int k = 1; k < L.cols(); ++k)
            if (L(i, k) > L(i, best)) best = k;
        out.labels[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

BinaryMask predict_mask(const Segmenter& seg, const LabeledImage& img, int target_class) {
    return BinaryMask::from_labels(predict_labels(seg, img), target_class);
}

void BenchConfig::validate() const {
    scene.validate();
    train.validate();
    if (train_scenes < 1 || test_scenes < 1) throw InvalidInput("bench config: need train and test scenes");
    if (schemes.empty()) throw InvalidInput("bench config: no schemes");
    if (seeds.empty()) throw InvalidInput("bench config: no seeds");
    for (const auto& s : schemes) s.class_count(scene.class_count());
    for (std::size_t i = 0; i < schemes.size(); ++i)
        for (std::size_t j = i + 1; j < schemes.size(); ++j)
            if (schemes[i].name() == schemes[j].name()) throw InvalidInput("bench config: duplicate scheme " + schemes[i].name());
}

const SchemeRun& BenchReport::run(const std::string& scheme, std::uint64_t seed) const {
    for (const auto& r : runs)
        if (r.scheme == scheme && r.seed == seed) return r;
    throw InvalidInput("no run for scheme " + scheme);
}

const SchemeSummary& BenchReport::summary(const std::string& scheme) const {
    for (const auto& s : summaries)
        if (s.scheme == scheme) return s;
    throw InvalidInput("no summary for scheme " + scheme);
}

const SchemeDelta& BenchReport::delta(const std::string& first, const std::string& second) const {
    for (const auto& d : deltas)
        if (d.first == first && d.second == second) return d;
    throw InvalidInput("no delta for " + first + " vs " + second);
}

double sign_test_p(int wins, int losses) {
    const int n = wins + losses;
    if (n == 0) return 1.0;
    double p = 0.0;
    double term = std::pow(0.5, n);  // C(n, 0) / 2^n
    for (int k = 0; k <= n; ++k) {
        if (k >= wins) p += term;
        term = term * (n - k) / (k + 1);
    }
    return std::min(1.0, p);
}

BenchReport run_benchmark(const BenchConfig& cfg, unsigned jobs) {
    cfg.validate();
    const std::size_t S = cfg.schemes.size();
    const std::size_t N = cfg.seeds.size();
    const int scene_classes = cfg.scene.class_count();
    BenchReport report;
    report.runs.resize(S * N);
    parallel_for(S * N, jobs, [&](std::size_t task) {
        const LabelScheme& scheme = cfg.schemes[task / N];
        const std::uint64_t seed = cfg.seeds[task % N];
        const Split scenes = make_scenes(cfg, seed);
        const Segmenter seg = train_segmenter(scenes.train, scheme, scene_classes, cfg.train, seed);
        const Evaluation e = evaluate_segmenter(seg, scenes.test, cfg.metrics);
        report.runs[task] = {scheme.name(), seed, e.dice, e.hd95, e.nsd, seg.epochs, cfg.train.batch_size,
                             cfg.train.learning_rate, seg.converged};
    });
    // Compute parity across every arm.
    for (const auto& r : report.runs) {
        if (r.epochs != report.runs.front().epochs || r.batch_size != report.runs.front().batch_size ||
            r.learning_rate != report.runs.front().learning_rate) {
            throw NumericalError("compute parity violated between " + r.scheme + " and " + report.runs.front().scheme);
        }
    }
    for (std::size_t s = 0; s < S; ++s) {
        std::vector<double> dice, hd, nsd;
        for (std::size_t k = 0; k < N; ++k) {
            const auto& r = report.runs[s * N + k];
            dice.push_back(r.mean_dice);
            hd.push_back(r.mean_hd95);
            nsd.push_back(r.mean_nsd);
        }
        report.summaries.push_back({cfg.schemes[s].name(), static_cast<int>(N), mean_of(dice), sd_of(dice),
                                    mean_of(hd), sd_of(hd), mean_of(nsd), sd_of(nsd)});
    }
    for (std::size_t a = 0; a < S; ++a) {
        for (std::size_t b = a + 1; b < S; ++b) {
            SchemeDelta d;
            d.first = cfg.schemes[a].name();
            d.second = cfg.schemes[b].name();
            for (std::size_t k = 0; k < N; ++k) {
                const auto& ra = report.runs[a * N + k];
                const auto& rb = report.runs[b * N + k];
                d.dice_delta += rb.mean_dice - ra.mean_dice;
                d.hd95_delta += rb.mean_hd95 - ra.mean_hd95;
                d.nsd_delta += rb.mean_nsd - ra.mean_nsd;
                if (rb.mean_dice > ra.mean_dice) ++d.wins;
                else if (rb.mean_dice < ra.mean_dice) ++d.losses;
                else ++d.ties;
            }
            d.dice_delta /= static_cast<double>(N);
            d.hd95_delta /= static_cast<double>(N);
            d.nsd_delta /= static_cast<double>(N);
            d.sign_test_p = sign_test_p(d.wins, d.losses);
            report.deltas.push_back(d);
        }
    }
    return report;
}

void write_runs_csv(std::ostream& out, const BenchReport& report) {
    out << "scheme,seed,mean_dice,mean_hd95,mean_nsd,epochs,converged\n";
    for (const auto& r : report.runs) {
        out << r.scheme << ',' << r.seed << ',' << format_real(r.mean_dice) << ',' << format_real(r.mean_hd95) << ','
            << format_real(r.mean_nsd) << ',' << r.epochs << ',' << (r.converged ? 1 : 0) << '\n';
    }
}

void write_summary_csv(std::ostream& out, const BenchReport& report) {
    out << "scheme,runs,dice_mean,dice_sd,hd95_mean,hd95_sd,nsd_mean,nsd_sd\n";
    for (const auto& s : report.summaries) {
        out << s.scheme << ',' << s.runs << ',' << format_real(s.dice_mean) << ',' << format_real(s.dice_sd) << ','
            << format_real(s.hd95_mean) << ',' << format_real(s.hd95_sd) << ',' << format_real(s.nsd_mean) << ','
            << format_real(s.nsd_sd) << '\n';
    }
}

void write_deltas_csv(std::ostream& out, const BenchReport& report) {
    out << "first,second,dice_delta,hd95_delta,nsd_delta,wins,losses,ties,sign_test_p\n";
    for (const auto& d : report.deltas) {
        out << d.first << ',' << d.second << ',' << format_real(d.dice_delta) << ',' << format_real(d.hd95_delta)
            << ',' << format_real(d.nsd_delta) << ',' << d.wins << ',' << d.losses << ',' << d.ties << ','
            << format_real(d.sign_test_p) << '\n';
    }
}

FineTuneReport run_finetune(const BenchConfig& cfg, const FineTuneConfig& ft, unsigned jobs) {
    cfg.validate();
    if (ft.checkpoints.empty()) throw InvalidInput("fine-tune needs at least one checkpoint");
    for (std::size_t i = 0; i < ft.checkpoints.size(); ++i) {
        if (ft.checkpoints[i] < 1 || (i > 0 && ft.checkpoints[i] <= ft.checkpoints[i - 1])) {
            throw InvalidInput("fine-tune checkpoints must be positive and increasing");
        }
    }
    const int scene_classes = cfg.scene.class_count();
    const std::size_t C = ft.checkpoints.size() + 1;
    const std::size_t N = cfg.seeds.size();
    FineTuneReport report;
    report.points.resize(N * C);
    parallel_for(N, jobs, [&](std::size_t k) {
        const std::uint64_t seed = cfg.seeds[k];
        const Split scenes = make_scenes(cfg, seed);
        const Segmenter base = train_segmenter(scenes.train, LabelScheme::binary(), scene_classes, cfg.train, seed);
        auto record = [&](std::size_t slot, int epoch, const Segmenter& seg) {
            const Evaluation e = evaluate_segmenter(seg, scenes.test, cfg.metrics);
            report.points[k * C + slot] = {seed, epoch, e.dice, e.hd95, e.nsd};
        };
        record(0, 0, base);
        TrainConfig tune = cfg.train;
        tune.epochs = ft.checkpoints.back();
        std::size_t next = 0;
        train_segmenter(scenes.train, ft.target, scene_classes, tune, seed, WarmStart{&base, ft.lr_scale},
                        [&](int epoch, const Segmenter& seg) {
                            if (next < ft.checkpoints.size() && epoch == ft.checkpoints[next]) {
                                record(next + 1, epoch, seg);
                                ++next;
                            }
                        });
    });
    report.epochs.push_back(0);
    report.epochs.insert(report.epochs.end(), ft.checkpoints.begin(), ft.checkpoints.end());
    for (std::size_t c = 0; c < C; ++c) {
        double sum = 0.0;
        for (std::size_t k = 0; k < N; ++k) sum += report.points[k * C + c].mean_dice;
        report.mean_dice.push_back(sum / static_cast<double>(N));
    }
    return report;
}

void write_finetune_csv(std::ostream& out, const FineTuneReport& report) {
    out << "seed,epoch,mean_dice,mean_hd95,mean_nsd\n";
    for (const auto& p : report.points) {
        out << p.seed << ',' << p.epoch << ',' << format_real(p.mean_dice) << ',' << format_real(p.mean_hd95) << ','
            << format_real(p.mean_nsd) << '\n';
    }
}

}  // namespace coarsegrain
