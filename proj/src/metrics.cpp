#include "coarsegrain/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "coarsegrain/error.hpp"

namespace coarsegrain {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr long kBruteForceLimit = 64L * 64L;

void check_same_frame(const BinaryMask& a, const BinaryMask& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionMismatch("masks are " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " and " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    if (!(a.spacing() == b.spacing())) throw DimensionMismatch("masks have different pixel spacing");
}

/// Nearest squared distance from each query pixel to any target pixel, all pairs.
std::vector<double> nearest_brute_force(const SurfacePointSet& from, const SurfacePointSet& to,
                                        const Spacing& s) {
    std::vector<double> out(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
        double best = kInf;
        for (const auto& [r, c] : to.pixels) {
            best = std::min(best, squared_distance(from.pixels[i].first - r, from.pixels[i].second - c, s));
        }
        out[i] = best;
    }
    return out;
}

/// Exact squared Euclidean distance transform of the target pixels (Felzenszwalb-Huttenlocher),
/// sampled at the query pixels.
std::vector<double> nearest_distance_transform(const SurfacePointSet& from, const SurfacePointSet& to, int rows,
                                               int cols, const Spacing& s) {
    // Column pass: offset to the nearest target row in the same column.
    std::vector<std::uint8_t> feature(static_cast<std::size_t>(rows) * cols, 0);
    for (const auto& [r, c] : to.pixels) feature[static_cast<std::size_t>(r) * cols + c] = 1;
    std::vector<double> f(static_cast<std::size_t>(rows) * cols, kInf);
    std::vector<int> offset(rows);
    for (int c = 0; c < cols; ++c) {
        int last = -1;
        for (int r = 0; r < rows; ++r) {
            if (feature[static_cast<std::size_t>(r) * cols + c]) last = r;
            offset[r] = last < 0 ? std::numeric_limits<int>::max() : r - last;
        }
        last = -1;
        for (int r = rows - 1; r >= 0; --r) {
            if (feature[static_cast<std::size_t>(r) * cols + c]) last = r;
            if (last >= 0) offset[r] = std::min(offset[r], last - r);
            if (offset[r] != std::numeric_limits<int>::max()) {
                f[static_cast<std::size_t>(r) * cols + c] = squared_distance(offset[r], 0, s);
            }
        }
    }

    // Row pass: lower envelope of parabolas f(q) + ((c - q) * spacing.col)^2.
    std::vector<double> d(f.size(), kInf);
    std::vector<int> v(cols);
    std::vector<double> z(cols + 1);
    const double w2 = s.col * s.col;
    for (int r = 0; r < rows; ++r) {
        const double* fr = &f[static_cast<std::size_t>(r) * cols];
        int k = -1;
        for (int q = 0; q < cols; ++q) {
            if (fr[q] == kInf) continue;
            while (k >= 0) {
                const double sq = ((fr[q] + w2 * q * q) - (fr[v[k]] + w2 * v[k] * v[k])) / (2.0 * w2 * (q - v[k]));
                if (sq > z[k]) {
                    ++k;
                    v[k] = q;
                    z[k] = sq;
                    z[k + 1] = kInf;
                    break;
                }
                --k;
            }
            if (k < 0) {
                k = 0;
                v[0] = q;
                z[0] = -kInf;
                z[1] = kInf;
            }
        }
        if (k < 0) continue;
        const int last = k;
        k = 0;
        double* dr = &d[static_cast<std::size_t>(r) * cols];
        for (int c = 0; c < cols; ++c) {
            while (k < last && z[k + 1] < c) ++k;
            // Neighbouring parabolas guard against round-off in the breakpoints.
            double best = kInf;
            for (int j = std::max(0, k - 1); j <= std::min(last, k + 1); ++j) {
                best = std::min(best, fr[v[j]] + squared_distance(0, c - v[j], s));
            }
            dr[c] = best;
        }
    }

    std::vector<double> out(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
        out[i] = d[static_cast<std::size_t>(from.pixels[i].first) * cols + from.pixels[i].second];
    }
    return out;
}

std::vector<double> directed(const SurfacePointSet& from, const SurfacePointSet& to, int rows, int cols,
                             const Spacing& s, DistanceMethod method) {
    if (from.empty() || to.empty()) return {};
    if (method == DistanceMethod::automatic) {
        method = static_cast<long>(rows) * cols < kBruteForceLimit ? DistanceMethod::brute_force
                                                                    : DistanceMethod::distance_transform;
    }
    std::vector<double> sq = method == DistanceMethod::brute_force
                                 ? nearest_brute_force(from, to, s)
                                 : nearest_distance_transform(from, to, rows, cols, s);
    for (double& v : sq) v = std::sqrt(v);
    return sq;
}

int overlap(const BinaryMask& a, const BinaryMask& b) {
    int both = 0;
    for (std::size_t i = 0; i < a.pixels().size(); ++i) both += (a.pixels()[i] && b.pixels()[i]) ? 1 : 0;
    return both;
}

double dice_from_counts(int both, int na, int nb) {
    if (na + nb == 0) return 1.0;
    return 2.0 * both / static_cast<double>(na + nb);
}

double nsd_from_distances(const std::vector<double>& pooled, double tolerance) {
    std::size_t within = 0;
    for (double v : pooled) within += v <= tolerance ? 1 : 0;
    return static_cast<double>(within) / static_cast<double>(pooled.size());
}

void check_tolerance(double tolerance) {
    if (!(tolerance >= 0.0) || !std::isfinite(tolerance)) throw InvalidInput("NSD tolerance must be >= 0");
}

}  // namespace

LabelGrid::LabelGrid(int r, int c, int fill) : rows(r), cols(c), labels(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw InvalidInput("grid dimensions must be non-negative");
}

LabelGrid read_label_grid(std::istream& in) {
    LabelGrid grid;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream row(line);
        std::vector<int> values;
        std::string token;
        while (row >> token) {
            std::size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(token, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != token.size()) {
                throw IoError("line " + std::to_string(line_no) + ": '" + token + "' is not an integer label");
            }
            values.push_back(v);
        }
        if (values.empty()) continue;
        if (grid.rows == 0) {
            grid.cols = static_cast<int>(values.size());
        } else if (static_cast<int>(values.size()) != grid.cols) {
            throw IoError("line " + std::to_string(line_no) + ": expected " + std::to_string(grid.cols) +
                          " labels, found " + std::to_string(values.size()));
        }
        grid.labels.insert(grid.labels.end(), values.begin(), values.end());
        ++grid.rows;
    }
    if (grid.rows == 0) throw IoError("label grid is empty");
    return grid;
}

void write_label_grid(std::ostream& out, const LabelGrid& grid) {
    for (int r = 0; r < grid.rows; ++r) {
        for (int c = 0; c < grid.cols; ++c) {
            if (c > 0) out << ' ';
            out << grid.at(r, c);
        }
        out << '\n';
    }
}

BinaryMask::BinaryMask(int rows, int cols, Spacing spacing)
    : BinaryMask(rows, cols, std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(rows, 0)) *
                                                       static_cast<std::size_t>(std::max(cols, 0))),
                 spacing) {}

BinaryMask::BinaryMask(int rows, int cols, std::vector<std::uint8_t> pixels, Spacing spacing)
    : rows_(rows), cols_(cols), spacing_(spacing), pixels_(std::move(pixels)) {
    if (rows < 1 || cols < 1) throw InvalidInput("mask needs at least one pixel");
    if (pixels_.size() != static_cast<std::size_t>(rows) * cols) throw DimensionMismatch("mask pixel count");
    if (!(spacing.row > 0.0) || !(spacing.col > 0.0) || !std::isfinite(spacing.row) || !std::isfinite(spacing.col)) {
        throw InvalidInput("pixel spacing must be positive");
    }
    for (auto& p : pixels_) p = p ? 1 : 0;
}

BinaryMask BinaryMask::from_labels(const LabelGrid& grid, int target, Spacing spacing) {
    std::vector<std::uint8_t> pixels(grid.labels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = grid.labels[i] == target ? 1 : 0;
    return BinaryMask(grid.rows, grid.cols, std::move(pixels), spacing);
}

int BinaryMask::count() const {
    return static_cast<int>(std::count(pixels_.begin(), pixels_.end(), std::uint8_t{1}));
}

double BinaryMask::diagonal() const { return std::sqrt(squared_distance(rows_, cols_, spacing_)); }

std::pair<double, double> SurfacePointSet::point(std::size_t i) const {
    return {pixels[i].first * spacing.row, pixels[i].second * spacing.col};
}

SurfacePointSet surface_points(const BinaryMask& mask) {
    SurfacePointSet out;
    out.spacing = mask.spacing();
    const int H = mask.rows();
    const int W = mask.cols();
    auto background = [&](int r, int c) { return r < 0 || r >= H || c < 0 || c >= W || !mask.at(r, c); };
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            if (!mask.at(r, c)) continue;
            if (background(r - 1, c) || background(r + 1, c) || background(r, c - 1) || background(r, c + 1)) {
                out.pixels.emplace_back(r, c);
            }
        }
    }
    return out;
}

std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to,
                                               DistanceMethod method) {
    check_same_frame(from, to);
    return directed(surface_points(from), surface_points(to), from.rows(), from.cols(), from.spacing(), method);
}

std::vector<double> pooled_surface_distances(const BinaryMask& pred, const BinaryMask& gt, DistanceMethod method) {
    check_same_frame(pred, gt);
    const SurfacePointSet sp = surface_points(pred);
    const SurfacePointSet sg = surface_points(gt);
    std::vector<double> pooled = directed(sp, sg, pred.rows(), pred.cols(), pred.spacing(), method);
    const std::vector<double> back = directed(sg, sp, pred.rows(), pred.cols(), pred.spacing(), method);
    pooled.insert(pooled.end(), back.begin(), back.end());
    return pooled;
}

double percentile(std::vector<double> values, double prob) {
    if (values.empty()) throw InvalidInput("percentile of an empty list");
    std::sort(values.begin(), values.end());
    const double pos = prob * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

double dice(const BinaryMask& pred, const BinaryMask& gt) {
    check_same_frame(pred, gt);
    return dice_from_counts(overlap(pred, gt), pred.count(), gt.count());
}

double hd95(const BinaryMask& pred, const BinaryMask& gt, DistanceMethod method) {
    const std::vector<double> pooled = pooled_surface_distances(pred, gt, method);
    if (pooled.empty()) return pred.diagonal();
    return percentile(pooled, 0.95);
}

double nsd(const BinaryMask& pred, const BinaryMask& gt, double tolerance, DistanceMethod method) {
    check_tolerance(tolerance);
    const std::vector<double> pooled = pooled_surface_distances(pred, gt, method);
    if (pooled.empty()) return pred.empty() && gt.empty() ? 1.0 : 0.0;
    return nsd_from_distances(pooled, tolerance);
}

MetricsResult evaluate_masks(const BinaryMask& pred, const BinaryMask& gt, const MetricOptions& options) {
    check_tolerance(options.tolerance);
    check_same_frame(pred, gt);
    MetricsResult out;
    const int np = pred.count();
    const int ng = gt.count();
    out.empty_pred = np == 0;
    out.empty_gt = ng == 0;
    out.dice = dice_from_counts(overlap(pred, gt), np, ng);
    const std::vector<double> pooled = pooled_surface_distances(pred, gt, options.method);
    if (pooled.empty()) {
        out.hd95 = pred.diagonal();
        out.nsd = out.empty_pred && out.empty_gt ? 1.0 : 0.0;
    } else {
        out.hd95 = percentile(pooled, 0.95);
        out.nsd = nsd_from_distances(pooled, options.tolerance);
    }
    return out;
}

}  // namespace coarsegrain
