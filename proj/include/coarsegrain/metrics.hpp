#pragma once

// Segmentation metrics: Dice, HD-95 and NSD on 2-D binary masks.
//
// Conventions:
//   - surface = foreground pixels with at least one background 4-neighbour; pixels outside
//     the image count as background
//   - HD-95 and NSD pool the nearest-surface distances of both directions into one list
//   - HD-95 takes the 95th percentile of that list with linear interpolation
//   - if either surface is empty HD-95 is the image diagonal, flagged
//   - NSD tolerance defaults to 1.0 physical unit

#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

namespace coarsegrain {

/// Physical size of one pixel along rows and columns.
struct Spacing {
    double row = 1.0;
    double col = 1.0;
    bool operator==(const Spacing&) const = default;
};

/// Integer label map, row-major.
struct LabelGrid {
    int rows = 0;
    int cols = 0;
    std::vector<int> labels;

    LabelGrid() = default;
    LabelGrid(int rows, int cols, int fill = 0);
    int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * cols + c]; }
    int& at(int r, int c) { return labels[static_cast<std::size_t>(r) * cols + c]; }
    bool operator==(const LabelGrid&) const = default;
};

/// Whitespace-separated integers, one image row per line. Throws IoError on ragged rows or
/// non-integer tokens.
LabelGrid read_label_grid(std::istream& in);
void write_label_grid(std::ostream& out, const LabelGrid& grid);

class BinaryMask {
public:
    BinaryMask(int rows, int cols, Spacing spacing = {});
    BinaryMask(int rows, int cols, std::vector<std::uint8_t> pixels, Spacing spacing = {});
    /// True where the label equals `target`.
    static BinaryMask from_labels(const LabelGrid& grid, int target, Spacing spacing = {});

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    const Spacing& spacing() const { return spacing_; }
    bool at(int r, int c) const { return pixels_[static_cast<std::size_t>(r) * cols_ + c] != 0; }
    void set(int r, int c, bool value) { pixels_[static_cast<std::size_t>(r) * cols_ + c] = value ? 1 : 0; }
    const std::vector<std::uint8_t>& pixels() const { return pixels_; }
    int count() const;
    bool empty() const { return count() == 0; }
    /// sqrt((rows * spacing.row)^2 + (cols * spacing.col)^2).
    double diagonal() const;

    bool operator==(const BinaryMask&) const = default;

private:
    int rows_;
    int cols_;
    Spacing spacing_;
    std::vector<std::uint8_t> pixels_;
};

struct SurfacePointSet {
    /// (row, col) pixel indices in row-major order.
    std::vector<std::pair<int, int>> pixels;
    Spacing spacing;

    std::size_t size() const { return pixels.size(); }
    bool empty() const { return pixels.empty(); }
    /// Physical coordinates of point i.
    std::pair<double, double> point(std::size_t i) const;
};

SurfacePointSet surface_points(const BinaryMask& mask);

/// How nearest-surface distances are found. `automatic` uses all pairs below 64x64 pixels
/// and an exact Euclidean distance transform otherwise.
enum class DistanceMethod { automatic, brute_force, distance_transform };

/// Squared physical distance between pixel offsets, written once so every path rounds alike.
inline double squared_distance(int dr, int dc, const Spacing& s) {
    const double a = static_cast<double>(dr) * s.row;
    const double b = static_cast<double>(dc) * s.col;
    return a * a + b * b;
}

/// Distances from every surface point of `from` to the nearest surface point of `to`, in the
/// order of surface_points(from). Empty when either surface is empty.
std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to,
                                               DistanceMethod method = DistanceMethod::automatic);

/// Both directed lists concatenated (pred to gt first).
std::vector<double> pooled_surface_distances(const BinaryMask& pred, const BinaryMask& gt,
                                             DistanceMethod method = DistanceMethod::automatic);

/// Linear interpolation between order statistics at position prob * (n - 1).
double percentile(std::vector<double> values, double prob);

double dice(const BinaryMask& pred, const BinaryMask& gt);
double hd95(const BinaryMask& pred, const BinaryMask& gt, DistanceMethod method = DistanceMethod::automatic);
double nsd(const BinaryMask& pred, const BinaryMask& gt, double tolerance = 1.0,
           DistanceMethod method = DistanceMethod::automatic);

struct MetricOptions {
    double tolerance = 1.0;
    DistanceMethod method = DistanceMethod::automatic;
    bool operator==(const MetricOptions&) const = default;
};

struct MetricsResult {
    double dice = 0.0;
    double hd95 = 0.0;
    double nsd = 0.0;
    bool empty_pred = false;
    bool empty_gt = false;
    bool degenerate() const { return empty_pred || empty_gt; }
};

/// All three metrics from one pass over the surfaces.
MetricsResult evaluate_masks(const BinaryMask& pred, const BinaryMask& gt, const MetricOptions& options = {});

}  // namespace coarsegrain
