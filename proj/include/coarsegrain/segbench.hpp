#pragma once

// Synthetic lesion-segmentation benchmark: scenes with a lesion inside (or next to) a host
// organ, a false-positive-prone organ carrying lesion-like confusers, and extra organs. Pixel
// classifiers are trained under different labelings of the background and compared on the
// lesion class only.
//
// Class ids: 0 residual background, 1 lesion, 2 host organ, 3 false-positive-prone organ,
// 4.. extra organs. Auxiliary ids are 2.. in that order.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "coarsegrain/core.hpp"
#include "coarsegrain/metrics.hpp"

namespace coarsegrain {

enum class Placement { inside_organ, adjacent_to_organ };

struct SceneConfig {
    int rows = 96;
    int cols = 96;
    /// Organ semi-axes (pixels).
    double organ_major_min = 12.0;
    double organ_major_max = 20.0;
    double organ_minor_min = 10.0;
    double organ_minor_max = 16.0;
    int extra_organs = 1;
    int lesion_min = 1;
    int lesion_max = 2;
    double lesion_radius_min = 2.0;
    double lesion_radius_max = 4.5;
    Placement placement = Placement::inside_organ;
    /// Confusers sit inside the false-positive-prone organ and keep its label.
    int confuser_min = 1;
    int confuser_max = 2;
    /// Intensity mean of confuser pixels; the lesion mean makes them indistinguishable by intensity.
    double confuser_mean = 1.5;
    /// Per-class intensity mean and standard deviation, indexed by class id. Extra organs past
    /// the end of the lists reuse the last entry.
    std::vector<double> class_means{0.0, 1.5, 2.0, 1.0, 0.5};
    std::vector<double> class_sds{0.0, 0.0, 0.0, 0.0, 0.0};
    /// Standard deviation of i.i.d. pixel noise.
    double noise = 0.2;
    /// Attempts per structure before generation fails.
    int max_retries = 200;

    int class_count() const { return 4 + extra_organs; }
    /// Throws InvalidInput on inconsistent ranges.
    void validate() const;
    bool operator==(const SceneConfig&) const = default;
};

struct LabeledImage {
    int rows = 0;
    int cols = 0;
    /// Row-major.
    std::vector<double> intensities;
    LabelGrid labels;

    double intensity(int r, int c) const { return intensities[static_cast<std::size_t>(r) * cols + c]; }
    /// Largest label + 1.
    int class_count() const;
};

/// Deterministic in (cfg, seed). Throws GenerationError when a structure cannot be placed.
LabeledImage generate_scene(const SceneConfig& cfg, std::uint64_t seed);

/// Intensities: one row per line, space-separated, 17 significant digits. Labels: integer grid.
void write_scene(std::ostream& intensities, std::ostream& labels, const LabeledImage& img);
LabeledImage read_scene(std::istream& intensities, std::istream& labels);

inline constexpr int kFeatureDim = 7;

/// One row per pixel (row-major): intensity, 3x3 mean and variance, 7x7 mean and variance
/// (edge-clamped windows), row / (H - 1), col / (W - 1).
Matrix extract_features(const LabeledImage& img);

struct LabelScheme {
    enum class Kind { binary, backsplit, virtual_class, partial, aux_sweep };

    Kind kind = Kind::binary;
    /// partial: fraction of training images that keep their auxiliary labels.
    double fraction = 0.0;
    /// aux_sweep: number of auxiliary ids kept, in id order.
    int prefix = 0;
    /// Dilate or erode each auxiliary structure by one pixel, chosen by a seeded coin.
    bool boundary_noise = false;

    static LabelScheme binary() { return {}; }
    static LabelScheme backsplit() { return {Kind::backsplit}; }
    static LabelScheme virtual_class() { return {Kind::virtual_class}; }
    static LabelScheme partial(double fraction);
    static LabelScheme aux_sweep(int prefix);

    /// binary, backsplit, virtual, partial:<fraction>, aux:<k>.
    std::string name() const;
    static LabelScheme parse(const std::string& name);
    /// Output channels for scenes with `scene_classes` classes. partial(0) has the binary
    /// channels so that it trains exactly like the binary scheme.
    int class_count(int scene_classes) const;
    bool operator==(const LabelScheme&) const = default;
};

/// Relabels one training image. `image_index` keys the per-image draws of partial and
/// boundary_noise under `seed`. Throws InvalidInput on labels outside the scene's classes.
LabeledImage apply_scheme(const LabeledImage& img, const LabelScheme& scheme, int scene_classes,
                          std::uint64_t seed, int image_index);

struct TrainConfig {
    Architecture architecture = Architecture::linear;
    int hidden_width = 8;
    int epochs = 30;
    int batch_size = 256;
    double learning_rate = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Pixels drawn per training image; 0 uses every pixel.
    int pixels_per_image = 0;
    /// Relative change of the epoch loss below which training counts as converged.
    double converge_tol = 1e-3;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct Segmenter {
    SoftmaxModel model;
    ParameterVector theta;
    LabelScheme scheme;
    Vector feature_mean;
    Vector feature_scale;
    int epochs = 0;
    double loss = 0.0;
    bool converged = false;
};

struct WarmStart {
    const Segmenter* source = nullptr;
    double lr_scale = 0.1;
};

/// Called after every epoch with the 1-based epoch number.
using EpochCallback = std::function<void(int, const Segmenter&)>;

/// Mini-batch Adam on the pixel cross-entropy. All draws come from `seed` and never from the
/// scheme, so schemes that produce the same labels train identically. A warm start copies the
/// source's shared channels and feature scaling, zero-initializes new channels and scales
/// the learning rate. Throws NumericalError on a non-finite loss.
Segmenter train_segmenter(const std::vector<LabeledImage>& train, const LabelScheme& scheme, int scene_classes,
                          const TrainConfig& cfg, std::uint64_t seed, std::optional<WarmStart> warm = std::nullopt,
                          const EpochCallback& on_epoch = {});

/// Softmax class probabilities, one row per pixel in row-major order.
Matrix predict_probabilities(const Segmenter& seg, const LabeledImage& img);

/// Per-pixel argmax, ties to the lowest class id.
LabelGrid predict_labels(const Segmenter& seg, const LabeledImage& img);
BinaryMask predict_mask(const Segmenter& seg, const LabeledImage& img, int target_class = 1);

struct BenchConfig {
    SceneConfig scene;
    int train_scenes = 40;
    int test_scenes = 20;
    std::vector<LabelScheme> schemes{LabelScheme::binary(), LabelScheme::backsplit()};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    TrainConfig train;
    MetricOptions metrics;

    void validate() const;
};

struct SchemeRun {
    std::string scheme;
    std::uint64_t seed = 0;
    double mean_dice = 0.0;
    double mean_hd95 = 0.0;
    double mean_nsd = 0.0;
    int epochs = 0;
    int batch_size = 0;
    double learning_rate = 0.0;
    bool converged = false;
};

struct SchemeSummary {
    std::string scheme;
    int runs = 0;
    double dice_mean = 0.0, dice_sd = 0.0;
    double hd95_mean = 0.0, hd95_sd = 0.0;
    double nsd_mean = 0.0, nsd_sd = 0.0;
};

/// Paired over seeds, second scheme minus first.
struct SchemeDelta {
    std::string first;
    std::string second;
    double dice_delta = 0.0;
    double hd95_delta = 0.0;
    double nsd_delta = 0.0;
    /// Seeds where the second scheme has the higher Dice.
    int wins = 0;
    int losses = 0;
    int ties = 0;
    /// One-sided sign test of wins against losses.
    double sign_test_p = 1.0;
};

struct BenchReport {
    std::vector<SchemeRun> runs;
    std::vector<SchemeSummary> summaries;
    std::vector<SchemeDelta> deltas;

    const SchemeRun& run(const std::string& scheme, std::uint64_t seed) const;
    const SchemeSummary& summary(const std::string& scheme) const;
    const SchemeDelta& delta(const std::string& first, const std::string& second) const;
};

/// P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
double sign_test_p(int wins, int losses);

/// Scenes of seed s: generate_scene(cfg.scene, derive_seed(s, "scene", i)), the first
/// train_scenes for training. Runs are ordered scheme-major and identical for any `jobs`.
BenchReport run_benchmark(const BenchConfig& cfg, unsigned jobs = 1);

void write_runs_csv(std::ostream& out, const BenchReport& report);
void write_summary_csv(std::ostream& out, const BenchReport& report);
void write_deltas_csv(std::ostream& out, const BenchReport& report);

struct FineTuneConfig {
    std::vector<int> checkpoints{50, 100, 150, 200, 250};
    double lr_scale = 0.1;
    LabelScheme target = LabelScheme::backsplit();
    bool operator==(const FineTuneConfig&) const = default;
};

struct FineTunePoint {
    std::uint64_t seed = 0;
    /// 0 is the binary starting point.
    int epoch = 0;
    double mean_dice = 0.0;
    double mean_hd95 = 0.0;
    double mean_nsd = 0.0;
};

struct FineTuneReport {
    std::vector<FineTunePoint> points;
    /// Mean over seeds per checkpoint, epoch 0 first.
    std::vector<int> epochs;
    std::vector<double> mean_dice;
};

/// Trains the binary scheme with cfg.train per seed, then continues under `ft.target` from that
/// checkpoint, evaluating the test scenes at every checkpoint epoch.
FineTuneReport run_finetune(const BenchConfig& cfg, const FineTuneConfig& ft, unsigned jobs = 1);

void write_finetune_csv(std::ostream& out, const FineTuneReport& report);

}  // namespace coarsegrain
