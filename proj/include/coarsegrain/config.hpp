#pragma once

// Experiment configs: one `key = value` per line, dotted section prefixes, `#` comments.
//
//   kind = segbench
//   seed = 7
//   segbench.seeds = 10
//   train.epochs = 30
//
// Every key has a default; only `kind` is required. Unknown keys, duplicate keys and
// malformed values raise ConfigError carrying the line number.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "coarsegrain/estimation.hpp"
#include "coarsegrain/metrics.hpp"
#include "coarsegrain/segbench.hpp"

namespace coarsegrain {

enum class ExperimentKind { verify_identities, mle_study, segbench, metrics_eval, sweep };

/// What a sweep varies. aux_fraction and aux_count run the benchmark over partial and
/// aux-sweep schemes, n repeats the MLE study per sample size, epochs runs the fine-tune
/// with the values as checkpoints.
enum class SweepAxis { aux_fraction, aux_count, n, epochs };

std::string to_string(ExperimentKind kind);
std::string to_string(SweepAxis axis);

struct VerifySettings {
    /// Random instances for the projection, decomposition and closed-form checks.
    int instances = 200;
    /// Instances for the finite-difference Hessian check.
    int hessian_instances = 20;
    /// Configurations for the delta-method ordering check.
    int delta_configs = 100;
    /// Inputs averaged into each expected Fisher matrix of the ordering check.
    int fisher_inputs = 400;
    double fd_step = 1e-4;

    bool operator==(const VerifySettings&) const = default;
};

struct MLESettings {
    int classes = 4;
    int target = 0;
    int n = 4000;
    int trials = 300;
    FitConfig fit;
    int fisher_sample = 100000;
    int bootstrap_resamples = 10000;
    double confidence = 0.95;

    bool operator==(const MLESettings&) const = default;
};

struct SegbenchSettings {
    int train_scenes = 40;
    int test_scenes = 20;
    std::vector<LabelScheme> schemes{LabelScheme::binary(), LabelScheme::backsplit()};
    /// Number of benchmark seeds; seed i is derive_seed(master, "segbench", i).
    int seeds = 10;
    /// Also run the fine-tune after the benchmark.
    bool finetune = false;

    bool operator==(const SegbenchSettings&) const = default;
};

struct FineTuneSettings {
    FineTuneConfig config;
    /// Seed i is derive_seed(master, "finetune", i).
    int seeds = 5;

    bool operator==(const FineTuneSettings&) const = default;
};

struct MetricsEvalSettings {
    std::string pred;
    std::string gt;
    int target_class = 1;
    Spacing spacing;

    bool operator==(const MetricsEvalSettings&) const = default;
};

struct SweepSettings {
    SweepAxis axis = SweepAxis::aux_fraction;
    std::vector<double> values{0.0, 0.25, 0.5, 0.75, 1.0};

    bool operator==(const SweepSettings&) const = default;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::verify_identities;
    std::uint64_t seed = 0;
    std::string out = "results";
    VerifySettings verify;
    MLESettings mle;
    SceneConfig scene;
    TrainConfig train;
    SegbenchSettings segbench;
    FineTuneSettings finetune;
    MetricOptions metrics;
    MetricsEvalSettings metrics_eval;
    SweepSettings sweep;

    bool operator==(const ExperimentConfig&) const = default;
};

ExperimentConfig parse_config(std::string_view text);
/// Every key, in a fixed order, with 17 significant digits for reals.
std::string serialize_config(const ExperimentConfig& cfg);
/// Throws IoError if the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);

/// A fully-defaulted config of the given kind.
ExperimentConfig default_config(ExperimentKind kind);

/// derive_seed(master, stream, i) for i < count.
std::vector<std::uint64_t> resolve_seeds(std::uint64_t master, std::string_view stream, int count);

/// The benchmark described by cfg with resolved seeds.
BenchConfig bench_config(const ExperimentConfig& cfg);
/// The fine-tune benchmark: bench_config with the fine-tune seeds.
BenchConfig finetune_bench_config(const ExperimentConfig& cfg);

}  // namespace coarsegrain
