#pragma once

// Experiment runner: the identity verification suite, report files and the run manifest.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "coarsegrain/config.hpp"

namespace coarsegrain {

inline constexpr const char* kArtifactVersion = "1.0.0";

// ---- identity suite --------------------------------------------------------

enum class Comparison { at_most, at_least };

/// One row of the verification table: `value` compared against `threshold`.
struct CheckResult {
    std::string check;
    int instances = 0;
    double value = 0.0;
    Comparison comparison = Comparison::at_most;
    double threshold = 0.0;
    bool passed = false;
};

struct IdentityCheck {
    std::string name;
    std::function<CheckResult(const VerifySettings&, std::uint64_t seed, unsigned jobs)> run;
};

/// Every check of the suite, in report order. Instance i of check `name` draws from
/// derive_seed(seed, name, i), so checks are independent of each other and of `jobs`.
const std::vector<IdentityCheck>& identity_checks();

std::vector<CheckResult> run_identity_suite(const VerifySettings& settings, std::uint64_t seed, unsigned jobs = 1);

/// check,instances,value,comparison,threshold,status
void write_checks_csv(std::ostream& out, const std::vector<CheckResult>& results);

// ---- plot data -------------------------------------------------------------

struct PlotSeries {
    /// epochs, aux_fraction, aux_count or n.
    std::string x_name;
    std::string y_name;
    std::vector<double> x;
    std::vector<double> y;
};

/// Two-column CSV with an `x_name,y_name` header. Throws IoError.
void emit_plot_data(const PlotSeries& series, const std::filesystem::path& path);
void write_plot_csv(std::ostream& out, const PlotSeries& series);

// ---- runs ------------------------------------------------------------------

/// Plain-text `key = value` record of a run. Contains no timestamps, output paths or worker
/// counts, so identical runs produce identical manifests.
struct RunManifest {
    std::string status = "running";
    ExperimentConfig config;
    /// stream name and seeds, e.g. {"segbench", {...}}.
    std::vector<std::pair<std::string, std::vector<std::uint64_t>>> seeds;
    /// File name (relative to the output directory), CRC-32 and size.
    struct FileRecord {
        std::string name;
        std::uint32_t crc32 = 0;
        std::uintmax_t size = 0;
    };
    std::vector<FileRecord> files;
    std::string error;

    std::string to_text() const;
};

std::uint32_t file_crc32(const std::filesystem::path& path);

struct RunResult {
    /// 0 when every assertion of the run held.
    int exit_code = 0;
    std::vector<std::string> files;
    /// One line per notable outcome, for the CLI to print.
    std::vector<std::string> messages;
    /// metrics-eval only: dice,hd95,nsd,flags.
    std::string metrics_row;
};

struct MleOutcome {
    EfficiencyReport report;
    MLEStudy multiclass;
    MLEStudy binary;
};

/// Both arms of the MLE study at sample size n on the default design for cfg.mle, with trial
/// seeds from derive_seed(cfg.seed, "mle") and the bootstrap from "mle-report".
MleOutcome run_mle_study(const ExperimentConfig& cfg, int n, unsigned jobs = 1);

/// Reads the metrics.pred and metrics.gt label grids and returns dice,hd95,nsd,flags.
std::string evaluate_label_files(const ExperimentConfig& cfg);

/// Runs the experiment and writes its CSVs plus manifest.txt into cfg.out. The manifest is
/// written first with status running, then rewritten with checksums. Throws IoError when the
/// output directory cannot be written, before anything is created in it.
RunResult run_experiment(const ExperimentConfig& cfg, unsigned jobs = 1);

}  // namespace coarsegrain
