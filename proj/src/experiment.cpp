#include "coarsegrain/experiment.hpp"

#include <boost/crc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "coarsegrain/error.hpp"
#include "coarsegrain/estimation.hpp"
#include "coarsegrain/format.hpp"
#include "coarsegrain/information.hpp"
#include "coarsegrain/oracles.hpp"
#include "coarsegrain/parallel.hpp"
#include "coarsegrain/rng.hpp"

namespace coarsegrain {

namespace {

namespace fs = std::filesystem;

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

// Evaluates per_instance(i, rng) for every instance and keeps the worst value.
template <class F>
CheckResult reduce_check(const std::string& name, int count, unsigned jobs, std::uint64_t seed, Comparison cmp,
                         double threshold, F per_instance) {
    std::vector<double> values(static_cast<std::size_t>(count));
    parallel_for(values.size(), jobs, [&](std::size_t i) {
        Rng rng(derive_seed(seed, name, i));
        values[i] = per_instance(static_cast<int>(i), rng);
    });
    CheckResult r{name, count, 0.0, cmp, threshold, false};
    if (values.empty()) return r;
    r.value = cmp == Comparison::at_most ? *std::max_element(values.begin(), values.end())
                                         : *std::min_element(values.begin(), values.end());
    r.passed = cmp == Comparison::at_most ? r.value <= threshold : r.value >= threshold;
    return r;
}

Architecture alternate(int i) { return i % 2 == 0 ? Architecture::linear : Architecture::hidden_layer; }

// A random linear delta-method configuration with a full-rank parameterization.
struct DeltaConfig {
    int active = 0;
    double var_y = 0.0;
    double var_z = 0.0;
};

DeltaConfig delta_config(Rng& rng, int fisher_inputs) {
    const int K = 2 + static_cast<int>(rng.below(5));
    const int d = 1 + static_cast<int>(rng.below(3));
    const SoftmaxModel model = SoftmaxModel::linear(d, K, Parameterization::reference_last);
    Vector theta(model.parameter_count());
    for (auto& v : theta) v = rng.normal();
    Vector probe(d);
    for (auto& v : probe) v = rng.normal();
    const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
    Matrix X(fisher_inputs, d);
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = rng.normal();
    const ParameterVector t(theta);
    const auto eta = predict(model, t, probe);
    DeltaConfig out;
    for (int k = 0; k < K; ++k)
        if (k != c && eta[k] >= 1e-6) ++out.active;
    const auto fy = expected_fisher(model, t, X, LikelihoodMode::multiclass());
    const auto fz = expected_fisher(model, t, X, LikelihoodMode::binary_target(c));
    out.var_y = delta_variance(model, t, fy, probe, c).variance;
    out.var_z = delta_variance(model, t, fz, probe, c).variance;
    return out;
}

std::vector<IdentityCheck> build_checks() {
    std::vector<IdentityCheck> checks;
    auto add = [&](std::string name, auto fn) { checks.push_back({std::move(name), fn}); };

    add("score_projection", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("score_projection", s.instances, jobs, seed, Comparison::at_most, 1e-12, [](int i, Rng& rng) {
            const auto inst = oracles::random_instance(rng, alternate(i));
            const auto map = CoarseningMap::target_vs_rest(inst.model.class_count(), inst.target);
            double worst = 0.0;
            for (int z : {0, 1}) {
                worst = std::max(worst, max_abs(project_score(inst.model, inst.theta, inst.x, z, map) -
                                                score_binary(inst.model, inst.theta, inst.x, z, inst.target)));
            }
            return worst;
        });
    });
    add("score_zero_mean", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("score_zero_mean", s.instances, jobs, seed, Comparison::at_most, 1e-12, [](int i, Rng& rng) {
            const auto inst = oracles::random_instance(rng, alternate(i));
            const Matrix J = logit_jacobian(inst.model, inst.theta, inst.x);
            const auto eta = predict(inst.model, inst.theta, inst.x);
            Vector sy = Vector::Zero(J.cols());
            for (int y = 0; y < eta.class_count(); ++y) sy += eta[y] * score_multiclass(J, eta, y);
            const double q = eta.target(inst.target);
            const Vector sz = q * score_binary(J, eta, 1, inst.target) +
                              eta.non_target_mass(inst.target) * score_binary(J, eta, 0, inst.target);
            return std::max(max_abs(sy), max_abs(sz));
        });
    });
    add("decomposition", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("decomposition", s.instances, jobs, seed, Comparison::at_most, 1e-12, [](int i, Rng& rng) {
            const auto inst = oracles::random_instance(rng, alternate(i));
            const auto map = CoarseningMap::target_vs_rest(inst.model.class_count(), inst.target);
            const auto multi = fisher_multiclass(inst.model, inst.theta, inst.x);
            const auto binary = fisher_binary(inst.model, inst.theta, inst.x, inst.target);
            const auto missing = missing_information(inst.model, inst.theta, inst.x, map);
            return max_abs(multi.entries() - binary.entries() - missing.entries());
        });
    });
    add("loewner_order", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("loewner_order", s.instances, jobs, seed, Comparison::at_most, 1e-8, [](int i, Rng& rng) {
            const auto inst = oracles::random_instance(rng, alternate(i));
            const auto multi = fisher_multiclass(inst.model, inst.theta, inst.x);
            const auto binary = fisher_binary(inst.model, inst.theta, inst.x, inst.target);
            // Violation size: how far lambda_min(I_Y - I_Z) falls below zero.
            return std::max(0.0, -loewner_ge(multi, binary, 1e-8).min_eigenvalue);
        });
    });
    add("missing_information_psd", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("missing_information_psd", s.instances, jobs, seed, Comparison::at_most, 1e-8,
                            [](int i, Rng& rng) {
                                const auto inst = oracles::random_instance(rng, alternate(i));
                                const auto map = CoarseningMap::target_vs_rest(inst.model.class_count(), inst.target);
                                return std::max(
                                    0.0, -missing_information(inst.model, inst.theta, inst.x, map).min_eigenvalue());
                            });
    });
    add("closed_form_multiclass", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("closed_form_multiclass", s.instances, jobs, seed, Comparison::at_most, 1e-12,
                            [](int i, Rng& rng) {
                                const auto inst = oracles::random_instance(rng, alternate(i));
                                return max_abs(fisher_multiclass(inst.model, inst.theta, inst.x).entries() -
                                               oracle_fisher(inst.model, inst.theta, inst.x, FisherMode::multiclass())
                                                   .entries());
                            });
    });
    add("closed_form_binary", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("closed_form_binary", s.instances, jobs, seed, Comparison::at_most, 1e-12,
                            [](int i, Rng& rng) {
                                const auto inst = oracles::random_instance(rng, alternate(i));
                                const auto map = CoarseningMap::target_vs_rest(inst.model.class_count(), inst.target);
                                return max_abs(fisher_binary(inst.model, inst.theta, inst.x, inst.target).entries() -
                                               oracle_fisher(inst.model, inst.theta, inst.x, FisherMode::coarsened(map))
                                                   .entries());
                            });
    });
    add("gap_closed_form", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("gap_closed_form", s.instances, jobs, seed, Comparison::at_most, 1e-12, [](int i, Rng& rng) {
            const auto inst = oracles::random_instance(rng, alternate(i));
            const auto map = CoarseningMap::target_vs_rest(inst.model.class_count(), inst.target);
            const Matrix gap = fisher_gap(inst.model, inst.theta, inst.x, inst.target).entries();
            const Matrix diff = fisher_multiclass(inst.model, inst.theta, inst.x).entries() -
                                fisher_binary(inst.model, inst.theta, inst.x, inst.target).entries();
            const Matrix missing = missing_information(inst.model, inst.theta, inst.x, map).entries();
            return std::max(max_abs(gap - diff), max_abs(gap - missing));
        });
    });
    add("gap_zero_two_classes", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("gap_zero_two_classes", s.instances, jobs, seed, Comparison::at_most, 1e-12,
                            [](int i, Rng& rng) {
                                oracles::InstanceOptions opts;
                                opts.min_classes = opts.max_classes = 2;
                                const auto inst = oracles::random_instance(rng, alternate(i), opts);
                                const Matrix diff = fisher_multiclass(inst.model, inst.theta, inst.x).entries() -
                                                    fisher_binary(inst.model, inst.theta, inst.x, inst.target).entries();
                                return std::max(
                                    max_abs(diff),
                                    max_abs(fisher_gap(inst.model, inst.theta, inst.x, inst.target).entries()));
                            });
    });
    add("gap_zero_single_support", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        return reduce_check("gap_zero_single_support", s.instances, jobs, seed, Comparison::at_most, 1e-12,
                            [](int, Rng& rng) {
                                // All non-target mass on one class, the other entries exactly zero.
                                const int K = 3 + static_cast<int>(rng.below(6));
                                const int p = 1 + static_cast<int>(rng.below(8));
                                const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
                                int other = static_cast<int>(rng.below(static_cast<std::uint64_t>(K - 1)));
                                if (other >= c) ++other;
                                Matrix J(K, p);
                                for (Eigen::Index a = 0; a < J.size(); ++a) J.data()[a] = rng.normal();
                                Vector probs = Vector::Zero(K);
                                probs[c] = rng.uniform(0.01, 0.99);
                                probs[other] = 1.0 - probs[c];
                                const ClassProbabilities eta(probs);
                                const auto map = CoarseningMap::target_vs_rest(K, c);
                                const Matrix diff =
                                    fisher_multiclass(J, eta).entries() - fisher_binary(J, eta, c).entries();
                                return std::max({max_abs(diff), max_abs(fisher_gap(J, eta, c).entries()),
                                                 max_abs(missing_information(J, eta, map).entries())});
                            });
    });
    add("observed_vs_expected", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        const double step = s.fd_step;
        return reduce_check("observed_vs_expected", s.hessian_instances, jobs, seed, Comparison::at_most, 1e-4,
                            [step](int i, Rng& rng) {
                                oracles::InstanceOptions opts;
                                opts.max_classes = 5;
                                opts.max_dim = 3;
                                const auto inst = oracles::random_instance(rng, alternate(i), opts);
                                const auto map = CoarseningMap::target_vs_rest(inst.model.class_count(), inst.target);
                                const Matrix oy =
                                    oracle_fisher(inst.model, inst.theta, inst.x, FisherMode::multiclass()).entries();
                                const Matrix hy = oracles::expected_negative_hessian(
                                    inst.model, inst.theta, inst.x, LikelihoodMode::multiclass(), step);
                                const Matrix oz =
                                    oracle_fisher(inst.model, inst.theta, inst.x, FisherMode::coarsened(map)).entries();
                                const Matrix hz = oracles::expected_negative_hessian(
                                    inst.model, inst.theta, inst.x, LikelihoodMode::binary_target(inst.target), step);
                                return std::max((oy - hy).norm() / oy.norm(), (oz - hz).norm() / oz.norm());
                            });
    });
    add("delta_ordering", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        const int inputs = s.fisher_inputs;
        return reduce_check("delta_ordering", s.delta_configs, jobs, seed, Comparison::at_most, 1e-12,
                            [inputs](int, Rng& rng) {
                                const DeltaConfig dc = delta_config(rng, inputs);
                                return dc.var_y - dc.var_z;
                            });
    });
    add("delta_strict", [](const VerifySettings& s, std::uint64_t seed, unsigned jobs) {
        // Same configurations as delta_ordering; only those with two or more active
        // non-target classes at the probe point count.
        std::vector<DeltaConfig> configs(static_cast<std::size_t>(s.delta_configs));
        parallel_for(configs.size(), jobs, [&](std::size_t i) {
            Rng rng(derive_seed(seed, "delta_ordering", i));
            configs[i] = delta_config(rng, s.fisher_inputs);
        });
        CheckResult r{"delta_strict", 0, 0.0, Comparison::at_least, 0.01, false};
        double worst = std::numeric_limits<double>::infinity();
        for (const auto& dc : configs) {
            if (dc.active < 2) continue;
            ++r.instances;
            worst = std::min(worst, (dc.var_z - dc.var_y) / dc.var_z);
        }
        r.value = r.instances > 0 ? worst : 0.0;
        r.passed = r.instances > 0 && r.value >= r.threshold;
        return r;
    });
    return checks;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    out.close();
    if (!out) throw IoError("error writing " + path.string());
}

// Collects output files, writing each in one piece.
class OutputDir {
public:
    explicit OutputDir(fs::path root) : root_(std::move(root)) {}

    template <class Writer>
    void write(const std::string& name, Writer&& writer) {
        std::ostringstream text;
        writer(text);
        write_text_file(root_ / name, text.str());
        files_.push_back(name);
    }

    const fs::path& root() const { return root_; }
    const std::vector<std::string>& files() const { return files_; }

private:
    fs::path root_;
    std::vector<std::string> files_;
};

void write_manifest(const fs::path& root, const RunManifest& manifest) {
    const fs::path tmp = root / "manifest.txt.tmp";
    write_text_file(tmp, manifest.to_text());
    std::error_code ec;
    fs::rename(tmp, root / "manifest.txt", ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot finalize manifest in " + root.string());
    }
}

std::string row_of(const MetricsResult& m) {
    std::string flags = m.empty_pred && m.empty_gt ? "empty_pred|empty_gt"
                        : m.empty_pred             ? "empty_pred"
                        : m.empty_gt               ? "empty_gt"
                                                   : "ok";
    return format_real(m.dice) + "," + format_real(m.hd95) + "," + format_real(m.nsd) + "," + flags;
}

LabelGrid read_grid_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read label grid " + path);
    try {
        return read_label_grid(in);
    } catch (const IoError& e) {
        throw IoError(path + ": " + e.what());
    }
}

void write_calibration_csv(std::ostream& out, const EfficiencyReport& r) {
    out << "arm,trials_used,excluded,acceptable,cov_relative_error,mean_theta_error,ridge_added\n";
    for (const ArmReport* arm : {&r.first, &r.second}) {
        out << arm->label << ',' << arm->trials_used << ',' << arm->excluded << ',' << (arm->acceptable ? 1 : 0) << ','
            << format_real(arm->cov_relative_error) << ',' << format_real(arm->mean_theta_error) << ','
            << format_real(arm->ridge_added) << '\n';
    }
}

bool mle_holds(const EfficiencyReport& r) { return r.valid() && r.theoretical_first_le_second; }

std::string mle_message(const EfficiencyReport& r) {
    return "n " + std::to_string(r.n) + ": theoretical ratio " + format_real(r.theoretical_ratio) +
           ", empirical ratio " + format_real(r.empirical_ratio) + " [" + format_real(r.ci_low) + ", " +
           format_real(r.ci_high) + "], " + to_string(r.verdict);
}

void run_body(const ExperimentConfig& cfg, unsigned jobs, OutputDir& dir, RunResult& result, RunManifest& manifest) {
    switch (cfg.kind) {
        case ExperimentKind::verify_identities: {
            manifest.seeds.push_back({"verify", {cfg.seed}});
            const auto checks = run_identity_suite(cfg.verify, cfg.seed, jobs);
            dir.write("verify_checks.csv", [&](std::ostream& o) { write_checks_csv(o, checks); });
            int failed = 0;
            for (const auto& c : checks) {
                failed += c.passed ? 0 : 1;
                result.messages.push_back(c.check + ": " + (c.passed ? "pass" : "FAIL") + " (" +
                                          format_real(c.value) + ")");
            }
            result.messages.push_back(std::to_string(checks.size() - failed) + "/" + std::to_string(checks.size()) +
                                      " checks passed");
            result.exit_code = failed == 0 ? 0 : 1;
            break;
        }
        case ExperimentKind::mle_study: {
            manifest.seeds.push_back({"mle", {derive_seed(cfg.seed, "mle")}});
            manifest.seeds.push_back({"mle-report", {derive_seed(cfg.seed, "mle-report")}});
            const MleOutcome m = run_mle_study(cfg, cfg.mle.n, jobs);
            dir.write("mle_trials_multiclass.csv", [&](std::ostream& o) { write_trials_csv(o, m.multiclass); });
            dir.write("mle_trials_binary.csv", [&](std::ostream& o) { write_trials_csv(o, m.binary); });
            dir.write("mle_summary.csv", [&](std::ostream& o) { write_summary_csv(o, m.report); });
            dir.write("mle_calibration.csv", [&](std::ostream& o) { write_calibration_csv(o, m.report); });
            for (const ArmReport* arm : {&m.report.first, &m.report.second}) {
                dir.write("mle_cov_" + arm->label + "_empirical.csv",
                          [&](std::ostream& o) { write_matrix_csv(o, arm->empirical_cov); });
                dir.write("mle_cov_" + arm->label + "_theoretical.csv",
                          [&](std::ostream& o) { write_matrix_csv(o, arm->theoretical_cov); });
            }
            result.messages.push_back(mle_message(m.report));
            result.exit_code = mle_holds(m.report) ? 0 : 1;
            break;
        }
        case ExperimentKind::segbench: {
            const BenchConfig bench = bench_config(cfg);
            manifest.seeds.push_back({"segbench", bench.seeds});
            const BenchReport report = run_benchmark(bench, jobs);
            dir.write("segbench_runs.csv", [&](std::ostream& o) { write_runs_csv(o, report); });
            dir.write("segbench_summary.csv", [&](std::ostream& o) { write_summary_csv(o, report); });
            dir.write("segbench_deltas.csv", [&](std::ostream& o) { write_deltas_csv(o, report); });
            for (const auto& s : report.summaries) {
                result.messages.push_back(s.scheme + ": dice " + format_real(s.dice_mean) + ", hd95 " +
                                          format_real(s.hd95_mean) + ", nsd " + format_real(s.nsd_mean));
            }
            if (cfg.segbench.finetune) {
                const BenchConfig ftb = finetune_bench_config(cfg);
                manifest.seeds.push_back({"finetune", ftb.seeds});
                const FineTuneReport ft = run_finetune(ftb, cfg.finetune.config, jobs);
                dir.write("finetune.csv", [&](std::ostream& o) { write_finetune_csv(o, ft); });
                PlotSeries series{"epochs", "mean_dice", {}, {}};
                for (std::size_t i = 1; i < ft.epochs.size(); ++i) {
                    series.x.push_back(ft.epochs[i]);
                    series.y.push_back(ft.mean_dice[i]);
                }
                dir.write("plot_epochs.csv", [&](std::ostream& o) { write_plot_csv(o, series); });
            }
            break;
        }
        case ExperimentKind::metrics_eval: {
            result.metrics_row = evaluate_label_files(cfg);
            dir.write("metrics.csv", [&](std::ostream& o) { o << "dice,hd95,nsd,flags\n" << result.metrics_row << '\n'; });
            break;
        }
        case ExperimentKind::sweep: {
            const auto& values = cfg.sweep.values;
            const std::string axis = to_string(cfg.sweep.axis);
            if (cfg.sweep.axis == SweepAxis::aux_fraction || cfg.sweep.axis == SweepAxis::aux_count) {
                BenchConfig bench = bench_config(cfg);
                bench.schemes.clear();
                for (double v : values) {
                    bench.schemes.push_back(cfg.sweep.axis == SweepAxis::aux_fraction
                                                ? LabelScheme::partial(v)
                                                : LabelScheme::aux_sweep(static_cast<int>(v)));
                }
                manifest.seeds.push_back({"segbench", bench.seeds});
                const BenchReport report = run_benchmark(bench, jobs);
                dir.write("sweep_runs.csv", [&](std::ostream& o) { write_runs_csv(o, report); });
                dir.write("sweep_summary.csv", [&](std::ostream& o) { write_summary_csv(o, report); });
                PlotSeries series{axis, "mean_dice", values, {}};
                for (const auto& s : report.summaries) series.y.push_back(s.dice_mean);
                dir.write("plot_" + axis + ".csv", [&](std::ostream& o) { write_plot_csv(o, series); });
            } else if (cfg.sweep.axis == SweepAxis::n) {
                manifest.seeds.push_back({"mle", {derive_seed(cfg.seed, "mle")}});
                manifest.seeds.push_back({"mle-report", {derive_seed(cfg.seed, "mle-report")}});
                std::ostringstream summary;
                summary << "n,arm,trials,empirical_var_tau,theoretical_var_tau,ratio,ci_low,ci_high,verdict\n";
                PlotSeries series{axis, "variance_ratio", values, {}};
                bool holds = true;
                for (double v : values) {
                    const MleOutcome m = run_mle_study(cfg, static_cast<int>(v), jobs);
                    std::ostringstream one;
                    write_summary_csv(one, m.report);
                    std::istringstream lines(one.str());
                    std::string line;
                    std::getline(lines, line);
                    while (std::getline(lines, line)) summary << static_cast<int>(v) << ',' << line << '\n';
                    series.y.push_back(m.report.empirical_ratio);
                    holds = holds && mle_holds(m.report);
                    result.messages.push_back(mle_message(m.report));
                }
                dir.write("sweep_mle_summary.csv", [&](std::ostream& o) { o << summary.str(); });
                dir.write("plot_n.csv", [&](std::ostream& o) { write_plot_csv(o, series); });
                result.exit_code = holds ? 0 : 1;
            } else {
                const BenchConfig ftb = finetune_bench_config(cfg);
                manifest.seeds.push_back({"finetune", ftb.seeds});
                FineTuneConfig ft = cfg.finetune.config;
                ft.checkpoints.clear();
                for (double v : values) ft.checkpoints.push_back(static_cast<int>(v));
                const FineTuneReport report = run_finetune(ftb, ft, jobs);
                dir.write("finetune.csv", [&](std::ostream& o) { write_finetune_csv(o, report); });
                PlotSeries series{axis, "mean_dice", {}, {}};
                for (std::size_t i = 1; i < report.epochs.size(); ++i) {
                    series.x.push_back(report.epochs[i]);
                    series.y.push_back(report.mean_dice[i]);
                }
                dir.write("plot_epochs.csv", [&](std::ostream& o) { write_plot_csv(o, series); });
            }
            break;
        }
    }
}

}  // namespace

MleOutcome run_mle_study(const ExperimentConfig& cfg, int n, unsigned jobs) {
    const MLEDesign design = default_mle_design(cfg.mle.classes, cfg.mle.target);
    StudySpec spec;
    spec.n = n;
    spec.trials = cfg.mle.trials;
    spec.target = design.target;
    spec.probe_x = design.probe_x;
    spec.config = cfg.mle.fit;
    spec.seed = derive_seed(cfg.seed, "mle");
    MleOutcome out;
    out.multiclass = replicate_mle(design.model, design.true_theta, design.dist, LikelihoodMode::multiclass(), spec, jobs);
    out.binary = replicate_mle(design.model, design.true_theta, design.dist,
                               LikelihoodMode::binary_target(design.target), spec, jobs);
    ReportOptions options;
    options.fisher_sample = cfg.mle.fisher_sample;
    options.bootstrap_resamples = cfg.mle.bootstrap_resamples;
    options.confidence = cfg.mle.confidence;
    options.seed = derive_seed(cfg.seed, "mle-report");
    options.jobs = jobs;
    out.report = efficiency_report(out.multiclass, out.binary, design.model, design.dist, options);
    return out;
}

std::string evaluate_label_files(const ExperimentConfig& cfg) {
    if (cfg.metrics_eval.pred.empty() || cfg.metrics_eval.gt.empty()) {
        throw InvalidInput("metrics evaluation needs metrics.pred and metrics.gt");
    }
    const LabelGrid pred = read_grid_file(cfg.metrics_eval.pred);
    const LabelGrid gt = read_grid_file(cfg.metrics_eval.gt);
    if (pred.rows != gt.rows || pred.cols != gt.cols) {
        throw DimensionMismatch("prediction is " + std::to_string(pred.rows) + "x" + std::to_string(pred.cols) +
                                ", ground truth is " + std::to_string(gt.rows) + "x" + std::to_string(gt.cols));
    }
    const int target = cfg.metrics_eval.target_class;
    const MetricsResult m = evaluate_masks(BinaryMask::from_labels(pred, target, cfg.metrics_eval.spacing),
                                           BinaryMask::from_labels(gt, target, cfg.metrics_eval.spacing), cfg.metrics);
    return row_of(m);
}

const std::vector<IdentityCheck>& identity_checks() {
    static const std::vector<IdentityCheck> checks = build_checks();
    return checks;
}

std::vector<CheckResult> run_identity_suite(const VerifySettings& settings, std::uint64_t seed, unsigned jobs) {
    std::vector<CheckResult> out;
    for (const auto& check : identity_checks()) out.push_back(check.run(settings, seed, jobs));
    return out;
}

void write_checks_csv(std::ostream& out, const std::vector<CheckResult>& results) {
    out << "check,instances,value,comparison,threshold,status\n";
    for (const auto& r : results) {
        out << r.check << ',' << r.instances << ',' << format_real(r.value) << ','
            << (r.comparison == Comparison::at_most ? "<=" : ">=") << ',' << format_real(r.threshold) << ','
            << (r.passed ? "pass" : "fail") << '\n';
    }
}

void write_plot_csv(std::ostream& out, const PlotSeries& series) {
    if (series.x.size() != series.y.size()) throw DimensionMismatch("plot series x and y differ in length");
    out << series.x_name << ',' << series.y_name << '\n';
    for (std::size_t i = 0; i < series.x.size(); ++i) out << format_real(series.x[i]) << ',' << format_real(series.y[i]) << '\n';
}

void emit_plot_data(const PlotSeries& series, const std::filesystem::path& path) {
    std::ostringstream text;
    write_plot_csv(text, series);
    write_text_file(path, text.str());
}

std::string RunManifest::to_text() const {
    std::ostringstream out;
    out << "status = " << status << '\n';
    out << "artifact_version = " << kArtifactVersion << '\n';
    for (const auto& [stream, values] : seeds) {
        out << "seeds." << stream << " =";
        for (std::size_t i = 0; i < values.size(); ++i) out << (i ? ", " : " ") << values[i];
        out << '\n';
    }
    std::istringstream snapshot(serialize_config(config));
    std::string line;
    while (std::getline(snapshot, line)) {
        if (line.rfind("out =", 0) == 0) continue;
        out << "config." << line << '\n';
    }
    for (const auto& f : files) {
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", f.crc32);
        out << "file." << f.name << " = crc32 " << crc << ", bytes " << f.size << '\n';
    }
    if (!error.empty()) out << "error = " << error << '\n';
    return out.str();
}

std::uint32_t file_crc32(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    boost::crc_32_type crc;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        crc.process_bytes(buf, static_cast<std::size_t>(in.gcount()));
    }
    return crc.checksum();
}

RunResult run_experiment(const ExperimentConfig& cfg, unsigned jobs) {
    const fs::path root(cfg.out);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create output directory " + root.string() + ": " + ec.message());

    RunManifest manifest;
    manifest.config = cfg;
    write_manifest(root, manifest);

    OutputDir dir(root);
    RunResult result;
    try {
        run_body(cfg, jobs, dir, result, manifest);
    } catch (const std::exception& e) {
        manifest.status = "failed";
        manifest.error = e.what();
        for (const auto& name : dir.files()) manifest.files.push_back({name, file_crc32(root / name), fs::file_size(root / name)});
        write_manifest(root, manifest);
        throw;
    }
    for (const auto& name : dir.files()) manifest.files.push_back({name, file_crc32(root / name), fs::file_size(root / name)});
    manifest.status = result.exit_code == 0 ? "complete" : "failed-assertions";
    write_manifest(root, manifest);
    result.files = dir.files();
    result.files.push_back("manifest.txt");
    return result;
}

}  // namespace coarsegrain
