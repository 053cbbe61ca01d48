#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <ostream>
#include <thread>

#include "coarsegrain/config.hpp"
#include "coarsegrain/error.hpp"
#include "coarsegrain/experiment.hpp"

namespace coarsegrain::cli {

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    int jobs = 0;
    bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Experiment config file");
    sub->add_option("--seed", c.seed, "Master seed")->each([&c](const std::string&) { c.seed_set = true; });
    sub->add_option("--out", c.out, "Output directory");
    sub->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", c.quiet, "Only report errors");
}

ExperimentConfig build_config(ExperimentKind kind, const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? default_config(kind) : load_config(c.config);
    if (cfg.kind != kind) {
        throw InvalidInput("config " + c.config + " has kind " + to_string(cfg.kind) + ", expected " +
                           to_string(kind));
    }
    if (c.seed_set) cfg.seed = c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    return cfg;
}

}  // namespace

unsigned resolve_jobs(int flag_value) {
    if (flag_value > 0) return static_cast<unsigned>(flag_value);
    if (const char* env = std::getenv("COARSEGRAIN_JOBS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Coarse-label information experiments"};
    app.require_subcommand(1);

    Common common;
    struct Sub {
        const char* name;
        const char* help;
        ExperimentKind kind;
    };
    const Sub subs[] = {
        {"verify", "Run the information identity checks", ExperimentKind::verify_identities},
        {"mle", "Monte Carlo MLE efficiency study", ExperimentKind::mle_study},
        {"segbench", "Synthetic segmentation benchmark", ExperimentKind::segbench},
        {"metrics", "Evaluate a predicted label grid against ground truth", ExperimentKind::metrics_eval},
        {"sweep", "Sweep one axis of a benchmark or study", ExperimentKind::sweep},
    };
    std::vector<CLI::App*> apps;
    for (const auto& s : subs) {
        apps.push_back(app.add_subcommand(s.name, s.help));
        add_common(apps.back(), common);
    }

    std::string pred, gt, spacing;
    int target_class = -1;
    double tolerance = -1.0;
    CLI::App* metrics = apps[3];
    metrics->add_option("pred", pred, "Predicted label grid")->required();
    metrics->add_option("gt", gt, "Ground-truth label grid")->required();
    metrics->add_option("--target-class", target_class, "Class to evaluate")->check(CLI::NonNegativeNumber);
    metrics->add_option("--tolerance", tolerance, "NSD tolerance")->check(CLI::NonNegativeNumber);
    metrics->add_option("--spacing", spacing, "Pixel spacing 'row,col'");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\nrun with --help for usage\n";
        return 2;
    }

    std::size_t which = 0;
    while (which < apps.size() && !apps[which]->parsed()) ++which;
    const ExperimentKind kind = subs[which].kind;
    const unsigned jobs = resolve_jobs(common.jobs);

    try {
        ExperimentConfig cfg = build_config(kind, common);
        if (kind == ExperimentKind::metrics_eval) {
            cfg.metrics_eval.pred = pred;
            cfg.metrics_eval.gt = gt;
            if (target_class >= 0) cfg.metrics_eval.target_class = target_class;
            if (tolerance >= 0.0) cfg.metrics.tolerance = tolerance;
            if (!spacing.empty()) {
                cfg.metrics_eval.spacing =
                    parse_config("kind = metrics-eval\nmetrics.spacing = " + spacing + "\n").metrics_eval.spacing;
            }
            // Without --out the row goes to stdout only.
            if (common.out.empty()) {
                out << evaluate_label_files(cfg) << '\n';
                return 0;
            }
            const RunResult r = run_experiment(cfg, jobs);
            out << r.metrics_row << '\n';
            return r.exit_code;
        }
        const RunResult r = run_experiment(cfg, jobs);
        if (!common.quiet) {
            for (const auto& m : r.messages) out << m << '\n';
            out << "wrote " << r.files.size() << " files to " << cfg.out << '\n';
        }
        return r.exit_code;
    } catch (const ConfigError& e) {
        err << "config error: " << (common.config.empty() ? "" : common.config + ": ") << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace coarsegrain::cli
