#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "coarsegrain/config.hpp"
#include "coarsegrain/error.hpp"
#include "coarsegrain/experiment.hpp"

using namespace coarsegrain;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "coarsegrain_experiment_test" / name;
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = slurp(e.path());
    return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream row(line);
        std::string cell;
        while (std::getline(row, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

std::map<std::string, std::string> read_manifest(const fs::path& p) {
    std::map<std::string, std::string> kv;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find(" = ");
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return kv;
}

// A benchmark small enough for unit tests.
ExperimentConfig tiny(ExperimentKind kind, const fs::path& out) {
    ExperimentConfig cfg = parse_config(
        "kind = " + to_string(kind) +
        "\n"
        "scene.rows = 48\nscene.cols = 48\n"
        "scene.organ_major_min = 6\nscene.organ_major_max = 10\n"
        "scene.organ_minor_min = 5\nscene.organ_minor_max = 8\n"
        "scene.lesion_radius_min = 1.5\nscene.lesion_radius_max = 2.5\n"
        "segbench.train_scenes = 3\nsegbench.test_scenes = 2\nsegbench.seeds = 3\n"
        "train.pixels_per_image = 150\ntrain.epochs = 3\n"
        "finetune.seeds = 2\n");
    cfg.out = out.string();
    return cfg;
}

int run_cli(const std::vector<std::string>& args, std::string* out = nullptr, std::string* err = nullptr) {
    std::ostringstream o, e;
    const int rc = cli::run(args, o, e);
    if (out) *out = o.str();
    if (err) *err = e.str();
    return rc;
}

void write_grid(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
}

}  // namespace

TEST_CASE("crc32 matches the standard check value") {
    const fs::path dir = scratch("crc");
    fs::create_directories(dir);
    std::ofstream(dir / "check.txt", std::ios::binary) << "123456789";
    CHECK(file_crc32(dir / "check.txt") == 0xCBF43926u);
    std::ofstream(dir / "empty.txt", std::ios::binary);
    CHECK(file_crc32(dir / "empty.txt") == 0u);
    CHECK_THROWS_AS(file_crc32(dir / "missing.txt"), IoError);
}

TEST_CASE("identity suite passes with default settings") {
    const VerifySettings s;
    const auto results = run_identity_suite(s, 0, 1);
    CHECK(results.size() == identity_checks().size());
    CHECK(results.size() == 13);
    for (const auto& r : results) {
        INFO(r.check << " value " << r.value);
        CHECK(r.passed);
        CHECK(r.instances > 0);
    }
    const auto again = run_identity_suite(s, 0, 3);
    for (std::size_t i = 0; i < results.size(); ++i) CHECK(results[i].value == again[i].value);
}

TEST_CASE("identity suite is seed sensitive but always passes") {
    VerifySettings s;
    s.instances = 40;
    s.hessian_instances = 4;
    s.delta_configs = 30;
    for (std::uint64_t seed : {1ULL, 77ULL, 123456789ULL}) {
        for (const auto& r : run_identity_suite(s, seed, 2)) {
            INFO(r.check << " seed " << seed << " value " << r.value);
            CHECK(r.passed);
        }
    }
}

TEST_CASE("verify run writes the table and a complete manifest") {
    ExperimentConfig cfg = default_config(ExperimentKind::verify_identities);
    cfg.out = scratch("verify").string();
    const RunResult r = run_experiment(cfg, 2);
    CHECK(r.exit_code == 0);
    const auto rows = read_csv(fs::path(cfg.out) / "verify_checks.csv");
    REQUIRE(rows.size() == 14);
    CHECK(rows[0] == std::vector<std::string>{"check", "instances", "value", "comparison", "threshold", "status"});
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].back() == "pass");
    const auto m = read_manifest(fs::path(cfg.out) / "manifest.txt");
    CHECK(m.at("status") == "complete");
    CHECK(m.at("artifact_version") == kArtifactVersion);
    CHECK(m.count("config.out") == 0);
    CHECK(!fs::exists(fs::path(cfg.out) / "manifest.txt.tmp"));
}

TEST_CASE("unwritable output directory fails before writing a manifest") {
    const fs::path dir = scratch("blocked");
    fs::create_directories(dir);
    std::ofstream(dir / "file") << "x";
    ExperimentConfig cfg = default_config(ExperimentKind::verify_identities);
    cfg.out = (dir / "file" / "sub").string();
    CHECK_THROWS_AS(run_experiment(cfg, 1), IoError);
    CHECK(!fs::exists(dir / "file" / "sub"));

    std::string err;
    CHECK(run_cli({"verify", "--out", cfg.out, "--quiet"}, nullptr, &err) != 0);
    CHECK(err.find("error") != std::string::npos);
}

TEST_CASE("a failing run records the error in the manifest") {
    ExperimentConfig cfg = default_config(ExperimentKind::metrics_eval);
    const fs::path out = scratch("failing");
    cfg.out = out.string();
    cfg.metrics_eval.pred = (out / "nope.txt").string();
    cfg.metrics_eval.gt = (out / "nope.txt").string();
    CHECK_THROWS_AS(run_experiment(cfg, 1), IoError);
    const auto m = read_manifest(out / "manifest.txt");
    CHECK(m.at("status") == "failed");
    CHECK(m.at("error").find("nope.txt") != std::string::npos);
}

TEST_CASE("manifest checksums match the files") {
    const fs::path out = scratch("manifest");
    const ExperimentConfig cfg = tiny(ExperimentKind::segbench, out);
    const RunResult r = run_experiment(cfg, 1);
    CHECK(r.exit_code == 0);
    const auto m = read_manifest(out / "manifest.txt");
    CHECK(m.at("status") == "complete");
    CHECK(m.count("seeds.segbench") == 1);
    int files = 0;
    for (const auto& e : fs::directory_iterator(out)) {
        const std::string name = e.path().filename().string();
        if (name == "manifest.txt") continue;
        ++files;
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", file_crc32(e.path()));
        CHECK(m.at("file." + name) == "crc32 " + std::string(crc) + ", bytes " + std::to_string(fs::file_size(e.path())));
    }
    CHECK(files == 3);
    // The snapshot reproduces the config.
    std::string text;
    for (const auto& [k, v] : m)
        if (k.rfind("config.", 0) == 0) text += k.substr(7) + " = " + v + "\n";
    ExperimentConfig back = parse_config(text);
    back.out = cfg.out;
    CHECK(back == cfg);
}

TEST_CASE("runs are byte-identical across repeats and worker counts") {
    for (ExperimentKind kind : {ExperimentKind::segbench, ExperimentKind::sweep, ExperimentKind::verify_identities}) {
        const fs::path a = scratch("det_a");
        const fs::path b = scratch("det_b");
        ExperimentConfig cfg = tiny(kind, a);
        cfg.verify.instances = 30;
        run_experiment(cfg, 1);
        cfg.out = b.string();
        run_experiment(cfg, 3);
        CHECK(directory_bytes(a) == directory_bytes(b));
    }
}

TEST_CASE("aux fraction sweep plot data equals the summary") {
    const fs::path out = scratch("sweep");
    const RunResult r = run_experiment(tiny(ExperimentKind::sweep, out), 2);
    CHECK(r.exit_code == 0);
    const auto plot = read_csv(out / "plot_aux_fraction.csv");
    const auto summary = read_csv(out / "sweep_summary.csv");
    REQUIRE(plot.size() == 6);
    REQUIRE(summary.size() == 6);
    CHECK(plot[0] == std::vector<std::string>{"aux_fraction", "mean_dice"});
    const char* xs[] = {"0", "0.25", "0.5", "0.75", "1"};
    for (int i = 1; i <= 5; ++i) {
        CHECK(plot[i][0] == xs[i - 1]);
        CHECK(summary[i][0] == std::string("partial:") + xs[i - 1]);
        CHECK(plot[i][1] == summary[i][2]);
    }
}

TEST_CASE("aux count sweep uses prefix schemes") {
    const fs::path out = scratch("sweep_count");
    ExperimentConfig cfg = tiny(ExperimentKind::sweep, out);
    cfg.sweep.axis = SweepAxis::aux_count;
    cfg.sweep.values = {0, 1, 2};
    run_experiment(cfg, 1);
    const auto summary = read_csv(out / "sweep_summary.csv");
    REQUIRE(summary.size() == 4);
    CHECK(summary[1][0] == "aux:0");
    CHECK(summary[3][0] == "aux:2");
    CHECK(read_csv(out / "plot_aux_count.csv")[0][0] == "aux_count");
}

TEST_CASE("fine-tune plot covers the configured checkpoints") {
    const fs::path out = scratch("finetune");
    ExperimentConfig cfg = tiny(ExperimentKind::segbench, out);
    cfg.segbench.finetune = true;
    cfg.segbench.seeds = 1;
    run_experiment(cfg, 2);
    const auto plot = read_csv(out / "plot_epochs.csv");
    const auto ft = read_csv(out / "finetune.csv");
    REQUIRE(plot.size() == 6);
    CHECK(plot[0] == std::vector<std::string>{"epochs", "mean_dice"});
    const char* xs[] = {"50", "100", "150", "200", "250"};
    for (int i = 1; i <= 5; ++i) CHECK(plot[i][0] == xs[i - 1]);
    // finetune.csv has one row per seed and epoch including epoch 0.
    CHECK(ft.size() == 1 + 2 * 6);
    CHECK(read_manifest(out / "manifest.txt").count("seeds.finetune") == 1);
}

TEST_CASE("epochs sweep sets the checkpoints") {
    const fs::path out = scratch("sweep_epochs");
    ExperimentConfig cfg = tiny(ExperimentKind::sweep, out);
    cfg.sweep.axis = SweepAxis::epochs;
    cfg.sweep.values = {2, 5};
    run_experiment(cfg, 1);
    const auto plot = read_csv(out / "plot_epochs.csv");
    REQUIRE(plot.size() == 3);
    CHECK(plot[1][0] == "2");
    CHECK(plot[2][0] == "5");
}

TEST_CASE("n sweep repeats the MLE study") {
    const fs::path out = scratch("sweep_n");
    ExperimentConfig cfg = default_config(ExperimentKind::sweep);
    cfg.out = out.string();
    cfg.sweep.axis = SweepAxis::n;
    cfg.sweep.values = {300, 600};
    cfg.mle.trials = 20;
    cfg.mle.fisher_sample = 2000;
    cfg.mle.bootstrap_resamples = 200;
    run_experiment(cfg, 2);
    const auto plot = read_csv(out / "plot_n.csv");
    const auto summary = read_csv(out / "sweep_mle_summary.csv");
    REQUIRE(plot.size() == 3);
    REQUIRE(summary.size() == 5);
    CHECK(plot[1][0] == "300");
    CHECK(summary[1][0] == "300");
    CHECK(summary[1][1] == "multiclass");
    CHECK(plot[1][1] == summary[1][6]);
}

TEST_CASE("mle study writes both arms") {
    const fs::path out = scratch("mle");
    ExperimentConfig cfg = default_config(ExperimentKind::mle_study);
    cfg.out = out.string();
    cfg.mle.n = 500;
    cfg.mle.trials = 30;
    cfg.mle.fisher_sample = 2000;
    cfg.mle.bootstrap_resamples = 200;
    run_experiment(cfg, 2);
    for (const char* f : {"mle_trials_multiclass.csv", "mle_trials_binary.csv", "mle_summary.csv",
                          "mle_calibration.csv", "mle_cov_multiclass_empirical.csv",
                          "mle_cov_binary_theoretical.csv"}) {
        CHECK(fs::exists(out / f));
    }
    CHECK(read_csv(out / "mle_trials_binary.csv").size() == 31);
}

TEST_CASE("plot data errors") {
    PlotSeries bad{"n", "ratio", {1, 2}, {1}};
    std::ostringstream s;
    CHECK_THROWS_AS(write_plot_csv(s, bad), DimensionMismatch);
    const fs::path dir = scratch("plot");
    fs::create_directories(dir);
    std::ofstream(dir / "file") << "x";
    PlotSeries ok{"n", "ratio", {1}, {0.5}};
    CHECK_THROWS_AS(emit_plot_data(ok, dir / "file" / "p.csv"), IoError);
    emit_plot_data(ok, dir / "p.csv");
    CHECK(slurp(dir / "p.csv") == "n,ratio\n1,0.5\n");
}

TEST_CASE("metrics subcommand prints one row") {
    const fs::path dir = scratch("metrics");
    write_grid(dir / "p.txt", "0 0 0 0\n0 1 1 0\n0 1 1 0\n0 0 0 0\n");
    write_grid(dir / "g.txt", "0 0 0 0\n0 1 1 0\n0 1 1 0\n0 0 0 0\n");
    write_grid(dir / "e.txt", "0 0 0 0\n0 0 0 0\n0 0 0 0\n0 0 0 0\n");
    write_grid(dir / "small.txt", "0 0\n0 1\n");
    const std::string p = (dir / "p.txt").string(), g = (dir / "g.txt").string();
    std::string out;
    CHECK(run_cli({"metrics", p, g}, &out) == 0);
    CHECK(out == "1,0,1,ok\n");
    CHECK(run_cli({"metrics", p, (dir / "e.txt").string()}, &out) == 0);
    CHECK(out.substr(0, 2) == "0,");
    CHECK(out.find("empty_gt") != std::string::npos);
    CHECK(run_cli({"metrics", p, g, "--target-class", "2"}, &out) == 0);
    CHECK(out.find("empty_pred|empty_gt") != std::string::npos);
    CHECK(run_cli({"metrics", p, g, "--spacing", "2,0.5", "--tolerance", "0"}, &out) == 0);
    CHECK(out == "1,0,1,ok\n");
    CHECK(run_cli({"metrics", p, (dir / "small.txt").string()}) == 1);
    CHECK(run_cli({"metrics", p}) == 2);
    CHECK(run_cli({"metrics", p, g, "--spacing", "3"}) == 2);

    const fs::path outdir = scratch("metrics_out");
    CHECK(run_cli({"metrics", p, g, "--out", outdir.string()}, &out) == 0);
    CHECK(out == "1,0,1,ok\n");
    CHECK(slurp(outdir / "metrics.csv") == "dice,hd95,nsd,flags\n1,0,1,ok\n");
}

TEST_CASE("cli argument handling") {
    const fs::path dir = scratch("cli");
    fs::create_directories(dir);
    std::string out, err;
    CHECK(run_cli({}, nullptr, &err) == 2);
    CHECK(run_cli({"bogus"}) == 2);
    CHECK(run_cli({"verify", "--jobs", "0"}) == 2);
    CHECK(run_cli({"--help"}, &out) == 0);
    CHECK(out.find("segbench") != std::string::npos);

    std::ofstream(dir / "seg.cfg") << "kind = segbench\n";
    CHECK(run_cli({"verify", "--config", (dir / "seg.cfg").string()}, nullptr, &err) == 1);
    CHECK(err.find("segbench") != std::string::npos);
    std::ofstream(dir / "bad.cfg") << "kind = verify-identities\nverify.instances = many\n";
    CHECK(run_cli({"verify", "--config", (dir / "bad.cfg").string()}, nullptr, &err) == 2);
    CHECK(err.find("line 2") != std::string::npos);

    std::ofstream(dir / "v.cfg") << "kind = verify-identities\nverify.instances = 10\nverify.hessian_instances = 2\n";
    const fs::path a = dir / "a", b = dir / "b";
    CHECK(run_cli({"verify", "--config", (dir / "v.cfg").string(), "--out", a.string(), "--seed", "9", "--quiet"}, &out) == 0);
    CHECK(out.empty());
    CHECK(run_cli({"verify", "--config", (dir / "v.cfg").string(), "--out", b.string(), "--seed", "9", "--jobs", "4"},
                  &out) == 0);
    CHECK(out.find("13/13 checks passed") != std::string::npos);
    CHECK(directory_bytes(a) == directory_bytes(b));
    CHECK(read_manifest(a / "manifest.txt").at("config.seed") == "9");
}

TEST_CASE("jobs resolution") {
    CHECK(cli::resolve_jobs(3) == 3);
    setenv("COARSEGRAIN_JOBS", "5", 1);
    CHECK(cli::resolve_jobs(0) == 5);
    CHECK(cli::resolve_jobs(2) == 2);
    setenv("COARSEGRAIN_JOBS", "junk", 1);
    CHECK(cli::resolve_jobs(0) >= 1);
    unsetenv("COARSEGRAIN_JOBS");
    CHECK(cli::resolve_jobs(0) >= 1);
}
