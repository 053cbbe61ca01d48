#include "coarsegrain/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include "coarsegrain/error.hpp"
#include "coarsegrain/format.hpp"
#include "coarsegrain/rng.hpp"

namespace coarsegrain {

namespace {

using Setter = std::function<void(ExperimentConfig&, std::string_view, int)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Entry {
    std::string key;
    Setter set;
    Getter get;
};

std::string_view trim(std::string_view s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string_view::npos) return {};
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::vector<std::string_view> split_list(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = s.find(',', start);
        out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

[[noreturn]] void mismatch(int line, const std::string& key, const std::string& expected, std::string_view value) {
    throw ConfigError(line, "key '" + key + "' expects " + expected + ", got '" + std::string(value) + "'");
}

long long parse_integer(std::string_view v, const std::string& key, int line, long long lo, long long hi) {
    long long out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || end != v.data() + v.size()) mismatch(line, key, "an integer", v);
    if (out < lo || out > hi) {
        throw ConfigError(line, "key '" + key + "' must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                    "], got " + std::string(v));
    }
    return out;
}

double parse_real(std::string_view v, const std::string& key, int line, double lo, double hi) {
    double out = 0.0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out)) {
        mismatch(line, key, "a finite real number", v);
    }
    if (out < lo || out > hi) {
        throw ConfigError(line, "key '" + key + "' must lie in [" + format_real(lo) + ", " + format_real(hi) +
                                    "], got " + std::string(v));
    }
    return out;
}

template <class Ref>
Entry integer(std::string key, Ref ref, long long lo, long long hi) {
    return {key,
            [=](ExperimentConfig& c, std::string_view v, int line) {
                ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_integer(v, key, line, lo, hi));
            },
            [=](const ExperimentConfig& c) { return std::to_string(ref(c)); }};
}

template <class Ref>
Entry real(std::string key, Ref ref, double lo, double hi) {
    return {key, [=](ExperimentConfig& c, std::string_view v, int line) { ref(c) = parse_real(v, key, line, lo, hi); },
            [=](const ExperimentConfig& c) { return format_real(ref(c)); }};
}

template <class Ref>
Entry boolean(std::string key, Ref ref) {
    return {key,
            [=](ExperimentConfig& c, std::string_view v, int line) {
                if (v == "true") ref(c) = true;
                else if (v == "false") ref(c) = false;
                else mismatch(line, key, "true or false", v);
            },
            [=](const ExperimentConfig& c) { return std::string(ref(c) ? "true" : "false"); }};
}

template <class Ref>
Entry text(std::string key, Ref ref) {
    return {key,
            [=](ExperimentConfig& c, std::string_view v, int line) {
                if (v.find_first_of("\n\r") != std::string_view::npos) mismatch(line, key, "a single line", v);
                ref(c) = std::string(v);
            },
            [=](const ExperimentConfig& c) { return ref(c); }};
}

template <class E, class Ref>
Entry choice(std::string key, Ref ref, std::vector<std::pair<std::string, E>> names) {
    std::string expected;
    for (const auto& [name, value] : names) expected += (expected.empty() ? "one of " : ", ") + name;
    return {key,
            [=](ExperimentConfig& c, std::string_view v, int line) {
                for (const auto& [name, value] : names) {
                    if (v == name) {
                        ref(c) = value;
                        return;
                    }
                }
                mismatch(line, key, expected, v);
            },
            [=](const ExperimentConfig& c) {
                for (const auto& [name, value] : names)
                    if (ref(c) == value) return name;
                return std::string();
            }};
}

template <class Ref>
Entry real_list(std::string key, Ref ref, double lo, double hi) {
    return {key,
            [=](ExperimentConfig& c, std::string_view v, int line) {
                std::vector<double> out;
                for (auto item : split_list(v)) out.push_back(parse_real(item, key, line, lo, hi));
                ref(c) = out;
            },
            [=](const ExperimentConfig& c) {
                std::string s;
                for (double x : ref(c)) s += (s.empty() ? "" : ", ") + format_real(x);
                return s;
            }};
}

template <class Ref>
Entry int_list(std::string key, Ref ref, long long lo, long long hi) {
    return {key,
            [=](ExperimentConfig& c, std::string_view v, int line) {
                std::vector<int> out;
                for (auto item : split_list(v)) out.push_back(static_cast<int>(parse_integer(item, key, line, lo, hi)));
                ref(c) = out;
            },
            [=](const ExperimentConfig& c) {
                std::string s;
                for (int x : ref(c)) s += (s.empty() ? "" : ", ") + std::to_string(x);
                return s;
            }};
}

LabelScheme parse_scheme(std::string_view v, const std::string& key, int line) {
    try {
        return LabelScheme::parse(std::string(v));
    } catch (const InvalidInput& e) {
        throw ConfigError(line, "key '" + key + "': " + e.what());
    }
}

const std::vector<std::pair<std::string, ExperimentKind>> kKinds{
    {"verify-identities", ExperimentKind::verify_identities},
    {"mle-study", ExperimentKind::mle_study},
    {"segbench", ExperimentKind::segbench},
    {"metrics-eval", ExperimentKind::metrics_eval},
    {"sweep", ExperimentKind::sweep},
};

const std::vector<std::pair<std::string, SweepAxis>> kAxes{
    {"aux_fraction", SweepAxis::aux_fraction},
    {"aux_count", SweepAxis::aux_count},
    {"n", SweepAxis::n},
    {"epochs", SweepAxis::epochs},
};

constexpr long long kMaxCount = 100000000;
constexpr double kHuge = 1e300;

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = [] {
        using C = ExperimentConfig;
        std::vector<Entry> t;
        t.push_back(choice<ExperimentKind>("kind", [](auto& c) -> auto& { return c.kind; }, kKinds));
        t.push_back({"seed",
                     [](C& c, std::string_view v, int line) {
                         std::uint64_t out = 0;
                         const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
                         if (v.empty() || ec != std::errc() || end != v.data() + v.size()) {
                             mismatch(line, "seed", "an unsigned 64-bit integer", v);
                         }
                         c.seed = out;
                     },
                     [](const C& c) { return std::to_string(c.seed); }});
        t.push_back(text("out", [](auto& c) -> auto& { return c.out; }));

        t.push_back(integer("verify.instances", [](auto& c) -> auto& { return c.verify.instances; }, 1, kMaxCount));
        t.push_back(integer("verify.hessian_instances", [](auto& c) -> auto& { return c.verify.hessian_instances; }, 1,
                            kMaxCount));
        t.push_back(integer("verify.delta_configs", [](auto& c) -> auto& { return c.verify.delta_configs; }, 1,
                            kMaxCount));
        t.push_back(integer("verify.fisher_inputs", [](auto& c) -> auto& { return c.verify.fisher_inputs; }, 1,
                            kMaxCount));
        t.push_back(real("verify.fd_step", [](auto& c) -> auto& { return c.verify.fd_step; }, 1e-12, 1.0));

        t.push_back(integer("mle.classes", [](auto& c) -> auto& { return c.mle.classes; }, 2, 64));
        t.push_back(integer("mle.target", [](auto& c) -> auto& { return c.mle.target; }, 0, 63));
        t.push_back(integer("mle.n", [](auto& c) -> auto& { return c.mle.n; }, 1, kMaxCount));
        t.push_back(integer("mle.trials", [](auto& c) -> auto& { return c.mle.trials; }, 2, kMaxCount));
        t.push_back(choice<Optimizer>("mle.optimizer", [](auto& c) -> auto& { return c.mle.fit.optimizer; },
                                      {{"fisher-scoring", Optimizer::fisher_scoring},
                                       {"gradient-ascent", Optimizer::gradient_ascent}}));
        t.push_back(integer("mle.max_iters", [](auto& c) -> auto& { return c.mle.fit.max_iters; }, 1, kMaxCount));
        t.push_back(real("mle.grad_tol", [](auto& c) -> auto& { return c.mle.fit.grad_tol; }, 0.0, kHuge));
        t.push_back(real("mle.ridge", [](auto& c) -> auto& { return c.mle.fit.ridge; }, 0.0, kHuge));
        t.push_back(real("mle.armijo", [](auto& c) -> auto& { return c.mle.fit.armijo; }, 1e-12, 0.5));
        t.push_back(integer("mle.max_backtracks", [](auto& c) -> auto& { return c.mle.fit.max_backtracks; }, 1, 1000));
        t.push_back(integer("mle.fisher_sample", [](auto& c) -> auto& { return c.mle.fisher_sample; }, 1, kMaxCount));
        t.push_back(integer("mle.bootstrap_resamples", [](auto& c) -> auto& { return c.mle.bootstrap_resamples; }, 1,
                            kMaxCount));
        t.push_back(real("mle.confidence", [](auto& c) -> auto& { return c.mle.confidence; }, 0.5, 0.999999));

        t.push_back(integer("scene.rows", [](auto& c) -> auto& { return c.scene.rows; }, 8, 4096));
        t.push_back(integer("scene.cols", [](auto& c) -> auto& { return c.scene.cols; }, 8, 4096));
        t.push_back(real("scene.organ_major_min", [](auto& c) -> auto& { return c.scene.organ_major_min; }, 0.5, 4096));
        t.push_back(real("scene.organ_major_max", [](auto& c) -> auto& { return c.scene.organ_major_max; }, 0.5, 4096));
        t.push_back(real("scene.organ_minor_min", [](auto& c) -> auto& { return c.scene.organ_minor_min; }, 0.5, 4096));
        t.push_back(real("scene.organ_minor_max", [](auto& c) -> auto& { return c.scene.organ_minor_max; }, 0.5, 4096));
        t.push_back(integer("scene.extra_organs", [](auto& c) -> auto& { return c.scene.extra_organs; }, 0, 60));
        t.push_back(integer("scene.lesion_min", [](auto& c) -> auto& { return c.scene.lesion_min; }, 0, 1000));
        t.push_back(integer("scene.lesion_max", [](auto& c) -> auto& { return c.scene.lesion_max; }, 0, 1000));
        t.push_back(real("scene.lesion_radius_min", [](auto& c) -> auto& { return c.scene.lesion_radius_min; }, 0.5,
                         4096));
        t.push_back(real("scene.lesion_radius_max", [](auto& c) -> auto& { return c.scene.lesion_radius_max; }, 0.5,
                         4096));
        t.push_back(choice<Placement>("scene.placement", [](auto& c) -> auto& { return c.scene.placement; },
                                      {{"inside", Placement::inside_organ}, {"adjacent", Placement::adjacent_to_organ}}));
        t.push_back(integer("scene.confuser_min", [](auto& c) -> auto& { return c.scene.confuser_min; }, 0, 1000));
        t.push_back(integer("scene.confuser_max", [](auto& c) -> auto& { return c.scene.confuser_max; }, 0, 1000));
        t.push_back(real("scene.confuser_mean", [](auto& c) -> auto& { return c.scene.confuser_mean; }, -kHuge, kHuge));
        t.push_back(real_list("scene.class_means", [](auto& c) -> auto& { return c.scene.class_means; }, -kHuge, kHuge));
        t.push_back(real_list("scene.class_sds", [](auto& c) -> auto& { return c.scene.class_sds; }, 0.0, kHuge));
        t.push_back(real("scene.noise", [](auto& c) -> auto& { return c.scene.noise; }, 0.0, kHuge));
        t.push_back(integer("scene.max_retries", [](auto& c) -> auto& { return c.scene.max_retries; }, 1, kMaxCount));

        t.push_back(choice<Architecture>("train.architecture", [](auto& c) -> auto& { return c.train.architecture; },
                                         {{"linear", Architecture::linear}, {"hidden", Architecture::hidden_layer}}));
        t.push_back(integer("train.hidden_width", [](auto& c) -> auto& { return c.train.hidden_width; }, 1, 4096));
        t.push_back(integer("train.epochs", [](auto& c) -> auto& { return c.train.epochs; }, 1, kMaxCount));
        t.push_back(integer("train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; }, 1, kMaxCount));
        t.push_back(real("train.learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }, 1e-300, kHuge));
        t.push_back(real("train.beta1", [](auto& c) -> auto& { return c.train.beta1; }, 0.0, 0.999999));
        t.push_back(real("train.beta2", [](auto& c) -> auto& { return c.train.beta2; }, 0.0, 0.999999999));
        t.push_back(real("train.adam_eps", [](auto& c) -> auto& { return c.train.adam_eps; }, 1e-300, kHuge));
        t.push_back(integer("train.pixels_per_image", [](auto& c) -> auto& { return c.train.pixels_per_image; }, 0,
                            kMaxCount));
        t.push_back(real("train.converge_tol", [](auto& c) -> auto& { return c.train.converge_tol; }, 0.0, kHuge));

        t.push_back(integer("segbench.train_scenes", [](auto& c) -> auto& { return c.segbench.train_scenes; }, 1,
                            100000));
        t.push_back(integer("segbench.test_scenes", [](auto& c) -> auto& { return c.segbench.test_scenes; }, 1, 100000));
        t.push_back({"segbench.schemes",
                     [](C& c, std::string_view v, int line) {
                         std::vector<LabelScheme> out;
                         for (auto item : split_list(v)) out.push_back(parse_scheme(item, "segbench.schemes", line));
                         c.segbench.schemes = out;
                     },
                     [](const C& c) {
                         std::string s;
                         for (const auto& scheme : c.segbench.schemes) s += (s.empty() ? "" : ", ") + scheme.name();
                         return s;
                     }});
        t.push_back(integer("segbench.seeds", [](auto& c) -> auto& { return c.segbench.seeds; }, 1, 100000));
        t.push_back(boolean("segbench.finetune", [](auto& c) -> auto& { return c.segbench.finetune; }));

        t.push_back(int_list("finetune.checkpoints", [](auto& c) -> auto& { return c.finetune.config.checkpoints; }, 1,
                             kMaxCount));
        t.push_back(real("finetune.lr_scale", [](auto& c) -> auto& { return c.finetune.config.lr_scale; }, 1e-300, kHuge));
        t.push_back({"finetune.target",
                     [](C& c, std::string_view v, int line) {
                         c.finetune.config.target = parse_scheme(v, "finetune.target", line);
                     },
                     [](const C& c) { return c.finetune.config.target.name(); }});
        t.push_back(integer("finetune.seeds", [](auto& c) -> auto& { return c.finetune.seeds; }, 1, 100000));

        t.push_back(real("metrics.tolerance", [](auto& c) -> auto& { return c.metrics.tolerance; }, 0.0, kHuge));
        t.push_back(choice<DistanceMethod>("metrics.method", [](auto& c) -> auto& { return c.metrics.method; },
                                           {{"auto", DistanceMethod::automatic},
                                            {"brute-force", DistanceMethod::brute_force},
                                            {"distance-transform", DistanceMethod::distance_transform}}));
        t.push_back(text("metrics.pred", [](auto& c) -> auto& { return c.metrics_eval.pred; }));
        t.push_back(text("metrics.gt", [](auto& c) -> auto& { return c.metrics_eval.gt; }));
        t.push_back(integer("metrics.target_class", [](auto& c) -> auto& { return c.metrics_eval.target_class; }, 0,
                            std::numeric_limits<int>::max()));
        t.push_back({"metrics.spacing",
                     [](C& c, std::string_view v, int line) {
                         const auto items = split_list(v);
                         if (items.size() != 2) mismatch(line, "metrics.spacing", "two reals 'row, col'", v);
                         c.metrics_eval.spacing = {parse_real(items[0], "metrics.spacing", line, 1e-300, kHuge),
                                                   parse_real(items[1], "metrics.spacing", line, 1e-300, kHuge)};
                     },
                     [](const C& c) {
                         return format_real(c.metrics_eval.spacing.row) + ", " + format_real(c.metrics_eval.spacing.col);
                     }});

        t.push_back(choice<SweepAxis>("sweep.axis", [](auto& c) -> auto& { return c.sweep.axis; }, kAxes));
        t.push_back(real_list("sweep.values", [](auto& c) -> auto& { return c.sweep.values; }, -kHuge, kHuge));
        return t;
    }();
    return table;
}

// Cross-key checks, reported at the last line that set a key of the offending section.
void validate(const ExperimentConfig& c, const std::map<std::string, int>& lines) {
    auto section_line = [&](std::initializer_list<std::string_view> prefixes) {
        int line = 0;
        for (const auto& [key, at] : lines)
            for (auto p : prefixes)
                if (key.rfind(p, 0) == 0) line = std::max(line, at);
        return line;
    };
    auto guard = [&](std::initializer_list<std::string_view> prefixes, const std::function<void()>& check) {
        try {
            check();
        } catch (const ConfigError&) {
            throw;
        } catch (const InvalidInput& e) {
            throw ConfigError(section_line(prefixes), e.what());
        }
    };
    guard({"scene."}, [&] { c.scene.validate(); });
    guard({"train."}, [&] { c.train.validate(); });
    guard({"mle."}, [&] {
        if (c.mle.target >= c.mle.classes) throw InvalidInput("mle.target must be below mle.classes");
    });
    guard({"segbench.", "scene."}, [&] {
        if (c.segbench.schemes.empty()) throw InvalidInput("segbench.schemes is empty");
        bench_config(c).validate();
    });
    guard({"finetune.", "scene."}, [&] {
        const auto& cp = c.finetune.config.checkpoints;
        for (std::size_t i = 1; i < cp.size(); ++i)
            if (cp[i] <= cp[i - 1]) throw InvalidInput("finetune.checkpoints must be increasing");
        c.finetune.config.target.class_count(c.scene.class_count());
    });
    guard({"sweep.", "scene."}, [&] {
        const auto& v = c.sweep.values;
        if (v.empty()) throw InvalidInput("sweep.values is empty");
        for (std::size_t i = 0; i < v.size(); ++i) {
            const bool whole = v[i] == std::floor(v[i]);
            switch (c.sweep.axis) {
                case SweepAxis::aux_fraction:
                    if (v[i] < 0.0 || v[i] > 1.0) throw InvalidInput("aux_fraction values must lie in [0, 1]");
                    break;
                case SweepAxis::aux_count:
                    if (!whole || v[i] < 0.0 || v[i] > c.scene.class_count() - 2) {
                        throw InvalidInput("aux_count values must be integers in [0, " +
                                           std::to_string(c.scene.class_count() - 2) + "]");
                    }
                    break;
                case SweepAxis::n:
                    if (!whole || v[i] < 1.0 || v[i] > static_cast<double>(kMaxCount)) {
                        throw InvalidInput("n values must be positive integers");
                    }
                    break;
                case SweepAxis::epochs:
                    if (!whole || v[i] < 1.0 || v[i] > static_cast<double>(kMaxCount) || (i > 0 && v[i] <= v[i - 1])) {
                        throw InvalidInput("epochs values must be increasing positive integers");
                    }
                    break;
            }
        }
        for (std::size_t i = 0; i < v.size(); ++i)
            for (std::size_t j = i + 1; j < v.size(); ++j)
                if (v[i] == v[j]) throw InvalidInput("sweep.values has duplicates");
    });
}

}  // namespace

std::string to_string(ExperimentKind kind) {
    for (const auto& [name, value] : kKinds)
        if (value == kind) return name;
    return "unknown";
}

std::string to_string(SweepAxis axis) {
    for (const auto& [name, value] : kAxes)
        if (value == axis) return name;
    return "unknown";
}

ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig cfg;
    std::map<std::string, int> lines;
    std::size_t start = 0;
    int line_no = 0;
    while (start <= text.size()) {
        const auto nl = text.find('\n', start);
        std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
        start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(line_no, "expected 'key = value'");
        const std::string key(trim(line.substr(0, eq)));
        const std::string_view value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(line_no, "missing key before '='");
        const auto& table = entries();
        const auto it = std::find_if(table.begin(), table.end(), [&](const Entry& e) { return e.key == key; });
        if (it == table.end()) throw ConfigError(line_no, "unknown key '" + key + "'");
        if (const auto seen = lines.find(key); seen != lines.end()) {
            throw ConfigError(line_no, "duplicate key '" + key + "' (lines " + std::to_string(seen->second) + " and " +
                                           std::to_string(line_no) + ")");
        }
        lines[key] = line_no;
        it->set(cfg, value, line_no);
    }
    if (!lines.count("kind")) throw ConfigError(std::max(1, line_no - 1), "missing required key 'kind' at end of input");
    validate(cfg, lines);
    return cfg;
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::string out;
    for (const Entry& e : entries()) out += e.key + " = " + e.get(cfg) + "\n";
    return out;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    if (in.bad()) throw IoError("error reading config " + path.string());
    return parse_config(text.str());
}

ExperimentConfig default_config(ExperimentKind kind) {
    ExperimentConfig cfg;
    cfg.kind = kind;
    return cfg;
}

std::vector<std::uint64_t> resolve_seeds(std::uint64_t master, std::string_view stream, int count) {
    std::vector<std::uint64_t> out;
    for (int i = 0; i < count; ++i) out.push_back(derive_seed(master, stream, static_cast<std::uint64_t>(i)));
    return out;
}

BenchConfig bench_config(const ExperimentConfig& cfg) {
    BenchConfig b;
    b.scene = cfg.scene;
    b.train_scenes = cfg.segbench.train_scenes;
    b.test_scenes = cfg.segbench.test_scenes;
    b.schemes = cfg.segbench.schemes;
    b.seeds = resolve_seeds(cfg.seed, "segbench", cfg.segbench.seeds);
    b.train = cfg.train;
    b.metrics = cfg.metrics;
    return b;
}

BenchConfig finetune_bench_config(const ExperimentConfig& cfg) {
    BenchConfig b = bench_config(cfg);
    b.schemes = {LabelScheme::binary()};
    b.seeds = resolve_seeds(cfg.seed, "finetune", cfg.finetune.seeds);
    return b;
}

}  // namespace coarsegrain
