#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "coarsegrain/error.hpp"
#include "coarsegrain/rng.hpp"
#include "coarsegrain/segbench.hpp"

using namespace coarsegrain;

namespace {

SceneConfig small_scene() {
    SceneConfig s;
    s.rows = 48;
    s.cols = 48;
    s.organ_major_min = 7.0;
    s.organ_major_max = 10.0;
    s.organ_minor_min = 6.0;
    s.organ_minor_max = 8.0;
    s.lesion_radius_min = 1.5;
    s.lesion_radius_max = 2.5;
    return s;
}

std::vector<LabeledImage> scenes(const SceneConfig& cfg, int count, std::uint64_t seed) {
    std::vector<LabeledImage> out;
    for (int i = 0; i < count; ++i) out.push_back(generate_scene(cfg, derive_seed(seed, "test-scene", i)));
    return out;
}

TrainConfig quick_train() {
    TrainConfig t;
    t.epochs = 4;
    t.pixels_per_image = 600;
    return t;
}

std::set<int> label_set(const LabelGrid& g) { return {g.labels.begin(), g.labels.end()}; }

bool touches(const LabelGrid& g, int r, int c, int label) {
    const int dr[4] = {-1, 1, 0, 0};
    const int dc[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
        const int rr = r + dr[k], cc = c + dc[k];
        if (rr >= 0 && cc >= 0 && rr < g.rows && cc < g.cols && g.at(rr, cc) == label) return true;
    }
    return false;
}

// Direct window sums with clamped coordinates.
std::vector<double> naive_features(const LabeledImage& img, int r, int c) {
    std::vector<double> f{img.intensity(r, c)};
    for (int half : {1, 3}) {
        double s = 0.0, s2 = 0.0;
        for (int dr = -half; dr <= half; ++dr) {
            for (int dc = -half; dc <= half; ++dc) {
                const double v =
                    img.intensity(std::clamp(r + dr, 0, img.rows - 1), std::clamp(c + dc, 0, img.cols - 1));
                s += v;
                s2 += v * v;
            }
        }
        const double n = (2.0 * half + 1) * (2.0 * half + 1);
        f.push_back(s / n);
        f.push_back(std::max(0.0, s2 / n - (s / n) * (s / n)));
    }
    f.push_back(static_cast<double>(r) / (img.rows - 1));
    f.push_back(static_cast<double>(c) / (img.cols - 1));
    return f;
}

}  // namespace

TEST_CASE("scene generation is deterministic in the seed") {
    const SceneConfig cfg;
    const LabeledImage a = generate_scene(cfg, 17);
    const LabeledImage b = generate_scene(cfg, 17);
    CHECK(a.labels == b.labels);
    CHECK(a.intensities == b.intensities);
    const LabeledImage c = generate_scene(cfg, 18);
    CHECK_FALSE(a.intensities == c.intensities);
    CHECK(a.rows == 96);
    CHECK(a.intensities.size() == 96U * 96U);
}

TEST_CASE("default scenes contain every structure") {
    const SceneConfig cfg;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const LabeledImage img = generate_scene(cfg, seed);
        CHECK(label_set(img.labels) == std::set<int>{0, 1, 2, 3, 4});
        CHECK(img.class_count() == cfg.class_count());
    }
}

TEST_CASE("zero-lesion scenes have no lesion pixels") {
    SceneConfig cfg;
    cfg.lesion_min = cfg.lesion_max = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const LabeledImage img = generate_scene(cfg, seed);
        CHECK(std::count(img.labels.labels.begin(), img.labels.labels.end(), 1) == 0);
    }
}

TEST_CASE("lesions occupy under two percent of the image") {
    const SceneConfig cfg;
    double lesion = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const LabeledImage img = generate_scene(cfg, seed);
        lesion += static_cast<double>(std::count(img.labels.labels.begin(), img.labels.labels.end(), 1)) /
                  static_cast<double>(img.labels.labels.size());
    }
    CHECK(lesion / 100.0 < 0.02);
    CHECK(lesion > 0.0);
}

TEST_CASE("inside lesions are surrounded by the host organ") {
    SceneConfig cfg;
    cfg.noise = 0.0;
    cfg.confuser_min = cfg.confuser_max = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const LabeledImage img = generate_scene(cfg, seed);
        for (int r = 0; r < img.rows; ++r) {
            for (int c = 0; c < img.cols; ++c) {
                if (img.labels.at(r, c) != 1) continue;
                CHECK_FALSE(touches(img.labels, r, c, 3));
                CHECK_FALSE(touches(img.labels, r, c, 4));
            }
        }
    }
}

TEST_CASE("adjacent lesions sit in the background next to the host organ") {
    SceneConfig cfg;
    cfg.placement = Placement::adjacent_to_organ;
    int adjacent = 0, lesion_pixels = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const LabeledImage img = generate_scene(cfg, seed);
        for (int r = 0; r < img.rows; ++r) {
            for (int c = 0; c < img.cols; ++c) {
                if (img.labels.at(r, c) != 1) continue;
                ++lesion_pixels;
                adjacent += touches(img.labels, r, c, 2);
            }
        }
    }
    CHECK(lesion_pixels > 0);
    CHECK(adjacent > 0);
}

TEST_CASE("noise-free intensities equal the class means") {
    SceneConfig cfg;
    cfg.noise = 0.0;
    const LabeledImage img = generate_scene(cfg, 3);
    int confuser = 0;
    for (std::size_t i = 0; i < img.intensities.size(); ++i) {
        const int k = img.labels.labels[i];
        const double v = img.intensities[i];
        if (k == 3 && v == cfg.confuser_mean) {
            ++confuser;
            continue;
        }
        CHECK(v == cfg.class_means[static_cast<std::size_t>(k)]);
    }
    CHECK(confuser > 0);
}

TEST_CASE("extra organs reuse the last intensity entry") {
    SceneConfig cfg;
    cfg.noise = 0.0;
    cfg.extra_organs = 2;
    cfg.rows = cfg.cols = 128;
    const LabeledImage img = generate_scene(cfg, 5);
    CHECK(img.class_count() == 6);
    for (std::size_t i = 0; i < img.intensities.size(); ++i)
        if (img.labels.labels[i] == 5) CHECK(img.intensities[i] == 0.5);
}

TEST_CASE("impossible structures raise GenerationError") {
    SceneConfig cfg = small_scene();
    cfg.lesion_radius_min = 9.0;
    cfg.lesion_radius_max = 9.5;
    cfg.max_retries = 20;
    CHECK_THROWS_AS(generate_scene(cfg, 1), GenerationError);
}

TEST_CASE("scene config validation") {
    SceneConfig cfg;
    cfg.lesion_min = 3;
    cfg.lesion_max = 2;
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = SceneConfig{};
    cfg.noise = -1.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = SceneConfig{};
    cfg.organ_major_max = 60.0;
    CHECK_THROWS_AS(generate_scene(cfg, 0), InvalidInput);
}

TEST_CASE("scene files round-trip exactly") {
    const LabeledImage img = generate_scene(small_scene(), 9);
    std::stringstream a, b;
    write_scene(a, b, img);
    const LabeledImage back = read_scene(a, b);
    CHECK(back.labels == img.labels);
    CHECK(back.intensities == img.intensities);

    std::stringstream bad_i("1 2\n3\n"), bad_l("0 0\n0 0\n");
    CHECK_THROWS_AS(read_scene(bad_i, bad_l), IoError);
    std::stringstream junk_i("1 x\n3 4\n"), junk_l("0 0\n0 0\n");
    CHECK_THROWS_AS(read_scene(junk_i, junk_l), IoError);
}

TEST_CASE("features match direct window sums") {
    SceneConfig cfg = small_scene();
    const LabeledImage img = generate_scene(cfg, 21);
    const Matrix F = extract_features(img);
    REQUIRE(F.rows() == img.rows * img.cols);
    REQUIRE(F.cols() == kFeatureDim);
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            const auto expect = naive_features(img, r, c);
            for (int j = 0; j < kFeatureDim; ++j) {
                CHECK(F(r * img.cols + c, j) == doctest::Approx(expect[static_cast<std::size_t>(j)]).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("scheme names round-trip through parse") {
    const std::vector<LabelScheme> all{LabelScheme::binary(),     LabelScheme::backsplit(),
                                       LabelScheme::virtual_class(), LabelScheme::partial(0.25),
                                       LabelScheme::aux_sweep(2)};
    for (LabelScheme s : all) {
        CHECK(LabelScheme::parse(s.name()) == s);
        s.boundary_noise = true;
        CHECK(LabelScheme::parse(s.name()) == s);
    }
    CHECK(LabelScheme::partial(0.5).name() == "partial:0.5");
    CHECK(LabelScheme::aux_sweep(1).name() == "aux:1");
    CHECK_THROWS_AS(LabelScheme::parse("backslpit"), InvalidInput);
    CHECK_THROWS_AS(LabelScheme::parse("partial:x"), InvalidInput);
    CHECK_THROWS_AS(LabelScheme::parse("partial:1.5"), InvalidInput);
    CHECK_THROWS_AS(LabelScheme::parse("aux:1.5"), InvalidInput);
    CHECK_THROWS_AS(LabelScheme::parse("binary+blur"), InvalidInput);
}

TEST_CASE("scheme channel counts") {
    CHECK(LabelScheme::binary().class_count(5) == 2);
    CHECK(LabelScheme::backsplit().class_count(5) == 5);
    CHECK(LabelScheme::virtual_class().class_count(5) == 3);
    CHECK(LabelScheme::partial(0.0).class_count(5) == 2);
    CHECK(LabelScheme::partial(0.3).class_count(5) == 5);
    for (int k = 0; k <= 3; ++k) CHECK(LabelScheme::aux_sweep(k).class_count(5) == 2 + k);
    CHECK_THROWS_AS(LabelScheme::aux_sweep(4).class_count(5), InvalidInput);
}

TEST_CASE("schemes produce the documented label sets") {
    const LabeledImage img = generate_scene(SceneConfig{}, 4);
    CHECK(label_set(apply_scheme(img, LabelScheme::binary(), 5, 0, 0).labels) == std::set<int>{0, 1});
    CHECK(label_set(apply_scheme(img, LabelScheme::virtual_class(), 5, 0, 0).labels) == std::set<int>{0, 1});
    CHECK(apply_scheme(img, LabelScheme::backsplit(), 5, 0, 0).labels == img.labels);
    for (int k = 0; k <= 3; ++k) {
        std::set<int> expect{0, 1};
        for (int j = 0; j < k; ++j) expect.insert(2 + j);
        CHECK(label_set(apply_scheme(img, LabelScheme::aux_sweep(k), 5, 0, 0).labels) == expect);
    }
    // The lesion never moves.
    const LabeledImage binary = apply_scheme(img, LabelScheme::binary(), 5, 0, 0);
    for (std::size_t i = 0; i < img.labels.labels.size(); ++i)
        CHECK((binary.labels.labels[i] == 1) == (img.labels.labels[i] == 1));

    LabeledImage bad = img;
    bad.labels.labels[0] = 7;
    CHECK_THROWS_AS(apply_scheme(bad, LabelScheme::binary(), 5, 0, 0), InvalidInput);
}

TEST_CASE("partial labeling keeps roughly the requested fraction") {
    const LabeledImage img = generate_scene(small_scene(), 2);
    int kept = 0;
    for (int i = 0; i < 2000; ++i) kept += apply_scheme(img, LabelScheme::partial(0.3), 5, 11, i).labels == img.labels;
    CHECK(kept / 2000.0 == doctest::Approx(0.3).epsilon(0.1));
    for (int i = 0; i < 50; ++i) {
        CHECK(apply_scheme(img, LabelScheme::partial(0.0), 5, 11, i).labels ==
              apply_scheme(img, LabelScheme::binary(), 5, 11, i).labels);
        CHECK(apply_scheme(img, LabelScheme::partial(1.0), 5, 11, i).labels == img.labels);
    }
}

TEST_CASE("boundary noise moves only auxiliary borders by one pixel") {
    const LabeledImage img = generate_scene(SceneConfig{}, 8);
    LabelScheme noisy = LabelScheme::backsplit();
    noisy.boundary_noise = true;
    const LabeledImage a = apply_scheme(img, noisy, 5, 3, 0);
    CHECK(a.labels == apply_scheme(img, noisy, 5, 3, 0).labels);
    bool changed = false;
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            const int before = img.labels.at(r, c);
            const int after = a.labels.at(r, c);
            if (before == after) continue;
            changed = true;
            CHECK(before != 1);
            CHECK(after != 1);
            CHECK((before == 0 || after == 0));
            const int id = before == 0 ? after : before;
            CHECK(touches(img.labels, r, c, before == 0 ? id : 0));
        }
    }
    CHECK(changed);
}

TEST_CASE("training config validation") {
    TrainConfig t;
    t.epochs = 0;
    CHECK_THROWS_AS(t.validate(), InvalidInput);
    t = TrainConfig{};
    t.beta2 = 1.0;
    CHECK_THROWS_AS(t.validate(), InvalidInput);
    t = TrainConfig{};
    t.learning_rate = 0.0;
    CHECK_THROWS_AS(t.validate(), InvalidInput);
    CHECK_THROWS_AS(train_segmenter({}, LabelScheme::binary(), 5, TrainConfig{}, 0), InvalidInput);
}

TEST_CASE("separable scenes are segmented almost perfectly") {
    SceneConfig cfg = small_scene();
    cfg.noise = 0.0;
    cfg.confuser_min = cfg.confuser_max = 0;
    const auto train = scenes(cfg, 6, 1);
    TrainConfig t;
    t.epochs = 40;
    const Segmenter seg = train_segmenter(train, LabelScheme::backsplit(), 5, t, 4);
    long correct = 0, total = 0;
    for (const auto& img : scenes(cfg, 4, 2)) {
        const LabelGrid pred = predict_labels(seg, img);
        for (std::size_t i = 0; i < pred.labels.size(); ++i) correct += pred.labels[i] == img.labels.labels[i];
        total += static_cast<long>(pred.labels.size());
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.99);
}

TEST_CASE("separable scenes give exact lesion masks") {
    // The lesion mean lies between the two organ means, so a single binary logit cannot
    // separate it; the backsplit softmax can.
    SceneConfig cfg = small_scene();
    cfg.noise = 0.0;
    cfg.confuser_min = cfg.confuser_max = 0;
    const auto train = scenes(cfg, 6, 1);
    const auto test = scenes(cfg, 4, 2);
    TrainConfig linear;
    linear.epochs = 200;
    TrainConfig hidden;
    hidden.architecture = Architecture::hidden_layer;
    hidden.hidden_width = 16;
    hidden.epochs = 40;
    for (const TrainConfig& t : {linear, hidden}) {
        const Segmenter seg = train_segmenter(train, LabelScheme::backsplit(), 5, t, 4);
        int exact = 0;
        for (const auto& img : test) exact += predict_mask(seg, img) == BinaryMask::from_labels(img.labels, 1);
        INFO("epochs " << t.epochs);
        CHECK(exact == 4);
    }
}

TEST_CASE("class probabilities agree with the argmax") {
    const auto train = scenes(small_scene(), 3, 15);
    const Segmenter seg = train_segmenter(train, LabelScheme::backsplit(), 5, quick_train(), 2);
    const LabeledImage img = generate_scene(small_scene(), 99);
    const Matrix P = predict_probabilities(seg, img);
    const LabelGrid pred = predict_labels(seg, img);
    REQUIRE(P.rows() == img.rows * img.cols);
    REQUIRE(P.cols() == 5);
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
        CHECK(std::abs(P.row(i).sum() - 1.0) < 1e-12);
        Eigen::Index best = 0;
        P.row(i).maxCoeff(&best);
        CHECK(best == pred.labels[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("collapsed backsplit fits the binary labels better than binary training") {
    // Binary cross-entropy on the training pixels, with the backsplit model scored through
    // its lesion probability. The collapsed softmax can express the confuser/host contrast
    // that a single binary logit cannot.
    TrainConfig t = quick_train();
    t.epochs = 15;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto train = scenes(small_scene(), 4, 100 + seed);
        const Segmenter bin = train_segmenter(train, LabelScheme::binary(), 5, t, seed);
        const Segmenter bs = train_segmenter(train, LabelScheme::backsplit(), 5, t, seed);
        auto binary_loss = [&](const Segmenter& seg) {
            double total = 0.0;
            long count = 0;
            for (const auto& img : train) {
                const Matrix P = predict_probabilities(seg, img);
                for (Eigen::Index i = 0; i < P.rows(); ++i) {
                    const double q = P(i, 1);
                    const bool lesion = img.labels.labels[static_cast<std::size_t>(i)] == 1;
                    total -= std::log(std::max(lesion ? q : 1.0 - q, 1e-300));
                    ++count;
                }
            }
            return total / static_cast<double>(count);
        };
        INFO("seed " << seed);
        CHECK(binary_loss(bs) < binary_loss(bin));
    }
}

TEST_CASE("training is deterministic and reports epochs") {
    const auto train = scenes(small_scene(), 3, 5);
    std::vector<int> seen;
    const Segmenter a = train_segmenter(train, LabelScheme::backsplit(), 5, quick_train(), 7, std::nullopt,
                                        [&](int epoch, const Segmenter& s) {
                                            seen.push_back(epoch);
                                            CHECK(s.epochs == epoch);
                                        });
    const Segmenter b = train_segmenter(train, LabelScheme::backsplit(), 5, quick_train(), 7);
    CHECK(a.theta.values() == b.theta.values());
    CHECK(seen == std::vector<int>{1, 2, 3, 4});
    CHECK(a.epochs == 4);
    CHECK(a.model.class_count() == 5);
    CHECK(std::isfinite(a.loss));
    const Segmenter c = train_segmenter(train, LabelScheme::backsplit(), 5, quick_train(), 8);
    CHECK_FALSE(a.theta.values() == c.theta.values());
}

TEST_CASE("partial at the extremes trains bit-identically to binary and backsplit") {
    const auto train = scenes(small_scene(), 4, 6);
    for (Architecture arch : {Architecture::linear, Architecture::hidden_layer}) {
        TrainConfig t = quick_train();
        t.architecture = arch;
        const Segmenter p0 = train_segmenter(train, LabelScheme::partial(0.0), 5, t, 3);
        const Segmenter bin = train_segmenter(train, LabelScheme::binary(), 5, t, 3);
        const Segmenter p1 = train_segmenter(train, LabelScheme::partial(1.0), 5, t, 3);
        const Segmenter bs = train_segmenter(train, LabelScheme::backsplit(), 5, t, 3);
        CHECK(p0.theta.values() == bin.theta.values());
        CHECK(p1.theta.values() == bs.theta.values());
        CHECK(p0.feature_mean == bin.feature_mean);
    }
}

TEST_CASE("the virtual channel carries no labeled pixels and rarely wins") {
    const auto train = scenes(small_scene(), 4, 9);
    const Segmenter seg = train_segmenter(train, LabelScheme::virtual_class(), 5, quick_train(), 1);
    CHECK(seg.model.class_count() == 3);
    long wins = 0, total = 0;
    for (const auto& img : scenes(small_scene(), 3, 10)) {
        const LabelGrid pred = predict_labels(seg, img);
        wins += std::count(pred.labels.begin(), pred.labels.end(), 2);
        total += static_cast<long>(pred.labels.size());
    }
    CHECK(static_cast<double>(wins) / static_cast<double>(total) < 0.001);
}

TEST_CASE("hidden-layer training lowers the loss") {
    const auto train = scenes(small_scene(), 3, 12);
    TrainConfig t = quick_train();
    t.architecture = Architecture::hidden_layer;
    t.epochs = 6;
    std::vector<double> losses;
    train_segmenter(train, LabelScheme::backsplit(), 5, t, 2, std::nullopt,
                    [&](int, const Segmenter& s) { losses.push_back(s.loss); });
    CHECK(losses.back() < losses.front());
    CHECK(losses.front() < std::log(5.0));
}

TEST_CASE("warm start copies the binary channels") {
    const auto train = scenes(small_scene(), 3, 13);
    const TrainConfig t = quick_train();
    const Segmenter base = train_segmenter(train, LabelScheme::binary(), 5, t, 1);
    TrainConfig one = t;
    one.epochs = 1;
    const Segmenter tuned =
        train_segmenter(train, LabelScheme::backsplit(), 5, one, 1, WarmStart{&base, 1e-12});
    const Vector& b = base.theta.values();
    const Vector& w = tuned.theta.values();
    for (int i = 0; i < b.size(); ++i) CHECK(w[i] == doctest::Approx(b[i]).epsilon(1e-6));
    for (int i = static_cast<int>(b.size()); i < w.size(); ++i) CHECK(std::abs(w[i]) < 1e-6);
    CHECK(tuned.feature_mean == base.feature_mean);
    CHECK(tuned.feature_scale == base.feature_scale);

    const Segmenter bs = train_segmenter(train, LabelScheme::backsplit(), 5, t, 1);
    CHECK_THROWS_AS(train_segmenter(train, LabelScheme::backsplit(), 5, one, 1, WarmStart{&bs}), InvalidInput);
    CHECK_THROWS_AS(train_segmenter(train, LabelScheme::backsplit(), 5, one, 1, WarmStart{&base, 0.0}),
                    InvalidInput);
    TrainConfig hidden = one;
    hidden.architecture = Architecture::hidden_layer;
    CHECK_THROWS_AS(train_segmenter(train, LabelScheme::backsplit(), 5, hidden, 1, WarmStart{&base}), InvalidInput);
}

TEST_CASE("hidden-layer warm start keeps the hidden layer and binary heads") {
    const auto train = scenes(small_scene(), 2, 14);
    TrainConfig t = quick_train();
    t.architecture = Architecture::hidden_layer;
    const Segmenter base = train_segmenter(train, LabelScheme::binary(), 5, t, 1);
    t.epochs = 1;
    const Segmenter tuned = train_segmenter(train, LabelScheme::backsplit(), 5, t, 1, WarmStart{&base, 1e-12});
    // The binary heads still pick the same pixels as lesion.
    for (const auto& img : scenes(small_scene(), 2, 15)) {
        CHECK(predict_mask(tuned, img) == predict_mask(base, img));
    }
}

TEST_CASE("runaway learning rates raise NumericalError") {
    const auto train = scenes(small_scene(), 2, 16);
    TrainConfig t = quick_train();
    t.learning_rate = 1e308;
    CHECK_THROWS_AS(train_segmenter(train, LabelScheme::backsplit(), 5, t, 1), NumericalError);
}

TEST_CASE("sign test tail probabilities") {
    CHECK(sign_test_p(10, 0) == doctest::Approx(1.0 / 1024.0).epsilon(1e-12));
    CHECK(sign_test_p(9, 1) == doctest::Approx(11.0 / 1024.0).epsilon(1e-12));
    CHECK(sign_test_p(0, 5) == doctest::Approx(1.0));
    CHECK(sign_test_p(0, 0) == 1.0);
    CHECK(sign_test_p(3, 3) == doctest::Approx(42.0 / 64.0).epsilon(1e-12));
}

TEST_CASE("benchmark runs are independent of the job count") {
    BenchConfig cfg;
    cfg.scene = small_scene();
    cfg.train_scenes = 3;
    cfg.test_scenes = 2;
    cfg.seeds = {0, 1, 2};
    cfg.train = quick_train();
    cfg.schemes = {LabelScheme::binary(), LabelScheme::backsplit(), LabelScheme::partial(0.0)};
    const BenchReport a = run_benchmark(cfg, 1);
    const BenchReport b = run_benchmark(cfg, 4);
    std::ostringstream ra, rb, sa, sb, da, db;
    write_runs_csv(ra, a);
    write_runs_csv(rb, b);
    write_summary_csv(sa, a);
    write_summary_csv(sb, b);
    write_deltas_csv(da, a);
    write_deltas_csv(db, b);
    CHECK(ra.str() == rb.str());
    CHECK(sa.str() == sb.str());
    CHECK(da.str() == db.str());
    CHECK(ra.str().rfind("scheme,seed,mean_dice,mean_hd95,mean_nsd,epochs,converged\n", 0) == 0);
    REQUIRE(a.runs.size() == 9);
    CHECK(a.runs[0].scheme == "binary");
    CHECK(a.runs[3].scheme == "backsplit");
    CHECK(a.deltas.size() == 3);
    for (std::uint64_t s : cfg.seeds) CHECK(a.run("binary", s).mean_dice == a.run("partial:0", s).mean_dice);
    const SchemeDelta& d = a.delta("binary", "partial:0");
    CHECK(d.ties == 3);
    CHECK(d.dice_delta == 0.0);
    CHECK(a.summary("binary").runs == 3);
    CHECK_THROWS_AS(a.summary("virtual"), InvalidInput);
}

TEST_CASE("benchmark config validation") {
    BenchConfig cfg;
    cfg.schemes = {LabelScheme::binary(), LabelScheme::binary()};
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = BenchConfig{};
    cfg.seeds.clear();
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = BenchConfig{};
    cfg.schemes = {LabelScheme::aux_sweep(4)};
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
}

TEST_CASE("fine-tune reports every checkpoint") {
    BenchConfig cfg;
    cfg.scene = small_scene();
    cfg.train_scenes = 2;
    cfg.test_scenes = 2;
    cfg.seeds = {0, 1};
    cfg.train = quick_train();
    FineTuneConfig ft;
    ft.checkpoints = {1, 3};
    const FineTuneReport a = run_finetune(cfg, ft, 1);
    const FineTuneReport b = run_finetune(cfg, ft, 2);
    std::ostringstream oa, ob;
    write_finetune_csv(oa, a);
    write_finetune_csv(ob, b);
    CHECK(oa.str() == ob.str());
    CHECK(a.epochs == std::vector<int>{0, 1, 3});
    REQUIRE(a.points.size() == 6);
    CHECK(a.points[0].epoch == 0);
    CHECK(a.points[2].epoch == 3);
    CHECK(a.points[3].seed == 1);
    // The starting point is the binary benchmark run of the same seed.
    cfg.schemes = {LabelScheme::binary()};
    const BenchReport bench = run_benchmark(cfg, 1);
    CHECK(a.points[0].mean_dice == bench.run("binary", 0).mean_dice);

    ft.checkpoints = {3, 3};
    CHECK_THROWS_AS(run_finetune(cfg, ft, 1), InvalidInput);
}
