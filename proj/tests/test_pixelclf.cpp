#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "polarpath/pixelclf.hpp"

using namespace polarpath;

namespace {

// Three well-separated Gaussian blobs in 2-D.
void make_blobs(std::size_t per_class, uint64_t seed, Matrix& x, std::vector<int>& y) {
    const double centers[3][2] = {{0.0, 0.0}, {6.0, 0.0}, {0.0, 6.0}};
    Rng rng(seed);
    x = Matrix(3 * per_class, 2);
    y.resize(3 * per_class);
    for (std::size_t i = 0; i < 3 * per_class; ++i) {
        const std::size_t c = i % 3;
        x(i, 0) = centers[c][0] + 0.3 * rng.normal();
        x(i, 1) = centers[c][1] + 0.3 * rng.normal();
        y[i] = static_cast<int>(c);
    }
}

double accuracy(const gbdt::GbdtModel& model, const Matrix& x, const std::vector<int>& y) {
    const Matrix p = gbdt::predict_proba(model, x);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.cols; ++c)
            if (p(i, c) > p(i, best)) best = c;
        hits += static_cast<int>(best) == y[i];
    }
    return static_cast<double>(hits) / static_cast<double>(x.rows);
}

gbdt::GbdtConfig fast_config() {
    gbdt::GbdtConfig cfg;
    cfg.rounds = 20;
    cfg.max_depth = 3;
    return cfg;
}

}  // namespace

TEST_CASE("booster separates well-separated blobs perfectly") {
    Matrix x;
    std::vector<int> y;
    make_blobs(40, 11, x, y);
    const auto model = gbdt::fit(x, y, {1.0, 1.0, 1.0}, fast_config());
    REQUIRE(accuracy(model, x, y) == 1.0);
}

TEST_CASE("booster memorizes a small noisy sample given capacity") {
    Rng rng(5);
    Matrix x(24, 3);
    std::vector<int> y(24);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t j = 0; j < 3; ++j) x(i, j) = rng.normal();
        y[i] = static_cast<int>(i % 2);
    }
    auto cfg = fast_config();
    cfg.rounds = 120;
    cfg.max_depth = 6;
    cfg.learning_rate = 0.4;
    const auto model = gbdt::fit(x, y, {1.0, 1.0}, cfg);
    REQUIRE(accuracy(model, x, y) == 1.0);
}

TEST_CASE("uniformly scaling class weights leaves the model unchanged") {
    Matrix x;
    std::vector<int> y;
    make_blobs(15, 3, x, y);
    const auto a = gbdt::fit(x, y, {1.0, 1.0, 1.0}, fast_config());
    const auto b = gbdt::fit(x, y, {2.0, 2.0, 2.0}, fast_config());
    const Matrix pa = gbdt::predict_proba(a, x);
    const Matrix pb = gbdt::predict_proba(b, x);
    REQUIRE(pa.v == pb.v);
}

TEST_CASE("zero-round model predicts uniform probabilities") {
    Matrix x;
    std::vector<int> y;
    make_blobs(5, 1, x, y);
    auto cfg = fast_config();
    cfg.rounds = 0;
    const auto model = gbdt::fit(x, y, {1.0, 1.0, 1.0}, cfg);
    const Matrix p = gbdt::predict_proba(model, x);
    for (double v : p.v) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
}

TEST_CASE("training log loss is non-increasing across rounds") {
    Rng rng(17);
    Matrix x(60, 4);
    std::vector<int> y(60);
    for (std::size_t i = 0; i < x.rows; ++i) {
        y[i] = static_cast<int>(i % 3);
        for (std::size_t j = 0; j < 4; ++j) x(i, j) = rng.normal() + (j == 0 ? 1.5 * y[i] : 0.0);
    }
    const auto model = gbdt::fit(x, y, {1.0, 1.0, 1.0}, fast_config());

    auto prefix = model;
    prefix.trees.clear();
    double prev = gbdt::train_log_loss(prefix, x, y);
    for (const auto& round : model.trees) {
        prefix.trees.push_back(round);
        const double cur = gbdt::train_log_loss(prefix, x, y);
        REQUIRE(cur <= prev + 1e-9);
        prev = cur;
    }
}

TEST_CASE("missing class in the labels is a degenerate-class error") {
    Matrix x(4, 1);
    std::vector<int> y = {0, 0, 0, 0};
    REQUIRE_THROWS_AS(gbdt::fit(x, y, {1.0, 1.0}, fast_config()), DegenerateClassError);
}

TEST_CASE("all split gain lands on the single informative feature") {
    Rng rng(23);
    Matrix x(80, 5);
    std::vector<int> y(80);
    for (std::size_t i = 0; i < x.rows; ++i) {
        y[i] = static_cast<int>(i % 2);
        for (std::size_t j = 0; j < 5; ++j) x(i, j) = rng.normal();
        x(i, 2) += y[i] * 10.0;
    }
    const auto fi = gbdt::feature_importance(gbdt::fit(x, y, {1.0, 1.0}, fast_config()));
    REQUIRE(fi.ranking.front() == 2);
    REQUIRE(fi.gains[2] > 0.95);
    double total = 0.0;
    for (double g : fi.gains) total += g;
    REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("pure-noise labels yield near-uniform importance, never a crash") {
    Rng rng(29);
    Matrix x(40, 3);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t j = 0; j < 3; ++j) x(i, j) = rng.normal();
        y[i] = static_cast<int>(rng.uniform_index(2));
    }
    if (std::count(y.begin(), y.end(), 0) == 0 || std::count(y.begin(), y.end(), 1) == 0) y[0] = 1 - y[0];
    const auto fi = gbdt::feature_importance(gbdt::fit(x, y, {1.0, 1.0}, fast_config()));
    for (double g : fi.gains) REQUIRE(g < 0.9);
}

TEST_CASE("model JSON round-trip preserves predictions bit-exactly") {
    Matrix x;
    std::vector<int> y;
    make_blobs(10, 9, x, y);
    const auto model = gbdt::fit(x, y, {1.0, 1.2, 0.8}, fast_config());
    const auto path = std::filesystem::temp_directory_path() / "polarpath_gbdt.json";
    gbdt::save_model(model, path);
    const auto loaded = gbdt::load_model(path);
    REQUIRE(gbdt::predict_proba(loaded, x).v == gbdt::predict_proba(model, x).v);
    std::filesystem::remove(path);
}

TEST_CASE("cross-validated probabilities are stochastic-matrix rows") {
    Matrix x;
    std::vector<int> y;
    make_blobs(12, 41, x, y);
    const Matrix p = pixelclf::cross_val_proba(x, y, 4, 2, fast_config());
    REQUIRE(p.rows == x.rows);
    for (std::size_t i = 0; i < p.rows; ++i) {
        double sum = 0.0;
        for (std::size_t c = 0; c < p.cols; ++c) sum += p(i, c);
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("cross-validation is seed-deterministic and accurate on separable data") {
    Matrix x;
    std::vector<int> y;
    make_blobs(12, 41, x, y);
    const Matrix a = pixelclf::cross_val_proba(x, y, 4, 2, fast_config());
    const Matrix b = pixelclf::cross_val_proba(x, y, 4, 2, fast_config());
    REQUIRE(a.v == b.v);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < a.rows; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < a.cols; ++c)
            if (a(i, c) > a(i, best)) best = c;
        hits += static_cast<int>(best) == y[i];
    }
    REQUIRE(static_cast<double>(hits) / static_cast<double>(a.rows) >= 0.8);
}

TEST_CASE("class smaller than the fold count cannot be stratified") {
    Matrix x(6, 1);
    std::vector<int> y = {0, 0, 0, 0, 1, 1};
    for (std::size_t i = 0; i < 6; ++i) x(i, 0) = static_cast<double>(i);
    REQUIRE_THROWS_AS(pixelclf::cross_val_proba(x, y, 3, 0, fast_config()), DegenerateClassError);
}

TEST_CASE("probability map round-trips through PLPM") {
    pixelclf::ProbabilityMap pm;
    pm.height = 3;
    pm.width = 2;
    pm.num_classes = 4;
    Rng rng(1);
    pm.probs.resize(24);
    for (auto& v : pm.probs) v = static_cast<float>(rng.uniform());
    const auto path = std::filesystem::temp_directory_path() / "polarpath_pm.plpm";
    pixelclf::save_probability_map(pm, path);
    const auto loaded = pixelclf::load_probability_map(path);
    REQUIRE(loaded.probs == pm.probs);
    REQUIRE(loaded.num_classes == 4);
    std::filesystem::remove(path);
}

TEST_CASE("recognize_structures recovers a noise-free slide accurately") {
    auto gen = data::GeneratorConfig::defaults();
    gen.height = 96;
    gen.width = 96;
    auto [slide, map] = data::generate_slide(19, data::TumorClass::Malignant, gen);
    const auto ann = data::sparse_annotate(map, 0.08, 0.0, 4);
    pixelclf::RecognizeConfig cfg;
    cfg.booster = fast_config();
    cfg.seed = 6;
    const auto res = pixelclf::recognize_structures(slide, ann, cfg);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < map.height; ++r)
        for (std::size_t c = 0; c < map.width; ++c) hits += res.map.argmax(r, c) == map.at(r, c);
    REQUIRE(static_cast<double>(hits) / static_cast<double>(map.height * map.width) >= 0.9);
}

TEST_CASE("confidence-gated cleanup beats plain training under 30% label noise") {
    auto gen = data::GeneratorConfig::defaults();
    gen.height = 96;
    gen.width = 96;
    auto [slide, map] = data::generate_slide(21, data::TumorClass::Borderline, gen);
    const auto ann = data::sparse_annotate(map, 0.08, 0.3, 13);

    pixelclf::RecognizeConfig cl_on;
    cl_on.booster = fast_config();
    cl_on.seed = 9;
    auto cl_off = cl_on;
    cl_off.confidence_learning = false;

    const auto res_on = pixelclf::recognize_structures(slide, ann, cl_on);
    const auto res_off = pixelclf::recognize_structures(slide, ann, cl_off);
    REQUIRE(res_on.pruned_count > 0);
    REQUIRE(res_off.pruned_count == 0);

    auto acc = [&](const pixelclf::RecognizeResult& res) {
        std::size_t hits = 0;
        for (std::size_t r = 0; r < map.height; ++r)
            for (std::size_t c = 0; c < map.width; ++c) hits += res.map.argmax(r, c) == map.at(r, c);
        return static_cast<double>(hits) / static_cast<double>(map.height * map.width);
    };
    REQUIRE(acc(res_on) > acc(res_off));
}

TEST_CASE("single-class annotation is rejected") {
    auto gen = data::GeneratorConfig::defaults();
    gen.height = 48;
    gen.width = 48;
    auto [slide, map] = data::generate_slide(2, data::TumorClass::Benign, gen);
    data::SparseAnnotation ann;
    ann.entries = {{0, 0, 0}, {0, 1, 0}, {1, 0, 0}};
    REQUIRE_THROWS_AS(pixelclf::recognize_structures(slide, ann, {}), DegenerateClassError);
}

TEST_CASE("importance CSV lists every channel with its name") {
    Matrix x;
    std::vector<int> y;
    make_blobs(10, 2, x, y);
    const auto fi = gbdt::feature_importance(gbdt::fit(x, y, {1.0, 1.0, 1.0}, fast_config()));
    const auto path = std::filesystem::temp_directory_path() / "polarpath_imp.csv";
    pixelclf::save_importance_csv(fi, {"alpha", "beta"}, path);
    const auto text = io::read_text_file(path);
    REQUIRE(text.rfind("channel,name,gain\n", 0) == 0);
    REQUIRE(text.find("0,alpha,") != std::string::npos);
    REQUIRE(text.find("1,beta,") != std::string::npos);
    std::filesystem::remove(path);
}
