#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "polarpath/confident.hpp"

using namespace polarpath;
using namespace polarpath::confident;

namespace {

NoisyDataset make_dataset(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
    NoisyDataset ds;
    ds.probs = Matrix(probs.size(), probs.front().size());
    for (std::size_t i = 0; i < probs.size(); ++i)
        for (std::size_t j = 0; j < probs[i].size(); ++j) ds.probs(i, j) = probs[i][j];
    ds.noisy_labels = labels;
    return ds;
}

// The 4-sample worked instance used across the suite.
NoisyDataset worked_instance() {
    return make_dataset({{0.9, 0.1}, {0.6, 0.4}, {0.3, 0.7}, {0.8, 0.2}}, {0, 0, 1, 1});
}

// Independent brute-force evaluation of the definitions, written as direct
// transcriptions and kept free of the library's data structures.
struct BruteForceResult {
    std::vector<double> t;
    std::vector<std::vector<double>> c;
    std::vector<std::vector<double>> q;
    std::vector<double> marginal;
    std::set<std::size_t> pruned;
    std::vector<double> weights;
    bool degenerate = false;
};

BruteForceResult brute_force(const std::vector<std::vector<double>>& p, const std::vector<int>& y) {
    const std::size_t n = p.size(), m = p.front().size();
    BruteForceResult r;

    r.t.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        double sum = 0.0;
        int count = 0;
        for (std::size_t x = 0; x < n; ++x)
            if (static_cast<std::size_t>(y[x]) == j) {
                sum += p[x][j];
                ++count;
            }
        r.t[j] = sum / count;
    }

    r.c.assign(m, std::vector<double>(m, 0.0));
    std::vector<std::vector<std::set<std::size_t>>> members(m, std::vector<std::set<std::size_t>>(m));
    for (std::size_t x = 0; x < n; ++x) {
        int arg = -1;
        for (std::size_t l = 0; l < m; ++l)
            if (p[x][l] >= r.t[l] && (arg < 0 || p[x][l] > p[x][static_cast<std::size_t>(arg)]))
                arg = static_cast<int>(l);
        if (arg < 0) continue;
        r.c[static_cast<std::size_t>(y[x])][static_cast<std::size_t>(arg)] += 1.0;
        members[static_cast<std::size_t>(y[x])][static_cast<std::size_t>(arg)].insert(x);
    }

    std::vector<double> label_count(m, 0.0);
    for (int v : y) label_count[static_cast<std::size_t>(v)] += 1.0;
    r.q.assign(m, std::vector<double>(m, 0.0));
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < m; ++j) row += r.c[i][j];
        if (row == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) {
            r.q[i][j] = r.c[i][j] / row * label_count[i];
            total += r.q[i][j];
        }
    }
    if (total == 0.0) {
        r.degenerate = true;
        return r;
    }
    for (auto& row : r.q)
        for (double& v : row) v /= total;
    r.marginal.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < m; ++i) r.marginal[j] += r.q[i][j];

    for (std::size_t i = 0; i < m; ++i) {
        double off = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            if (j != i) off += r.q[i][j];
        std::size_t k = static_cast<std::size_t>(std::floor(n * off));
        std::vector<std::size_t> mem;
        for (std::size_t x = 0; x < n; ++x)
            if (static_cast<std::size_t>(y[x]) == i) mem.push_back(x);
        std::sort(mem.begin(), mem.end(), [&](std::size_t a, std::size_t b) {
            if (p[a][i] != p[b][i]) return p[a][i] < p[b][i];
            return a < b;
        });
        for (std::size_t x = 0; x < std::min(k, mem.size()); ++x) r.pruned.insert(mem[x]);
    }

    r.weights.assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        if (r.q[i][i] <= 0.0) {
            r.degenerate = true;
            return r;
        }
        r.weights[i] = r.marginal[i] / r.q[i][i];
    }
    return r;
}

}  // namespace

TEST_CASE("thresholds: constant confident predictions") {
    const auto ds = make_dataset({{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}}, {0, 0, 1});
    const auto tv = estimate_thresholds(ds);
    REQUIRE(tv.t[0] == 1.0);
    REQUIRE(tv.t[1] == 1.0);
}

TEST_CASE("thresholds: worked 4-sample instance") {
    const auto tv = estimate_thresholds(worked_instance());
    REQUIRE_THAT(tv.t[0], Catch::Matchers::WithinAbs(0.75, 1e-15));
    REQUIRE_THAT(tv.t[1], Catch::Matchers::WithinAbs(0.45, 1e-15));
}

TEST_CASE("thresholds: uniform probabilities give 1/m") {
    const auto ds = make_dataset({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}, {0, 1, 0, 1});
    for (double t : estimate_thresholds(ds).t) REQUIRE(t == 0.5);
}

TEST_CASE("confusion: worked instance leaves the ambiguous sample uncounted") {
    const auto ds = worked_instance();
    const auto cc = build_confusion(ds, estimate_thresholds(ds));
    REQUIRE(cc.counts(0, 0) == 1.0);
    REQUIRE(cc.counts(0, 1) == 0.0);
    REQUIRE(cc.counts(1, 0) == 1.0);
    REQUIRE(cc.counts(1, 1) == 1.0);
    REQUIRE(cc.member_sets[1][0] == std::vector<std::size_t>{3});
}

TEST_CASE("confusion: confident correct predictions land on the diagonal") {
    const auto ds = make_dataset({{0.9, 0.1}, {0.9, 0.1}, {0.1, 0.9}, {0.1, 0.9}, {0.1, 0.9}},
                                 {0, 0, 1, 1, 1});
    const auto cc = build_confusion(ds, estimate_thresholds(ds));
    REQUIRE(cc.counts(0, 0) + cc.counts(1, 1) == 5.0);
    REQUIRE(cc.counts(0, 1) == 0.0);
    REQUIRE(cc.counts(1, 0) == 0.0);
}

TEST_CASE("confusion: uniform rows tie-break to class 0") {
    const auto ds = make_dataset({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}, {0, 1, 0, 1});
    const auto cc = build_confusion(ds, estimate_thresholds(ds));
    REQUIRE(cc.counts(0, 0) == 2.0);
    REQUIRE(cc.counts(1, 0) == 2.0);
    REQUIRE(cc.counts(0, 1) == 0.0);
    REQUIRE(cc.counts(1, 1) == 0.0);
}

TEST_CASE("joint: worked instance calibration") {
    const auto ds = worked_instance();
    const auto jd = estimate_joint(build_confusion(ds, estimate_thresholds(ds)), ds);
    REQUIRE_THAT(jd.q(0, 0), Catch::Matchers::WithinAbs(0.5, 1e-15));
    REQUIRE(jd.q(0, 1) == 0.0);
    REQUIRE_THAT(jd.q(1, 0), Catch::Matchers::WithinAbs(0.25, 1e-15));
    REQUIRE_THAT(jd.q(1, 1), Catch::Matchers::WithinAbs(0.25, 1e-15));
    REQUIRE_THAT(jd.marginal_true[0], Catch::Matchers::WithinAbs(0.75, 1e-15));
    REQUIRE_THAT(jd.marginal_true[1], Catch::Matchers::WithinAbs(0.25, 1e-15));
}

TEST_CASE("joint: noise-free balanced classes give diag(1/m)") {
    const auto ds = make_dataset({{0.95, 0.05}, {0.9, 0.1}, {0.1, 0.9}, {0.05, 0.95}}, {0, 0, 1, 1});
    const auto jd = estimate_joint(build_confusion(ds, estimate_thresholds(ds)), ds);
    REQUIRE_THAT(jd.q(0, 0), Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE_THAT(jd.q(1, 1), Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE(jd.q(0, 1) == 0.0);
}

TEST_CASE("prune: worked instance removes the low-confidence class-1 sample") {
    const auto ds = worked_instance();
    const auto res = clean(ds);
    REQUIRE(res.pruned_indices == std::set<std::size_t>{3});
    REQUIRE_THAT(res.class_weights[0], Catch::Matchers::WithinAbs(1.5, 1e-15));
    REQUIRE_THAT(res.class_weights[1], Catch::Matchers::WithinAbs(1.0, 1e-15));
}

TEST_CASE("prune: diagonal joint yields empty prune set and unit weights") {
    const auto ds = make_dataset({{0.95, 0.05}, {0.9, 0.1}, {0.1, 0.9}, {0.05, 0.95}}, {0, 0, 1, 1});
    const auto res = clean(ds);
    REQUIRE(res.pruned_indices.empty());
    for (double w : res.class_weights) REQUIRE_THAT(w, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("weights: zero diagonal entry is a degenerate-class error") {
    JointDistribution jd;
    jd.q = Matrix(2, 2, 0.0);
    jd.q(0, 1) = 0.5;
    jd.q(1, 1) = 0.5;
    jd.marginal_true = {0.0, 1.0};
    REQUIRE_THROWS_AS(class_weights(jd), DegenerateClassError);
}

TEST_CASE("joint invariants: Q sums to 1, marginal equals column sums") {
    Rng rng(33);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 2 + rng.uniform_index(2);
        const std::size_t n = m + rng.uniform_index(20);
        std::vector<std::vector<double>> probs(n, std::vector<double>(m));
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (auto& p : probs[i]) sum += (p = 0.05 + rng.uniform());
            for (auto& p : probs[i]) p /= sum;
            labels[i] = i < m ? static_cast<int>(i) : static_cast<int>(rng.uniform_index(m));
        }
        const auto ds = make_dataset(probs, labels);
        const auto jd = estimate_joint(build_confusion(ds, estimate_thresholds(ds)), ds);
        double total = 0.0;
        for (double v : jd.q.v) {
            REQUIRE(v >= 0.0);
            total += v;
        }
        REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-9));
        for (std::size_t j = 0; j < m; ++j) {
            double col = 0.0;
            for (std::size_t i = 0; i < m; ++i) col += jd.q(i, j);
            REQUIRE_THAT(jd.marginal_true[j], Catch::Matchers::WithinAbs(col, 1e-9));
        }
    }
}

TEST_CASE("monotone gating: raising a threshold never grows its column") {
    Rng rng(44);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 2 + rng.uniform_index(2);
        const std::size_t n = m + rng.uniform_index(15);
        NoisyDataset ds;
        ds.probs = Matrix(n, m);
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < m; ++j) sum += (ds.probs(i, j) = 0.05 + rng.uniform());
            for (std::size_t j = 0; j < m; ++j) ds.probs(i, j) /= sum;
            ds.noisy_labels.push_back(i < m ? static_cast<int>(i) : static_cast<int>(rng.uniform_index(m)));
        }
        auto tv = estimate_thresholds(ds);
        const auto before = build_confusion(ds, tv);
        const std::size_t j = rng.uniform_index(m);
        tv.t[j] += rng.uniform(0.0, 0.3);
        const auto after = build_confusion(ds, tv);
        double col_before = 0.0, col_after = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            col_before += before.counts(i, j);
            col_after += after.counts(i, j);
        }
        REQUIRE(col_after <= col_before);
    }
}

TEST_CASE("small-instance brute-force oracle equivalence") {
    Rng rng(2024);
    const double grid[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    int checked = 0;
    for (int trial = 0; trial < 3000; ++trial) {
        const std::size_t m = 2 + rng.uniform_index(2);  // 2 or 3
        const std::size_t n = m + rng.uniform_index(9 - m);
        std::vector<std::vector<double>> probs(n, std::vector<double>(m));
        std::vector<int> labels(n);
        bool valid = true;
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (auto& p : probs[i]) sum += (p = grid[rng.uniform_index(5)]);
            if (sum == 0.0) {
                valid = false;
                break;
            }
            for (auto& p : probs[i]) p /= sum;
            labels[i] = i < m ? static_cast<int>(i) : static_cast<int>(rng.uniform_index(m));
        }
        if (!valid) continue;
        const auto oracle = brute_force(probs, labels);
        const auto ds = make_dataset(probs, labels);
        const auto tv = estimate_thresholds(ds);
        for (std::size_t j = 0; j < m; ++j) REQUIRE(tv.t[j] == oracle.t[j]);
        const auto cc = build_confusion(ds, tv);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) REQUIRE(cc.counts(i, j) == oracle.c[i][j]);
        if (oracle.degenerate) {
            REQUIRE_THROWS_AS(clean(ds), DegenerateClassError);
            ++checked;
            continue;
        }
        const auto res = clean(ds);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
                REQUIRE_THAT(res.joint.q(i, j), Catch::Matchers::WithinAbs(oracle.q[i][j], 1e-12));
        REQUIRE(res.pruned_indices == oracle.pruned);
        for (std::size_t i = 0; i < m; ++i)
            REQUIRE_THAT(res.class_weights[i], Catch::Matchers::WithinAbs(oracle.weights[i], 1e-12));
        ++checked;
    }
    REQUIRE(checked > 2000);
}

TEST_CASE("symmetric flips: most corrupted samples are pruned") {
    // Separable 3-class instance: confident probabilities toward the true
    // class, then 30% of labels flipped to another class.
    Rng rng(77);
    const std::size_t n = 300, m = 3;
    std::vector<std::vector<double>> probs(n, std::vector<double>(m));
    std::vector<int> noisy(n);
    std::set<std::size_t> flipped;
    for (std::size_t i = 0; i < n; ++i) {
        const int truth = static_cast<int>(i % m);
        std::vector<double> margin(m);
        for (std::size_t j = 0; j < m; ++j)
            margin[j] = (static_cast<int>(j) == truth ? 3.0 : 0.0) + rng.normal() * 0.7;
        softmax_inplace(margin);
        probs[i] = margin;
        noisy[i] = truth;
        if (rng.uniform() < 0.3) {
            noisy[i] = (truth + 1 + static_cast<int>(rng.uniform_index(m - 1))) % static_cast<int>(m);
            flipped.insert(i);
        }
    }
    const auto res = clean(make_dataset(probs, noisy));
    std::size_t caught = 0;
    for (std::size_t i : flipped) caught += res.pruned_indices.count(i);
    REQUIRE(static_cast<double>(caught) >= 0.6 * static_cast<double>(flipped.size()));
}

TEST_CASE("dataset CSV round-trips") {
    const auto ds = worked_instance();
    const auto path = std::filesystem::temp_directory_path() / "polarpath_confident.csv";
    save_dataset_csv(ds, path);
    const auto loaded = load_dataset_csv(path);
    REQUIRE(loaded.noisy_labels == ds.noisy_labels);
    REQUIRE(loaded.probs.v == ds.probs.v);
    const auto rep = report_json(clean(loaded));
    REQUIRE(rep.contains("joint"));
    REQUIRE(rep["pruned_indices"].size() == 1);
    std::filesystem::remove(path);
}
