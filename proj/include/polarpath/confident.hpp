#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polarpath/core.hpp"
#include "polarpath/io.hpp"

namespace polarpath::confident {

// Out-of-sample predicted probabilities plus the noisy labels they score.
struct NoisyDataset {
    Matrix probs;                 // n x m, rows sum to 1
    std::vector<int> noisy_labels;  // in [0, m)
    std::size_t n() const { return probs.rows; }
    std::size_t m() const { return probs.cols; }
};

inline void validate(const NoisyDataset& ds) {
    if (ds.probs.rows != ds.noisy_labels.size()) throw DimensionError("probs/labels length mismatch");
    if (ds.n() < ds.m()) throw InvalidArgument("need at least one sample per class (n >= m)");
    std::vector<int> seen(ds.m(), 0);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const int y = ds.noisy_labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= ds.m()) throw InvalidArgument("noisy label out of range");
        seen[static_cast<std::size_t>(y)] = 1;
        double sum = 0.0;
        for (std::size_t j = 0; j < ds.m(); ++j) sum += ds.probs(i, j);
        if (std::abs(sum - 1.0) > 1e-6) throw InvalidArgument("probability row does not sum to 1");
    }
    for (std::size_t j = 0; j < ds.m(); ++j)
        if (!seen[j]) throw DegenerateClassError("class " + std::to_string(j) + " has no samples");
}

struct ThresholdVector {
    std::vector<double> t;  // per-class mean self-confidence
};

struct ConfusionCounts {
    Matrix counts;                                        // m x m, integer-valued
    std::vector<std::vector<std::vector<std::size_t>>> member_sets;  // [i][j] -> sample indices
};

struct JointDistribution {
    Matrix q;                           // m x m, sums to 1
    std::vector<double> marginal_true;  // column sums
};

struct CleanResult {
    std::set<std::size_t> pruned_indices;
    std::vector<double> class_weights;
    ThresholdVector thresholds;
    ConfusionCounts confusion;
    JointDistribution joint;
};

// Per-class confidence threshold: mean predicted probability of class j over
// the samples noisily labeled j.
inline ThresholdVector estimate_thresholds(const NoisyDataset& ds) {
    validate(ds);
    const std::size_t m = ds.m();
    ThresholdVector tv;
    tv.t.assign(m, 0.0);
    std::vector<std::size_t> count(m, 0);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto y = static_cast<std::size_t>(ds.noisy_labels[i]);
        tv.t[y] += ds.probs(i, y);
        ++count[y];
    }
    for (std::size_t j = 0; j < m; ++j) tv.t[j] /= static_cast<double>(count[j]);
    return tv;
}

// Confidence-gated confusion counts. A sample labeled i lands in cell (i, j)
// when class j wins the argmax restricted to classes whose threshold it
// clears; samples clearing no threshold stay uncounted. Ties go to the
// lowest class index.
inline ConfusionCounts build_confusion(const NoisyDataset& ds, const ThresholdVector& tv) {
    const std::size_t m = ds.m();
    if (tv.t.size() != m) throw DimensionError("threshold vector size mismatch");
    ConfusionCounts cc;
    cc.counts = Matrix(m, m, 0.0);
    cc.member_sets.assign(m, std::vector<std::vector<std::size_t>>(m));
    for (std::size_t x = 0; x < ds.n(); ++x) {
        int best = -1;
        double best_p = -1.0;
        for (std::size_t l = 0; l < m; ++l) {
            const double p = ds.probs(x, l);
            if (p >= tv.t[l] && p > best_p) {
                best_p = p;
                best = static_cast<int>(l);
            }
        }
        if (best < 0) continue;
        const auto i = static_cast<std::size_t>(ds.noisy_labels[x]);
        const auto j = static_cast<std::size_t>(best);
        cc.counts(i, j) += 1.0;
        cc.member_sets[i][j].push_back(x);
    }
    return cc;
}

// Calibrated joint estimate of p(noisy, true): each row of the confusion
// counts is normalized, rescaled by that noisy class's sample count, then
// the whole matrix is normalized to sum 1.
inline JointDistribution estimate_joint(const ConfusionCounts& cc, const NoisyDataset& ds) {
    const std::size_t m = ds.m();
    if (cc.counts.rows != m || cc.counts.cols != m) throw DimensionError("confusion matrix size mismatch");
    std::vector<double> class_count(m, 0.0);
    for (int y : ds.noisy_labels) class_count[static_cast<std::size_t>(y)] += 1.0;

    JointDistribution jd;
    jd.q = Matrix(m, m, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) row_sum += cc.counts(i, j);
        if (row_sum == 0.0) continue;  // all-zero rows propagate as zero
        for (std::size_t j = 0; j < m; ++j) {
            jd.q(i, j) = cc.counts(i, j) / row_sum * class_count[i];
            total += jd.q(i, j);
        }
    }
    if (total == 0.0) throw DegenerateClassError("all confusion counts are zero");
    for (double& v : jd.q.v) v /= total;
    jd.marginal_true.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < m; ++i) jd.marginal_true[j] += jd.q(i, j);
    return jd;
}

// Prune by Class: per noisy class i, drop the floor(n * off-diagonal row
// mass) samples with the lowest self-confidence. Ties break to the lower
// sample index.
inline std::set<std::size_t> prune_by_class(const NoisyDataset& ds, const JointDistribution& jd) {
    const std::size_t m = ds.m();
    if (jd.q.rows != m) throw DimensionError("joint distribution size mismatch");
    std::set<std::size_t> pruned;
    for (std::size_t i = 0; i < m; ++i) {
        double off_diag = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            if (j != i) off_diag += jd.q(i, j);
        std::size_t k = static_cast<std::size_t>(std::floor(static_cast<double>(ds.n()) * off_diag));
        if (k == 0) continue;
        std::vector<std::size_t> members;
        for (std::size_t x = 0; x < ds.n(); ++x)
            if (static_cast<std::size_t>(ds.noisy_labels[x]) == i) members.push_back(x);
        if (k > members.size()) k = members.size();  // clamp, see spec'd error policy
        std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
            const double pa = ds.probs(a, i), pb = ds.probs(b, i);
            if (pa != pb) return pa < pb;
            return a < b;
        });
        for (std::size_t x = 0; x < k; ++x) pruned.insert(members[x]);
    }
    return pruned;
}

// weight_i = Q_{y*}[i] / Q[i][i], the estimated 1 / p(noisy=i | true=i).
inline std::vector<double> class_weights(const JointDistribution& jd) {
    const std::size_t m = jd.q.rows;
    std::vector<double> w(m, 1.0);
    for (std::size_t i = 0; i < m; ++i) {
        if (jd.q(i, i) <= 0.0)
            throw DegenerateClassError("class " + std::to_string(i) + " has zero diagonal joint mass");
        w[i] = jd.marginal_true[i] / jd.q(i, i);
    }
    return w;
}

inline CleanResult clean(const NoisyDataset& ds) {
    CleanResult res;
    res.thresholds = estimate_thresholds(ds);
    res.confusion = build_confusion(ds, res.thresholds);
    res.joint = estimate_joint(res.confusion, ds);
    res.pruned_indices = prune_by_class(ds, res.joint);
    res.class_weights = class_weights(res.joint);
    return res;
}

// ---------------------------------------------------------------------------
// CSV / JSON interfaces

inline void save_dataset_csv(const NoisyDataset& ds, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "sample_id";
    for (std::size_t j = 0; j < ds.m(); ++j) ss << ",p_" << j;
    ss << ",noisy_label\n";
    ss.precision(17);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        ss << i;
        for (std::size_t j = 0; j < ds.m(); ++j) ss << "," << ds.probs(i, j);
        ss << "," << ds.noisy_labels[i] << "\n";
    }
    io::write_text_file(path, ss.str());
}

inline NoisyDataset load_dataset_csv(const std::filesystem::path& path) {
    std::istringstream is(io::read_text_file(path));
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty dataset CSV: " + path.string());
    const auto header = io::split_csv_line(line);
    if (header.size() < 3 || header.front() != "sample_id" || header.back() != "noisy_label")
        throw FormatError("bad dataset CSV header: " + path.string());
    const std::size_t m = header.size() - 2;
    std::vector<double> probs;
    std::vector<int> labels;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = io::split_csv_line(line);
        if (f.size() != m + 2) throw FormatError("bad dataset CSV row: " + path.string());
        for (std::size_t j = 0; j < m; ++j) probs.push_back(std::stod(f[1 + j]));
        labels.push_back(std::stoi(f.back()));
    }
    NoisyDataset ds;
    ds.probs = Matrix(labels.size(), m);
    ds.probs.v = std::move(probs);
    ds.noisy_labels = std::move(labels);
    return ds;
}

inline nlohmann::json report_json(const CleanResult& res) {
    nlohmann::json rep;
    rep["thresholds"] = res.thresholds.t;
    const std::size_t m = res.joint.q.rows;
    auto mat = [&](const Matrix& mx) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < m; ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t j = 0; j < m; ++j) row.push_back(mx(i, j));
            rows.push_back(row);
        }
        return rows;
    };
    rep["confusion"] = mat(res.confusion.counts);
    rep["joint"] = mat(res.joint.q);
    rep["marginal_true"] = res.joint.marginal_true;
    rep["pruned_indices"] = std::vector<std::size_t>(res.pruned_indices.begin(), res.pruned_indices.end());
    rep["class_weights"] = res.class_weights;
    return rep;
}

}  // namespace polarpath::confident
