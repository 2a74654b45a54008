#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "polarpath/core.hpp"
#include "polarpath/data.hpp"
#include "polarpath/io.hpp"
#include "polarpath/pixelclf.hpp"

namespace polarpath::eval {

struct RocCurve {
    std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0) -> (1,1)
    double auc = 0.0;
};

// Threshold-sweep ROC with tied scores grouped into one step; the trapezoid
// over a tie block credits ties as half-concordant, matching Mann-Whitney.
inline RocCurve roc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DimensionError("roc: scores/labels length mismatch");
    std::size_t pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw DegenerateClassError("roc: both label values must be present");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });

    RocCurve curve;
    curve.points.emplace_back(0.0, 0.0);
    double tp = 0.0, fp = 0.0, auc = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        double dtp = 0.0, dfp = 0.0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? dtp : dfp) += 1.0;
            ++j;
        }
        const double prev_tpr = tp / static_cast<double>(pos);
        tp += dtp;
        fp += dfp;
        const double tpr = tp / static_cast<double>(pos);
        const double dfpr = dfp / static_cast<double>(neg);
        auc += dfpr * 0.5 * (prev_tpr + tpr);
        curve.points.emplace_back(fp / static_cast<double>(neg), tpr);
        i = j;
    }
    curve.auc = auc;
    return curve;
}

inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    return roc(scores, labels).auc;
}

// Flattens all (sample, class) one-vs-rest decisions into one binary ROC.
inline double micro_average_auc(const Matrix& class_probs, const std::vector<int>& labels) {
    if (class_probs.rows != labels.size()) throw DimensionError("micro auc: size mismatch");
    std::vector<double> scores;
    std::vector<int> flat;
    scores.reserve(class_probs.v.size());
    flat.reserve(class_probs.v.size());
    for (std::size_t i = 0; i < class_probs.rows; ++i) {
        for (std::size_t c = 0; c < class_probs.cols; ++c) {
            scores.push_back(class_probs(i, c));
            flat.push_back(labels[i] == static_cast<int>(c) ? 1 : 0);
        }
    }
    return auc(scores, flat);
}

inline void save_roc_csv(const RocCurve& curve, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "fpr,tpr\n";
    ss.precision(17);
    for (const auto& [fpr, tpr] : curve.points) ss << fpr << "," << tpr << "\n";
    io::write_text_file(path, ss.str());
}

// ---------------------------------------------------------------------------
// Fig.-3-style noise robustness sweep

struct NoiseSweepReport {
    std::vector<double> noise_levels;
    std::vector<double> train_cl_on;   // annotated-pixel accuracy, CL enabled
    std::vector<double> train_cl_off;
    std::vector<double> test_cl_on;    // held-out-pixel accuracy
    std::vector<double> test_cl_off;
};

namespace detail {

struct SlideAccuracy {
    double train = 0.0;  // on annotated pixels, against ground truth
    double test = 0.0;   // on unannotated pixels
};

inline SlideAccuracy slide_accuracy(const data::SlideRecord& rec, const data::SparseAnnotation& ann,
                                    const pixelclf::ProbabilityMap& pm) {
    std::vector<uint8_t> annotated(rec.map.height * rec.map.width, 0);
    for (const auto& e : ann.entries) annotated[e.row * rec.map.width + e.col] = 1;
    std::size_t train_hit = 0, train_total = 0, test_hit = 0, test_total = 0;
    for (std::size_t r = 0; r < rec.map.height; ++r) {
        for (std::size_t c = 0; c < rec.map.width; ++c) {
            const bool hit = pm.argmax(r, c) == rec.map.at(r, c);
            if (annotated[r * rec.map.width + c]) {
                train_total += 1;
                train_hit += hit;
            } else {
                test_total += 1;
                test_hit += hit;
            }
        }
    }
    return {static_cast<double>(train_hit) / static_cast<double>(std::max<std::size_t>(train_total, 1)),
            static_cast<double>(test_hit) / static_cast<double>(std::max<std::size_t>(test_total, 1))};
}

}  // namespace detail

// For each noise level: re-annotate every slide at that level, run stage 1
// with and without confident learning, and average accuracy against the
// generator ground truth.
inline NoiseSweepReport noise_sweep(const data::SlideCorpus& corpus, const std::vector<double>& levels,
                                    uint64_t seed, const pixelclf::RecognizeConfig& base_cfg = {}) {
    for (double lv : levels)
        if (lv < 0.0 || lv > 0.5) throw InvalidArgument("noise level outside [0, 0.5]");
    NoiseSweepReport report;
    report.noise_levels = levels;
    report.train_cl_on.resize(levels.size());
    report.train_cl_off.resize(levels.size());
    report.test_cl_on.resize(levels.size());
    report.test_cl_off.resize(levels.size());

    for (std::size_t li = 0; li < levels.size(); ++li) {
        double tr_on = 0.0, tr_off = 0.0, te_on = 0.0, te_off = 0.0;
        for (std::size_t si = 0; si < corpus.slides.size(); ++si) {
            const auto& rec = corpus.slides[si];
            const auto ann = data::sparse_annotate(rec.map, rec.annotation.coverage_fraction, levels[li],
                                                   derive_seed(seed, li * 1000 + si, 0x5eeULL));
            for (bool cl : {true, false}) {
                auto cfg = base_cfg;
                cfg.confidence_learning = cl;
                cfg.seed = derive_seed(seed, li * 1000 + si, cl ? 0x10ULL : 0x20ULL);
                const auto res = pixelclf::recognize_structures(rec.slide, ann, cfg);
                const auto acc = detail::slide_accuracy(rec, ann, res.map);
                (cl ? tr_on : tr_off) += acc.train;
                (cl ? te_on : te_off) += acc.test;
            }
        }
        const double ns = static_cast<double>(corpus.slides.size());
        report.train_cl_on[li] = tr_on / ns;
        report.train_cl_off[li] = tr_off / ns;
        report.test_cl_on[li] = te_on / ns;
        report.test_cl_off[li] = te_off / ns;
    }
    return report;
}

inline void save_noise_sweep_csv(const NoiseSweepReport& rep, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "noise,train_cl_on,train_cl_off,test_cl_on,test_cl_off\n";
    ss.precision(17);
    for (std::size_t i = 0; i < rep.noise_levels.size(); ++i)
        ss << rep.noise_levels[i] << "," << rep.train_cl_on[i] << "," << rep.train_cl_off[i] << ","
           << rep.test_cl_on[i] << "," << rep.test_cl_off[i] << "\n";
    io::write_text_file(path, ss.str());
}

inline nlohmann::json noise_sweep_json(const NoiseSweepReport& rep) {
    return {{"noise_levels", rep.noise_levels},
            {"train_cl_on", rep.train_cl_on},
            {"train_cl_off", rep.train_cl_off},
            {"test_cl_on", rep.test_cl_on},
            {"test_cl_off", rep.test_cl_off}};
}

}  // namespace polarpath::eval
