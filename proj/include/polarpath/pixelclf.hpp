#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "polarpath/confident.hpp"
#include "polarpath/core.hpp"
#include "polarpath/data.hpp"
#include "polarpath/gbdt.hpp"
#include "polarpath/io.hpp"

namespace polarpath::pixelclf {

// H x W x M per-pixel class probabilities; float to match the on-disk f32
// payload.
struct ProbabilityMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t num_classes = 0;
    std::vector<float> probs;  // [r][c][m]

    float at(std::size_t r, std::size_t c, std::size_t m) const {
        return probs[(r * width + c) * num_classes + m];
    }
    int argmax(std::size_t r, std::size_t c) const {
        const float* p = &probs[(r * width + c) * num_classes];
        int best = 0;
        for (std::size_t m = 1; m < num_classes; ++m)
            if (p[m] > p[best]) best = static_cast<int>(m);
        return best;
    }
};

inline void save_probability_map(const ProbabilityMap& pm, const std::filesystem::path& path) {
    auto os = io::open_out(path);
    os.write("PLPM", 4);
    io::write_u32(os, static_cast<uint32_t>(pm.height));
    io::write_u32(os, static_cast<uint32_t>(pm.width));
    io::write_u32(os, static_cast<uint32_t>(pm.num_classes));
    io::write_f32_array(os, pm.probs.data(), pm.probs.size());
    if (!os) throw Error("write failed: " + path.string());
}

inline ProbabilityMap load_probability_map(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    io::expect_magic(is, "PLPM", path.string());
    ProbabilityMap pm;
    pm.height = io::read_u32(is, "PLPM height");
    pm.width = io::read_u32(is, "PLPM width");
    pm.num_classes = io::read_u32(is, "PLPM class count");
    pm.probs.resize(pm.height * pm.width * pm.num_classes);
    io::read_f32_array(is, pm.probs.data(), pm.probs.size(), path.string());
    return pm;
}

// Stratified K-fold out-of-sample probabilities: row i comes from the model
// whose training fold excluded sample i.
inline Matrix cross_val_proba(const Matrix& features, const std::vector<int>& labels, std::size_t folds,
                              uint64_t seed, const gbdt::GbdtConfig& cfg = {}) {
    const std::size_t n = features.rows;
    if (folds < 2) throw InvalidArgument("cross_val_proba: need at least 2 folds");
    if (labels.size() != n) throw DimensionError("cross_val_proba: labels length mismatch");
    const int m = *std::max_element(labels.begin(), labels.end()) + 1;

    // Deal each class round-robin onto folds after a seeded shuffle.
    std::vector<int> fold_of(n, -1);
    for (int c = 0; c < m; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < n; ++i)
            if (labels[i] == c) members.push_back(i);
        if (members.size() < folds)
            throw DegenerateClassError("cross_val_proba: class " + std::to_string(c) +
                                       " too small to stratify into " + std::to_string(folds) + " folds");
        Rng rng(derive_seed(seed, static_cast<uint64_t>(c), 0xf01dULL));
        rng.shuffle(members);
        for (std::size_t k = 0; k < members.size(); ++k)
            fold_of[members[k]] = static_cast<int>(k % folds);
    }

    Matrix out(n, static_cast<std::size_t>(m));
    const std::vector<double> unit_weights(static_cast<std::size_t>(m), 1.0);
    std::vector<Matrix> fold_probs(folds);
    std::vector<std::vector<std::size_t>> fold_members(folds);
    for (std::size_t i = 0; i < n; ++i) fold_members[static_cast<std::size_t>(fold_of[i])].push_back(i);

    parallel_for(folds, [&](std::size_t f) {
        std::vector<std::size_t> train_idx;
        for (std::size_t i = 0; i < n; ++i)
            if (fold_of[i] != static_cast<int>(f)) train_idx.push_back(i);
        Matrix train_x(train_idx.size(), features.cols);
        std::vector<int> train_y(train_idx.size());
        for (std::size_t k = 0; k < train_idx.size(); ++k) {
            std::copy_n(&features.v[train_idx[k] * features.cols], features.cols,
                        &train_x.v[k * features.cols]);
            train_y[k] = labels[train_idx[k]];
        }
        auto fold_cfg = cfg;
        fold_cfg.seed = derive_seed(cfg.seed, f, 0xcfULL);
        const auto model = gbdt::fit(train_x, train_y, unit_weights, fold_cfg);

        const auto& held = fold_members[f];
        Matrix held_x(held.size(), features.cols);
        for (std::size_t k = 0; k < held.size(); ++k)
            std::copy_n(&features.v[held[k] * features.cols], features.cols, &held_x.v[k * features.cols]);
        fold_probs[f] = gbdt::predict_proba(model, held_x);
    });
    for (std::size_t f = 0; f < folds; ++f)
        for (std::size_t k = 0; k < fold_members[f].size(); ++k)
            std::copy_n(&fold_probs[f].v[k * static_cast<std::size_t>(m)], static_cast<std::size_t>(m),
                        &out.v[fold_members[f][k] * static_cast<std::size_t>(m)]);
    return out;
}

struct RecognizeConfig {
    bool confidence_learning = true;
    std::size_t folds = 5;
    gbdt::GbdtConfig booster;
    uint64_t seed = 0;
};

struct RecognizeResult {
    ProbabilityMap map;
    gbdt::GbdtModel model;
    std::size_t pruned_count = 0;
    std::vector<double> class_weights;
};

// Stage 1: cross-validated probabilities on the annotated pixels, confident
// learning cleanup (optional), retrain on the kept pixels, then predict
// every pixel of the slide.
inline RecognizeResult recognize_structures(const data::PolarSlide& slide,
                                            const data::SparseAnnotation& ann,
                                            const RecognizeConfig& cfg) {
    if (ann.entries.empty()) throw InvalidArgument("recognize_structures: empty annotation");
    const std::size_t n = ann.entries.size();
    const std::size_t d = slide.depth;
    Matrix features(n, d);
    std::vector<int> labels(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& e = ann.entries[i];
        if (e.row >= slide.height || e.col >= slide.width)
            throw DimensionError("annotation coordinate out of bounds");
        for (std::size_t k = 0; k < d; ++k) features(i, k) = slide.at(e.row, e.col, k);
        labels[i] = e.label;
        max_label = std::max(max_label, static_cast<int>(e.label));
    }
    const std::size_t m = static_cast<std::size_t>(max_label) + 1;
    if (m < 2) throw DegenerateClassError("recognize_structures: annotation covers a single class");

    RecognizeResult res;
    Matrix train_x = features;
    std::vector<int> train_y = labels;
    std::vector<double> weights(m, 1.0);

    if (cfg.confidence_learning) {
        confident::NoisyDataset ds;
        ds.probs = cross_val_proba(features, labels, cfg.folds, derive_seed(cfg.seed, 0, 0xc1eaULL),
                                   cfg.booster);
        ds.noisy_labels = labels;
        const auto cleaned = confident::clean(ds);
        res.pruned_count = cleaned.pruned_indices.size();
        weights = cleaned.class_weights;

        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < n; ++i)
            if (!cleaned.pruned_indices.count(i)) kept.push_back(i);
        train_x = Matrix(kept.size(), d);
        train_y.resize(kept.size());
        for (std::size_t k = 0; k < kept.size(); ++k) {
            std::copy_n(&features.v[kept[k] * d], d, &train_x.v[k * d]);
            train_y[k] = labels[kept[k]];
        }
    }
    res.class_weights = weights;

    auto booster_cfg = cfg.booster;
    booster_cfg.seed = derive_seed(cfg.seed, 1, 0xf17ULL);
    res.model = gbdt::fit(train_x, train_y, weights, booster_cfg);

    res.map.height = slide.height;
    res.map.width = slide.width;
    res.map.num_classes = m;
    res.map.probs.resize(slide.height * slide.width * m);
    parallel_for(slide.height, [&](std::size_t r) {
        std::vector<double> x(d), z(m);
        for (std::size_t c = 0; c < slide.width; ++c) {
            for (std::size_t k = 0; k < d; ++k) x[k] = slide.at(r, c, k);
            res.model.margins(x.data(), z.data());
            softmax_inplace(z);
            for (std::size_t k = 0; k < m; ++k)
                res.map.probs[(r * slide.width + c) * m + k] = static_cast<float>(z[k]);
        }
    });
    return res;
}

inline void save_importance_csv(const gbdt::FeatureImportance& fi,
                                const std::vector<std::string>& channel_names,
                                const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "channel,name,gain\n";
    ss.precision(17);
    for (std::size_t d = 0; d < fi.gains.size(); ++d) {
        const std::string name = d < channel_names.size() ? channel_names[d] : "channel_" + std::to_string(d);
        ss << d << "," << name << "," << fi.gains[d] << "\n";
    }
    io::write_text_file(path, ss.str());
}

}  // namespace polarpath::pixelclf
