#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polarpath/core.hpp"
#include "polarpath/io.hpp"

namespace polarpath::gbdt {

struct TreeNode {
    bool is_leaf = true;
    int feature = -1;
    double threshold = 0.0;  // goes left when value < threshold
    int left = -1;
    int right = -1;
    double value = 0.0;  // leaf weight
    double gain = 0.0;   // split gain, for importance
};

struct Tree {
    std::vector<TreeNode> nodes;

    double predict(const double* x) const {
        int idx = 0;
        while (!nodes[static_cast<std::size_t>(idx)].is_leaf) {
            const auto& n = nodes[static_cast<std::size_t>(idx)];
            idx = x[n.feature] < n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(idx)].value;
    }
};

struct GbdtConfig {
    std::size_t rounds = 50;
    std::size_t max_depth = 4;
    double learning_rate = 0.2;
    double lambda = 1.0;          // L2 on leaf weights
    double min_child_weight = 1e-3;
    double base_score = 0.0;
    uint64_t seed = 0;
};

struct GbdtModel {
    std::size_t num_features = 0;
    std::size_t num_classes = 0;
    GbdtConfig config;
    std::vector<std::vector<Tree>> trees;  // [round][class]

    // Raw per-class margins for one sample.
    void margins(const double* x, double* out) const {
        for (std::size_t c = 0; c < num_classes; ++c) out[c] = config.base_score;
        for (const auto& round : trees)
            for (std::size_t c = 0; c < num_classes; ++c) out[c] += round[c].predict(x);
    }
};

namespace detail {

struct SplitResult {
    bool found = false;
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

inline double leaf_objective(double g, double h, double lambda) { return -g * g / (2.0 * (h + lambda)); }

// Exact greedy split over all features. Ties on gain resolve to the lowest
// feature index, then the lowest threshold, for reduction-order independence.
inline SplitResult best_split(const Matrix& features, const std::vector<std::size_t>& samples,
                              const std::vector<double>& grad, const std::vector<double>& hess,
                              const GbdtConfig& cfg) {
    double g_total = 0.0, h_total = 0.0;
    for (std::size_t s : samples) {
        g_total += grad[s];
        h_total += hess[s];
    }
    const double parent_obj = leaf_objective(g_total, h_total, cfg.lambda);

    SplitResult best;
    std::vector<std::pair<double, std::size_t>> order(samples.size());
    for (std::size_t f = 0; f < features.cols; ++f) {
        for (std::size_t k = 0; k < samples.size(); ++k)
            order[k] = {features(samples[k], f), samples[k]};
        std::sort(order.begin(), order.end());
        double g_left = 0.0, h_left = 0.0;
        for (std::size_t k = 0; k + 1 < order.size(); ++k) {
            g_left += grad[order[k].second];
            h_left += hess[order[k].second];
            if (order[k].first == order[k + 1].first) continue;  // no boundary here
            const double g_right = g_total - g_left, h_right = h_total - h_left;
            if (h_left < cfg.min_child_weight || h_right < cfg.min_child_weight) continue;
            const double gain = parent_obj - leaf_objective(g_left, h_left, cfg.lambda) -
                                leaf_objective(g_right, h_right, cfg.lambda);
            const double thresh = 0.5 * (order[k].first + order[k + 1].first);
            const bool better =
                gain > best.gain + 1e-12 ||
                (std::abs(gain - best.gain) <= 1e-12 && best.found &&
                 (static_cast<int>(f) < best.feature ||
                  (static_cast<int>(f) == best.feature && thresh < best.threshold)));
            if (!best.found ? gain > 1e-12 : better) {
                best.found = true;
                best.feature = static_cast<int>(f);
                best.threshold = thresh;
                best.gain = gain;
            }
        }
    }
    return best;
}

inline void build_node(Tree& tree, int node_idx, const Matrix& features,
                       std::vector<std::size_t>&& samples, const std::vector<double>& grad,
                       const std::vector<double>& hess, std::size_t depth, const GbdtConfig& cfg) {
    auto& node = tree.nodes[static_cast<std::size_t>(node_idx)];
    double g = 0.0, h = 0.0;
    for (std::size_t s : samples) {
        g += grad[s];
        h += hess[s];
    }
    node.value = -g / (h + cfg.lambda) * cfg.learning_rate;
    if (depth >= cfg.max_depth || samples.size() < 2) return;
    const auto split = best_split(features, samples, grad, hess, cfg);
    if (!split.found) return;

    std::vector<std::size_t> left, right;
    for (std::size_t s : samples)
        (features(s, static_cast<std::size_t>(split.feature)) < split.threshold ? left : right).push_back(s);
    samples.clear();
    samples.shrink_to_fit();

    const int li = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    const int ri = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    auto& n = tree.nodes[static_cast<std::size_t>(node_idx)];  // re-fetch, vector may have moved
    n.is_leaf = false;
    n.feature = split.feature;
    n.threshold = split.threshold;
    n.gain = split.gain;
    n.left = li;
    n.right = ri;
    build_node(tree, li, features, std::move(left), grad, hess, depth + 1, cfg);
    build_node(tree, ri, features, std::move(right), grad, hess, depth + 1, cfg);
}

}  // namespace detail

// Multiclass softmax boosting with per-sample loss scaled by the class
// weight of the sample's label. Weights are normalized to mean 1 first, so
// only their ratios matter.
inline GbdtModel fit(const Matrix& features, const std::vector<int>& labels,
                     const std::vector<double>& weights, const GbdtConfig& cfg) {
    const std::size_t n = features.rows;
    if (labels.size() != n) throw DimensionError("gbdt: labels length mismatch");
    const std::size_t m = weights.size();
    if (m == 0) throw InvalidArgument("gbdt: empty class weight vector");
    std::vector<std::size_t> class_count(m, 0);
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= m) throw InvalidArgument("gbdt: label out of range");
        ++class_count[static_cast<std::size_t>(y)];
    }
    for (std::size_t c = 0; c < m; ++c)
        if (class_count[c] == 0)
            throw DegenerateClassError("gbdt: class " + std::to_string(c) + " has no training samples");

    double wsum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw InvalidArgument("gbdt: class weights must be positive");
        wsum += w;
    }
    std::vector<double> wnorm(m);
    for (std::size_t c = 0; c < m; ++c) wnorm[c] = weights[c] * static_cast<double>(m) / wsum;

    GbdtModel model;
    model.num_features = features.cols;
    model.num_classes = m;
    model.config = cfg;

    Matrix margin(n, m, cfg.base_score);
    std::vector<double> grad(n), hess(n), prob(m);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});

    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        std::vector<Tree> round_trees(m);
        // Gradients from the margins at the start of the round for every
        // class tree, as in standard multiclass boosting.
        for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < m; ++k) prob[k] = margin(i, k);
                softmax_inplace(prob);
                const double w = wnorm[static_cast<std::size_t>(labels[i])];
                const double p = prob[c];
                grad[i] = w * (p - (static_cast<std::size_t>(labels[i]) == c ? 1.0 : 0.0));
                hess[i] = w * std::max(p * (1.0 - p), 1e-12);
            }
            Tree& tree = round_trees[c];
            tree.nodes.emplace_back();
            detail::build_node(tree, 0, features, std::vector<std::size_t>(all), grad, hess, 0, cfg);
        }
        for (std::size_t c = 0; c < m; ++c) {
            const Tree& tree = round_trees[c];
            for (std::size_t i = 0; i < n; ++i) margin(i, c) += tree.predict(&features.v[i * features.cols]);
        }
        model.trees.push_back(std::move(round_trees));
    }
    return model;
}

inline Matrix predict_proba(const GbdtModel& model, const Matrix& features) {
    if (features.cols != model.num_features) throw DimensionError("gbdt: feature width mismatch");
    Matrix out(features.rows, model.num_classes);
    parallel_for(features.rows, [&](std::size_t i) {
        std::vector<double> z(model.num_classes);
        model.margins(&features.v[i * features.cols], z.data());
        softmax_inplace(z);
        for (std::size_t c = 0; c < model.num_classes; ++c) out(i, c) = z[c];
    });
    return out;
}

inline double train_log_loss(const GbdtModel& model, const Matrix& features, const std::vector<int>& labels) {
    const Matrix p = predict_proba(model, features);
    double loss = 0.0;
    for (std::size_t i = 0; i < features.rows; ++i)
        loss -= std::log(std::max(p(i, static_cast<std::size_t>(labels[i])), 1e-300));
    return loss / static_cast<double>(features.rows);
}

struct FeatureImportance {
    std::vector<double> gains;    // normalized to sum 1 (all-zero when no splits)
    std::vector<std::size_t> ranking;  // descending gain, ties by index
};

inline FeatureImportance feature_importance(const GbdtModel& model) {
    FeatureImportance fi;
    fi.gains.assign(model.num_features, 0.0);
    for (const auto& round : model.trees)
        for (const auto& tree : round)
            for (const auto& node : tree.nodes)
                if (!node.is_leaf) fi.gains[static_cast<std::size_t>(node.feature)] += node.gain;
    const double total = std::accumulate(fi.gains.begin(), fi.gains.end(), 0.0);
    if (total > 0.0)
        for (double& g : fi.gains) g /= total;
    fi.ranking.resize(model.num_features);
    std::iota(fi.ranking.begin(), fi.ranking.end(), std::size_t{0});
    std::sort(fi.ranking.begin(), fi.ranking.end(), [&](std::size_t a, std::size_t b) {
        if (fi.gains[a] != fi.gains[b]) return fi.gains[a] > fi.gains[b];
        return a < b;
    });
    return fi;
}

// ---------------------------------------------------------------------------
// JSON model serialization

inline nlohmann::json to_json(const GbdtModel& model) {
    nlohmann::json j;
    j["num_features"] = model.num_features;
    j["num_classes"] = model.num_classes;
    j["learning_rate"] = model.config.learning_rate;
    j["rounds"] = model.config.rounds;
    j["max_depth"] = model.config.max_depth;
    j["lambda"] = model.config.lambda;
    j["base_score"] = model.config.base_score;
    j["trees"] = nlohmann::json::array();
    for (const auto& round : model.trees) {
        nlohmann::json jr = nlohmann::json::array();
        for (const auto& tree : round) {
            nlohmann::json jt = nlohmann::json::array();
            for (const auto& n : tree.nodes)
                jt.push_back({{"leaf", n.is_leaf},
                              {"feature", n.feature},
                              {"threshold", n.threshold},
                              {"left", n.left},
                              {"right", n.right},
                              {"value", n.value},
                              {"gain", n.gain}});
            jr.push_back(jt);
        }
        j["trees"].push_back(jr);
    }
    return j;
}

inline GbdtModel from_json(const nlohmann::json& j) {
    GbdtModel model;
    model.num_features = j.at("num_features");
    model.num_classes = j.at("num_classes");
    model.config.learning_rate = j.at("learning_rate");
    model.config.rounds = j.at("rounds");
    model.config.max_depth = j.at("max_depth");
    model.config.lambda = j.at("lambda");
    model.config.base_score = j.at("base_score");
    for (const auto& jr : j.at("trees")) {
        std::vector<Tree> round;
        for (const auto& jt : jr) {
            Tree tree;
            for (const auto& jn : jt) {
                TreeNode n;
                n.is_leaf = jn.at("leaf");
                n.feature = jn.at("feature");
                n.threshold = jn.at("threshold");
                n.left = jn.at("left");
                n.right = jn.at("right");
                n.value = jn.at("value");
                n.gain = jn.at("gain");
                tree.nodes.push_back(n);
            }
            round.push_back(std::move(tree));
        }
        model.trees.push_back(std::move(round));
    }
    return model;
}

inline void save_model(const GbdtModel& model, const std::filesystem::path& path) {
    io::write_text_file(path, to_json(model).dump());
}

inline GbdtModel load_model(const std::filesystem::path& path) {
    return from_json(nlohmann::json::parse(io::read_text_file(path)));
}

}  // namespace polarpath::gbdt
