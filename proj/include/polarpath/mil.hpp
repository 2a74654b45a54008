#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "polarpath/core.hpp"
#include "polarpath/data.hpp"
#include "polarpath/distill.hpp"
#include "polarpath/eval.hpp"
#include "polarpath/io.hpp"
#include "polarpath/nn.hpp"

namespace polarpath::mil {

inline constexpr std::size_t kNumHeads = 3;  // one-vs-rest: malignant / benign / borderline

struct AttentionParams {
    Matrix v_proj;          // latent x E, tanh branch
    Matrix u_proj;          // latent x E, sigmoid gate branch
    std::vector<double> w;  // 1 x latent
    double dropout_p = 0.25;

    std::size_t latent() const { return v_proj.rows; }
    std::size_t embed_dim() const { return v_proj.cols; }
};

struct HeadParams {
    Matrix weights;            // kNumHeads x E
    std::vector<double> bias;  // kNumHeads
};

enum class Mode { Train, Infer };

namespace detail {

struct AttentionTrace {
    // Per patch: projected branches after activation (and dropout in train
    // mode), pre-softmax logits, and the final weights.
    std::vector<std::vector<double>> tanh_act, sigm_act;      // K x latent
    std::vector<std::vector<double>> tanh_mask, sigm_mask;    // dropout scale factors
    std::vector<double> logits;                               // K
    std::vector<double> weights;                              // K
};

inline AttentionTrace attention_trace(const AttentionParams& p, const Matrix& emb, Mode mode,
                                      uint64_t seed) {
    const std::size_t K = emb.rows, L = p.latent(), E = p.embed_dim();
    if (emb.cols != E) throw DimensionError("attention: embedding width mismatch");
    if (K == 0) throw InvalidArgument("attention: empty bag");

    AttentionTrace tr;
    tr.tanh_act.assign(K, std::vector<double>(L));
    tr.sigm_act.assign(K, std::vector<double>(L));
    tr.logits.assign(K, 0.0);
    const bool drop = mode == Mode::Train && p.dropout_p > 0.0;
    Rng rng(derive_seed(seed, 0, 0xd209ULL));
    if (drop) {
        tr.tanh_mask.assign(K, std::vector<double>(L));
        tr.sigm_mask.assign(K, std::vector<double>(L));
    }
    const double keep_scale = drop ? 1.0 / (1.0 - p.dropout_p) : 1.0;

    for (std::size_t k = 0; k < K; ++k) {
        const double* e = &emb.v[k * E];
        for (std::size_t l = 0; l < L; ++l) {
            double hv = 0.0, hu = 0.0;
            for (std::size_t j = 0; j < E; ++j) {
                hv += p.v_proj(l, j) * e[j];
                hu += p.u_proj(l, j) * e[j];
            }
            double t = std::tanh(hv);
            double s = sigmoid(hu);
            if (drop) {
                tr.tanh_mask[k][l] = rng.uniform() < p.dropout_p ? 0.0 : keep_scale;
                tr.sigm_mask[k][l] = rng.uniform() < p.dropout_p ? 0.0 : keep_scale;
                t *= tr.tanh_mask[k][l];
                s *= tr.sigm_mask[k][l];
            }
            tr.tanh_act[k][l] = t;
            tr.sigm_act[k][l] = s;
            tr.logits[k] += p.w[l] * t * s;
        }
    }
    // Softmax with a value-ordered denominator sum, so the weights are
    // exactly equivariant under patch permutations.
    const double zmax = *std::max_element(tr.logits.begin(), tr.logits.end());
    tr.weights.resize(K);
    std::vector<double> exps(K);
    for (std::size_t k = 0; k < K; ++k) exps[k] = std::exp(tr.logits[k] - zmax);
    std::vector<double> terms = exps;
    const double denom = canonical_sum(terms);
    for (std::size_t k = 0; k < K; ++k) tr.weights[k] = exps[k] / denom;
    return tr;
}

}  // namespace detail

// Gated attention weights over a bag: softmax_k of
// w . (tanh(V e_k) * sigm(U e_k)), elementwise gate.
inline std::vector<double> attention_weights(const AttentionParams& p, const Matrix& emb, Mode mode,
                                             uint64_t seed = 0) {
    return detail::attention_trace(p, emb, mode, seed).weights;
}

inline std::vector<double> aggregate(const std::vector<double>& weights, const Matrix& emb) {
    if (weights.size() != emb.rows) throw DimensionError("aggregate: weight/bag length mismatch");
    std::vector<double> out(emb.cols, 0.0);
    std::vector<double> terms(emb.rows);
    for (std::size_t j = 0; j < emb.cols; ++j) {
        // Value-ordered summation keeps e_roi exactly permutation invariant.
        for (std::size_t k = 0; k < emb.rows; ++k) terms[k] = weights[k] * emb(k, j);
        out[j] = canonical_sum(terms);
    }
    return out;
}

struct RoiPrediction {
    std::vector<double> attention;      // K, sums to 1
    std::vector<double> roi_embedding;  // E
    std::vector<double> head_scores;    // kNumHeads sigmoids
    std::vector<double> class_probs;    // softmax of head scores
    data::TumorClass predicted_class = data::TumorClass::Unknown;
};

inline RoiPrediction predict(const AttentionParams& p, const HeadParams& h, const Matrix& emb) {
    RoiPrediction out;
    out.attention = attention_weights(p, emb, Mode::Infer);
    out.roi_embedding = aggregate(out.attention, emb);
    out.head_scores.resize(kNumHeads);
    for (std::size_t c = 0; c < kNumHeads; ++c) {
        double z = h.bias[c];
        for (std::size_t j = 0; j < h.weights.cols; ++j) z += h.weights(c, j) * out.roi_embedding[j];
        out.head_scores[c] = sigmoid(z);
    }
    out.class_probs = out.head_scores;
    softmax_inplace(out.class_probs);
    const auto best = std::max_element(out.class_probs.begin(), out.class_probs.end());
    out.predicted_class = static_cast<data::TumorClass>(best - out.class_probs.begin());
    return out;
}

struct Bag {
    Matrix embeddings;  // K x E
    data::TumorClass label = data::TumorClass::Unknown;
    std::string roi_id;
};

struct MilConfig {
    std::size_t embed_dim = 64;
    std::size_t latent = 256;
    double dropout_p = 0.25;
    std::size_t epochs = 30;
    std::size_t batch_size = 4;
    double learning_rate = 0.05;
    double validation_fraction = 0.25;  // used when no explicit validation bags
    uint64_t seed = 0;
};

struct MilGradients {
    Matrix v_proj, u_proj;
    std::vector<double> w;
    Matrix head_w;
    std::vector<double> head_b;
};

inline MilGradients zero_mil_gradients(const AttentionParams& p, const HeadParams& h) {
    MilGradients g;
    g.v_proj = Matrix(p.v_proj.rows, p.v_proj.cols);
    g.u_proj = Matrix(p.u_proj.rows, p.u_proj.cols);
    g.w.assign(p.w.size(), 0.0);
    g.head_w = Matrix(h.weights.rows, h.weights.cols);
    g.head_b.assign(h.bias.size(), 0.0);
    return g;
}

// Sum of three one-vs-rest binary cross-entropies for one bag, with
// gradients for every trainable tensor. Dropout is active only in Train
// mode.
inline double bag_backward(const AttentionParams& p, const HeadParams& h, const Bag& bag, Mode mode,
                           uint64_t step_seed, MilGradients& g) {
    const std::size_t K = bag.embeddings.rows, E = p.embed_dim(), L = p.latent();
    const auto tr = detail::attention_trace(p, bag.embeddings, mode, step_seed);
    const auto e_roi = aggregate(tr.weights, bag.embeddings);

    double loss = 0.0;
    std::vector<double> de_roi(E, 0.0);
    for (std::size_t c = 0; c < kNumHeads; ++c) {
        double z = h.bias[c];
        for (std::size_t j = 0; j < E; ++j) z += h.weights(c, j) * e_roi[j];
        const double score = sigmoid(z);
        const double y = bag.label == static_cast<data::TumorClass>(c) ? 1.0 : 0.0;
        loss -= y * std::log(std::max(score, 1e-300)) + (1.0 - y) * std::log(std::max(1.0 - score, 1e-300));
        const double dz = score - y;
        g.head_b[c] += dz;
        for (std::size_t j = 0; j < E; ++j) {
            g.head_w(c, j) += dz * e_roi[j];
            de_roi[j] += dz * h.weights(c, j);
        }
    }

    // Through the aggregation and attention softmax.
    std::vector<double> da(K, 0.0);
    double dot = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < E; ++j) da[k] += de_roi[j] * bag.embeddings(k, j);
        dot += da[k] * tr.weights[k];
    }
    const bool drop = mode == Mode::Train && p.dropout_p > 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const double dz = tr.weights[k] * (da[k] - dot);
        if (dz == 0.0) continue;
        const double* e = &bag.embeddings.v[k * E];
        for (std::size_t l = 0; l < L; ++l) {
            const double t = tr.tanh_act[k][l], s = tr.sigm_act[k][l];
            g.w[l] += dz * t * s;
            double dt = dz * p.w[l] * s;
            double ds = dz * p.w[l] * t;
            double t_raw = t, s_raw = s;
            if (drop) {
                // Undo the mask scaling to recover raw activations; a zeroed
                // unit contributes no gradient.
                if (tr.tanh_mask[k][l] == 0.0) {
                    dt = 0.0;
                } else {
                    t_raw = t / tr.tanh_mask[k][l];
                    dt *= tr.tanh_mask[k][l];
                }
                if (tr.sigm_mask[k][l] == 0.0) {
                    ds = 0.0;
                } else {
                    s_raw = s / tr.sigm_mask[k][l];
                    ds *= tr.sigm_mask[k][l];
                }
            }
            const double dhv = dt * (1.0 - t_raw * t_raw);
            const double dhu = ds * s_raw * (1.0 - s_raw);
            for (std::size_t j = 0; j < E; ++j) {
                g.v_proj(l, j) += dhv * e[j];
                g.u_proj(l, j) += dhu * e[j];
            }
        }
    }
    return loss;
}

struct MilEpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_micro_auc = 0.0;
    double val_micro_auc = 0.0;
};

struct MilModel {
    AttentionParams attention;
    HeadParams heads;
    std::vector<MilEpochRecord> history;
};

inline std::pair<AttentionParams, HeadParams> init_params(const MilConfig& cfg) {
    AttentionParams p;
    p.v_proj = Matrix(cfg.latent, cfg.embed_dim);
    p.u_proj = Matrix(cfg.latent, cfg.embed_dim);
    p.w.assign(cfg.latent, 0.0);
    p.dropout_p = cfg.dropout_p;
    Rng rng(derive_seed(cfg.seed, 0, 0x312aULL));
    const double a = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    for (double& x : p.v_proj.v) x = rng.uniform(-a, a);
    for (double& x : p.u_proj.v) x = rng.uniform(-a, a);
    const double aw = 1.0 / std::sqrt(static_cast<double>(cfg.latent));
    for (double& x : p.w) x = rng.uniform(-aw, aw);

    HeadParams h;
    h.weights = Matrix(kNumHeads, cfg.embed_dim);
    h.bias.assign(kNumHeads, 0.0);
    for (double& x : h.weights.v) x = rng.uniform(-a, a);
    return {std::move(p), std::move(h)};
}

inline double micro_auc_on(const AttentionParams& p, const HeadParams& h, const std::vector<Bag>& bags) {
    Matrix probs(bags.size(), kNumHeads);
    std::vector<int> labels(bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) {
        const auto pred = predict(p, h, bags[i].embeddings);
        for (std::size_t c = 0; c < kNumHeads; ++c) probs(i, c) = pred.class_probs[c];
        labels[i] = static_cast<int>(bags[i].label);
    }
    return eval::micro_average_auc(probs, labels);
}

inline MilModel train(const std::vector<Bag>& bags, const MilConfig& cfg,
                      const std::vector<Bag>& validation_bags = {}) {
    std::vector<int> class_seen(kNumHeads, 0);
    for (const auto& b : bags) {
        if (b.embeddings.cols != cfg.embed_dim) throw DimensionError("mil train: embedding width mismatch");
        const int c = static_cast<int>(b.label);
        if (c < 0 || c >= static_cast<int>(kNumHeads)) throw InvalidArgument("mil train: bag label out of range");
        class_seen[static_cast<std::size_t>(c)] = 1;
    }
    for (std::size_t c = 0; c < kNumHeads; ++c)
        if (!class_seen[c]) throw DegenerateClassError("mil train: no bags for class " + std::to_string(c));

    std::vector<Bag> train_bags = bags, val_bags = validation_bags;
    if (val_bags.empty() && cfg.validation_fraction > 0.0 && bags.size() >= 4) {
        Rng rng(derive_seed(cfg.seed, 2, 0x5917ULL));
        std::vector<std::size_t> order(bags.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        const std::size_t n_val =
            static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(bags.size())));
        train_bags.clear();
        for (std::size_t i = 0; i < order.size(); ++i)
            (i < n_val ? val_bags : train_bags).push_back(bags[order[i]]);
    }

    MilModel model;
    std::tie(model.attention, model.heads) = init_params(cfg);

    Rng rng(derive_seed(cfg.seed, 1, 0x7e41ULL));
    std::vector<std::size_t> idx(train_bags.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});

    auto record = [&](std::size_t epoch, double loss) {
        MilEpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss;
        rec.train_micro_auc = micro_auc_on(model.attention, model.heads, train_bags);
        rec.val_micro_auc = val_bags.empty() ? 0.0 : micro_auc_on(model.attention, model.heads, val_bags);
        model.history.push_back(rec);
    };

    uint64_t step = 0;
    const std::size_t batch = std::max<std::size_t>(cfg.batch_size, 1);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < idx.size(); start += batch) {
            const std::size_t count = std::min(batch, idx.size() - start);
            auto grads = zero_mil_gradients(model.attention, model.heads);
            for (std::size_t k = 0; k < count; ++k) {
                const uint64_t step_seed = derive_seed(cfg.seed, ++step, 0xd20bULL);
                epoch_loss += bag_backward(model.attention, model.heads, train_bags[idx[start + k]],
                                           Mode::Train, step_seed, grads);
            }
            if (!std::isfinite(epoch_loss))
                throw Error("mil train diverged at epoch " + std::to_string(epoch + 1));
            const double lr = cfg.learning_rate / static_cast<double>(count);
            for (std::size_t i = 0; i < grads.v_proj.v.size(); ++i)
                model.attention.v_proj.v[i] -= lr * grads.v_proj.v[i];
            for (std::size_t i = 0; i < grads.u_proj.v.size(); ++i)
                model.attention.u_proj.v[i] -= lr * grads.u_proj.v[i];
            for (std::size_t i = 0; i < grads.w.size(); ++i) model.attention.w[i] -= lr * grads.w[i];
            for (std::size_t i = 0; i < grads.head_w.v.size(); ++i)
                model.heads.weights.v[i] -= lr * grads.head_w.v[i];
            for (std::size_t i = 0; i < grads.head_b.size(); ++i) model.heads.bias[i] -= lr * grads.head_b[i];
        }
        record(epoch + 1, epoch_loss / static_cast<double>(std::max<std::size_t>(train_bags.size(), 1)));
    }
    if (model.history.empty()) record(0, 0.0);
    return model;
}

// CSV export of aggregated ROI embeddings for external 2-D projection.
inline void export_roi_embeddings(const AttentionParams& p, const HeadParams& h,
                                  const std::vector<Bag>& bags, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "roi_id,true_class,pred_class";
    const std::size_t e_dim = p.embed_dim();
    for (std::size_t j = 0; j < e_dim; ++j) ss << ",e_" << j;
    ss << "\n";
    ss.precision(17);
    for (const auto& bag : bags) {
        const auto pred = predict(p, h, bag.embeddings);
        ss << bag.roi_id << "," << data::tumor_class_name(bag.label) << ","
           << data::tumor_class_name(pred.predicted_class);
        for (double v : pred.roi_embedding) ss << "," << v;
        ss << "\n";
    }
    io::write_text_file(path, ss.str());
}

inline void save_params(const AttentionParams& p, const HeadParams& h, const std::filesystem::path& path) {
    nn::save_blocks({{"attention.v", &p.v_proj.v},
                     {"attention.u", &p.u_proj.v},
                     {"attention.w", &p.w},
                     {"heads.w", &h.weights.v},
                     {"heads.b", &h.bias}},
                    path);
}

inline std::pair<AttentionParams, HeadParams> load_params(const std::filesystem::path& path,
                                                          const MilConfig& cfg) {
    auto [p, h] = init_params(cfg);
    const auto blocks = nn::load_blocks(path);
    if (blocks.size() != 5) throw FormatError("PLNN block count mismatch: " + path.string());
    auto expect = [&](std::size_t i, const std::string& name, std::vector<double>& dst) {
        if (blocks[i].first != name || blocks[i].second.size() != dst.size())
            throw FormatError("PLNN block layout mismatch: " + path.string());
        dst = blocks[i].second;
    };
    expect(0, "attention.v", p.v_proj.v);
    expect(1, "attention.u", p.u_proj.v);
    expect(2, "attention.w", p.w);
    expect(3, "heads.w", h.weights.v);
    expect(4, "heads.b", h.bias);
    return {std::move(p), std::move(h)};
}

}  // namespace polarpath::mil
