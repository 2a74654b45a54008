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
#include "polarpath/io.hpp"
#include "polarpath/nn.hpp"
#include "polarpath/pixelclf.hpp"

namespace polarpath::distill {

struct Patch {
    nn::Tensor features;  // D x S x S
    nn::Tensor target;    // M x S x S probability crop
    std::size_t row = 0, col = 0;
};

struct PatchSet {
    std::vector<Patch> patches;
    std::string roi_id;
    std::size_t side = 0;
};

// Grid tiling with the final row/column shifted inward so the far border is
// covered; duplicate origins removed.
inline std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t side, std::size_t stride) {
    std::vector<std::size_t> origins;
    for (std::size_t o = 0; o + side <= extent; o += stride) origins.push_back(o);
    if (origins.empty() || origins.back() + side < extent) origins.push_back(extent - side);
    return origins;
}

inline PatchSet extract_patches(const data::PolarSlide& slide, const pixelclf::ProbabilityMap& pmap,
                                std::size_t side, std::size_t stride) {
    if (side > slide.height || side > slide.width) throw DimensionError("patch side exceeds slide size");
    if (stride == 0) throw InvalidArgument("stride must be >= 1");
    if (pmap.height != slide.height || pmap.width != slide.width)
        throw DimensionError("probability map size does not match slide");

    PatchSet set;
    set.roi_id = slide.slide_id;
    set.side = side;
    const auto rows = tile_origins(slide.height, side, stride);
    const auto cols = tile_origins(slide.width, side, stride);
    const std::size_t m = pmap.num_classes, d = slide.depth;
    for (std::size_t ro : rows) {
        for (std::size_t co : cols) {
            Patch p;
            p.row = ro;
            p.col = co;
            p.features = nn::Tensor(d, side, side);
            p.target = nn::Tensor(m, side, side);
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x) {
                    for (std::size_t k = 0; k < d; ++k)
                        p.features.at(k, y, x) = slide.at(ro + y, co + x, k);
                    for (std::size_t k = 0; k < m; ++k)
                        p.target.at(k, y, x) = pmap.at(ro + y, co + x, k);
                }
            set.patches.push_back(std::move(p));
        }
    }
    return set;
}

struct DistillConfig {
    std::size_t side = 64;
    std::size_t in_channels = 16;
    std::size_t num_classes = data::kNumStructures;
    std::size_t embed_dim = 64;
    std::vector<std::size_t> encoder_widths = {8, 16, 32};  // last block width == embed_dim
    std::vector<std::size_t> encoder_strides = {2, 2, 2, 1};
    std::size_t decoder_hidden = 32;

    std::size_t epochs = 15;
    std::size_t batch_size = 8;
    double learning_rate = 0.3;
    double holdout_fraction = 0.2;
    uint64_t seed = 0;
};

// Strided conv encoder with global average pooling, plus a two-conv decoder
// whose logits are bilinearly upsampled back to patch size and softmaxed.
struct DistillNet {
    DistillConfig cfg;
    std::vector<nn::Conv> encoder;  // tanh after every block
    nn::Conv dec1, dec2;            // tanh between

    static DistillNet make(const DistillConfig& cfg) {
        DistillNet net;
        net.cfg = cfg;
        std::vector<std::size_t> widths = cfg.encoder_widths;
        widths.push_back(cfg.embed_dim);
        if (widths.size() != cfg.encoder_strides.size())
            throw InvalidArgument("encoder widths/strides mismatch");
        Rng rng(derive_seed(cfg.seed, 0, 0xd157ULL));
        std::size_t prev = cfg.in_channels;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            net.encoder.emplace_back(prev, widths[i], 3, cfg.encoder_strides[i], 1);
            net.encoder.back().init(rng);
            prev = widths[i];
        }
        net.dec1 = nn::Conv(cfg.embed_dim, cfg.decoder_hidden, 3, 1, 1);
        net.dec1.init(rng);
        net.dec2 = nn::Conv(cfg.decoder_hidden, cfg.num_classes, 3, 1, 1);
        net.dec2.init(rng);
        return net;
    }

    std::vector<std::pair<std::string, std::vector<double>*>> param_blocks() {
        std::vector<std::pair<std::string, std::vector<double>*>> blocks;
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            blocks.emplace_back("enc" + std::to_string(i) + ".w", &encoder[i].weight);
            blocks.emplace_back("enc" + std::to_string(i) + ".b", &encoder[i].bias);
        }
        blocks.emplace_back("dec1.w", &dec1.weight);
        blocks.emplace_back("dec1.b", &dec1.bias);
        blocks.emplace_back("dec2.w", &dec2.weight);
        blocks.emplace_back("dec2.b", &dec2.bias);
        return blocks;
    }
};

// Per-parameter-block gradient buffers, same shapes and order as
// DistillNet::param_blocks().
using Gradients = std::vector<std::vector<double>>;

inline Gradients zero_gradients(DistillNet& net) {
    Gradients g;
    for (auto& [name, block] : net.param_blocks()) {
        (void)name;
        g.emplace_back(block->size(), 0.0);
    }
    return g;
}

struct ForwardTrace {
    std::vector<nn::Tensor> enc_act;  // tanh outputs per encoder block
    nn::Tensor dec1_act;
    nn::Tensor logits_up;  // upsampled decoder logits
    nn::Tensor prob;       // channel softmax, M x S x S
    nn::BilinearResize resize;
};

inline ForwardTrace forward_trace(const DistillNet& net, const nn::Tensor& patch) {
    if (patch.c != net.cfg.in_channels || patch.h != net.cfg.side || patch.w != net.cfg.side)
        throw DimensionError("patch dimensions do not match net config");
    ForwardTrace tr;
    const nn::Tensor* cur = &patch;
    for (const auto& conv : net.encoder) {
        tr.enc_act.push_back(nn::tanh_forward(conv.forward(*cur)));
        cur = &tr.enc_act.back();
    }
    tr.dec1_act = nn::tanh_forward(net.dec1.forward(*cur));
    const nn::Tensor logits = net.dec2.forward(tr.dec1_act);
    tr.resize = nn::BilinearResize(logits.h, logits.w, net.cfg.side, net.cfg.side);
    tr.logits_up = tr.resize.forward(logits);
    tr.prob = nn::channel_softmax(tr.logits_up);
    return tr;
}

inline std::vector<double> global_avg_pool(const nn::Tensor& t) {
    std::vector<double> out(t.c, 0.0);
    const double inv = 1.0 / static_cast<double>(t.h * t.w);
    for (std::size_t c = 0; c < t.c; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < t.h * t.w; ++i) acc += t.v[c * t.h * t.w + i];
        out[c] = acc * inv;
    }
    return out;
}

// Inference-mode forward: patch embedding plus the reconstructed per-pixel
// probability map.
inline std::pair<std::vector<double>, nn::Tensor> forward(const DistillNet& net, const nn::Tensor& patch) {
    auto tr = forward_trace(net, patch);
    return {global_avg_pool(tr.enc_act.back()), std::move(tr.prob)};
}

// Mean per-pixel RMSE between two M-vectors of probabilities.
inline double pixel_rmse(const nn::Tensor& prob, const nn::Tensor& target) {
    double total = 0.0;
    const std::size_t m = prob.c, npix = prob.h * prob.w;
    for (std::size_t y = 0; y < prob.h; ++y)
        for (std::size_t x = 0; x < prob.w; ++x) {
            double sq = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                const double d = prob.at(c, y, x) - target.at(c, y, x);
                sq += d * d;
            }
            total += std::sqrt(sq / static_cast<double>(m));
        }
    return total / static_cast<double>(npix);
}

// Loss and parameter gradients for one patch.
inline double backward(const DistillNet& net, const nn::Tensor& patch, const nn::Tensor& target,
                       Gradients& grads) {
    const auto tr = forward_trace(net, patch);
    const std::size_t m = tr.prob.c, npix = tr.prob.h * tr.prob.w;

    nn::Tensor dprob(tr.prob.c, tr.prob.h, tr.prob.w);
    double loss = 0.0;
    for (std::size_t y = 0; y < tr.prob.h; ++y)
        for (std::size_t x = 0; x < tr.prob.w; ++x) {
            double sq = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                const double d = tr.prob.at(c, y, x) - target.at(c, y, x);
                sq += d * d;
            }
            const double rmse = std::sqrt(sq / static_cast<double>(m));
            loss += rmse;
            if (rmse > 1e-12) {
                const double scale = 1.0 / (static_cast<double>(m) * rmse * static_cast<double>(npix));
                for (std::size_t c = 0; c < m; ++c)
                    dprob.at(c, y, x) = (tr.prob.at(c, y, x) - target.at(c, y, x)) * scale;
            }
        }
    loss /= static_cast<double>(npix);

    // Gradient block layout follows param_blocks(): encoder pairs first.
    const std::size_t nenc = net.encoder.size();
    nn::Tensor d_logits_up = nn::channel_softmax_backward(tr.prob, dprob);
    const std::size_t dec_h = tr.dec1_act.h, dec_w = tr.dec1_act.w;
    nn::Tensor d_logits = tr.resize.backward(dec_h, dec_w, d_logits_up);
    nn::Tensor d_dec1_act = net.dec2.backward(tr.dec1_act, d_logits, grads[2 * nenc + 2], grads[2 * nenc + 3]);
    nn::Tensor d_dec1_pre = nn::tanh_backward(tr.dec1_act, d_dec1_act);
    nn::Tensor d_enc = net.dec1.backward(tr.enc_act.back(), d_dec1_pre, grads[2 * nenc], grads[2 * nenc + 1]);

    for (std::size_t i = nenc; i-- > 0;) {
        const nn::Tensor& input = i == 0 ? patch : tr.enc_act[i - 1];
        nn::Tensor d_pre = nn::tanh_backward(tr.enc_act[i], d_enc);
        d_enc = net.encoder[i].backward(input, d_pre, grads[2 * i], grads[2 * i + 1]);
    }
    return loss;
}

struct DistillMetrics {
    double acc = 0.0;
    double loss = 0.0;
};

// acc: fraction of pixels whose decoder argmax matches the target argmax
// (ties to the lower index); loss: mean per-pixel RMSE.
inline DistillMetrics metrics(const DistillNet& net, const PatchSet& set) {
    DistillMetrics out;
    std::size_t hits = 0, total = 0;
    for (const auto& p : set.patches) {
        const auto tr = forward_trace(net, p.features);
        out.loss += pixel_rmse(tr.prob, p.target);
        for (std::size_t y = 0; y < tr.prob.h; ++y)
            for (std::size_t x = 0; x < tr.prob.w; ++x) {
                auto argmax = [&](const nn::Tensor& t) {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < t.c; ++c)
                        if (t.at(c, y, x) > t.at(best, y, x)) best = c;
                    return best;
                };
                hits += argmax(tr.prob) == argmax(p.target);
                ++total;
            }
    }
    out.loss /= static_cast<double>(std::max<std::size_t>(set.patches.size(), 1));
    out.acc = static_cast<double>(hits) / static_cast<double>(std::max<std::size_t>(total, 1));
    return out;
}

struct EpochRecord {
    std::size_t epoch = 0;
    DistillMetrics train;
    DistillMetrics holdout;
};

struct TrainResult {
    DistillNet net;
    std::vector<EpochRecord> history;
};

// Mini-batch gradient descent on the mean per-pixel RMSE. Per-patch
// gradients may be computed in parallel; they are summed in patch order, so
// results are independent of the thread count.
inline TrainResult train(const std::vector<PatchSet>& patchsets, const DistillConfig& cfg) {
    std::vector<const Patch*> all;
    for (const auto& set : patchsets)
        for (const auto& p : set.patches) all.push_back(&p);
    if (all.empty()) throw InvalidArgument("distill train: no patches");

    TrainResult result;
    result.net = DistillNet::make(cfg);
    DistillNet& net = result.net;

    Rng rng(derive_seed(cfg.seed, 1, 0x7247ULL));
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const std::size_t n_hold = static_cast<std::size_t>(
        std::floor(cfg.holdout_fraction * static_cast<double>(all.size())));
    PatchSet hold_set, train_set;
    hold_set.side = train_set.side = cfg.side;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_hold ? hold_set : train_set).patches.push_back(*all[order[i]]);

    auto record_epoch = [&](std::size_t epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train = metrics(net, train_set);
        if (!hold_set.patches.empty()) rec.holdout = metrics(net, hold_set);
        result.history.push_back(rec);
    };
    record_epoch(0);

    const std::size_t batch = std::max<std::size_t>(cfg.batch_size, 1);
    std::vector<std::size_t> idx(train_set.patches.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        for (std::size_t start = 0; start < idx.size(); start += batch) {
            const std::size_t count = std::min(batch, idx.size() - start);
            std::vector<Gradients> grads(count);
            std::vector<double> losses(count);
            parallel_for(count, [&](std::size_t k) {
                grads[k] = zero_gradients(net);
                const Patch& p = train_set.patches[idx[start + k]];
                losses[k] = backward(net, p.features, p.target, grads[k]);
            });
            for (double l : losses)
                if (!std::isfinite(l))
                    throw Error("distill train diverged at epoch " + std::to_string(epoch + 1));
            auto blocks = net.param_blocks();
            const double step = cfg.learning_rate / static_cast<double>(count);
            for (std::size_t b = 0; b < blocks.size(); ++b) {
                auto& params = *blocks[b].second;
                for (std::size_t k = 0; k < count; ++k) {
                    const auto& g = grads[k][b];
                    for (std::size_t j = 0; j < params.size(); ++j) params[j] -= step * g[j];
                }
            }
        }
        record_epoch(epoch + 1);
    }
    return result;
}

inline void save_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "epoch,split,acc,loss\n";
    ss.precision(17);
    for (const auto& rec : history) {
        ss << rec.epoch << ",train," << rec.train.acc << "," << rec.train.loss << "\n";
        ss << rec.epoch << ",holdout," << rec.holdout.acc << "," << rec.holdout.loss << "\n";
    }
    io::write_text_file(path, ss.str());
}

// ---------------------------------------------------------------------------
// Embeddings

struct PatchEmbeddingSet {
    Matrix embeddings;  // K x E
    std::string roi_id;
    std::vector<std::pair<std::size_t, std::size_t>> coords;
};

inline PatchEmbeddingSet embed(const DistillNet& net, const PatchSet& set) {
    PatchEmbeddingSet out;
    out.roi_id = set.roi_id;
    out.embeddings = Matrix(set.patches.size(), net.cfg.embed_dim);
    out.coords.resize(set.patches.size());
    parallel_for(set.patches.size(), [&](std::size_t k) {
        const auto& p = set.patches[k];
        nn::Tensor cur = nn::tanh_forward(net.encoder[0].forward(p.features));
        for (std::size_t i = 1; i < net.encoder.size(); ++i)
            cur = nn::tanh_forward(net.encoder[i].forward(cur));
        const auto e = global_avg_pool(cur);
        std::copy(e.begin(), e.end(), &out.embeddings.v[k * net.cfg.embed_dim]);
        out.coords[k] = {p.row, p.col};
    });
    return out;
}

inline void save_embeddings(const PatchEmbeddingSet& set, const std::filesystem::path& path) {
    auto os = io::open_out(path);
    os.write("PLEB", 4);
    io::write_u32(os, static_cast<uint32_t>(set.embeddings.rows));
    io::write_u32(os, static_cast<uint32_t>(set.embeddings.cols));
    std::vector<float> buf(set.embeddings.v.begin(), set.embeddings.v.end());
    io::write_f32_array(os, buf.data(), buf.size());
    if (!os) throw Error("write failed: " + path.string());
}

inline Matrix load_embeddings(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    io::expect_magic(is, "PLEB", path.string());
    const uint32_t k = io::read_u32(is, "PLEB patch count");
    const uint32_t e = io::read_u32(is, "PLEB embed dim");
    std::vector<float> buf(static_cast<std::size_t>(k) * e);
    io::read_f32_array(is, buf.data(), buf.size(), path.string());
    Matrix out(k, e);
    out.v.assign(buf.begin(), buf.end());
    return out;
}

// Net parameters in the shared PLNN container.
inline void save_net(DistillNet& net, const std::filesystem::path& path) {
    std::vector<std::pair<std::string, const std::vector<double>*>> blocks;
    for (auto& [name, block] : net.param_blocks()) blocks.emplace_back(name, block);
    nn::save_blocks(blocks, path);
}

inline void load_net(DistillNet& net, const std::filesystem::path& path) {
    const auto blocks = nn::load_blocks(path);
    auto dst = net.param_blocks();
    if (blocks.size() != dst.size()) throw FormatError("PLNN block count mismatch: " + path.string());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (blocks[i].first != dst[i].first || blocks[i].second.size() != dst[i].second->size())
            throw FormatError("PLNN block layout mismatch: " + path.string());
        *dst[i].second = blocks[i].second;
    }
}

}  // namespace polarpath::distill
