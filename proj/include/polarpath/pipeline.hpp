#pragma once

#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polarpath/config.hpp"
#include "polarpath/confident.hpp"
#include "polarpath/core.hpp"
#include "polarpath/data.hpp"
#include "polarpath/distill.hpp"
#include "polarpath/eval.hpp"
#include "polarpath/mil.hpp"
#include "polarpath/pixelclf.hpp"
#include "polarpath/render.hpp"

namespace polarpath::pipeline {

namespace fs = std::filesystem;

struct MissingArtifact : Error {
    MissingArtifact(const std::string& what, const std::string& producer)
        : Error(what + " not found; run the `" + producer + "` subcommand first"), producer_stage(producer) {}
    std::string producer_stage;
};

namespace detail {

inline void write_manifest(const nlohmann::json& cfg, const std::string& stage, nlohmann::json metrics,
                           const fs::path& out_dir) {
    nlohmann::json manifest;
    manifest["subcommand"] = stage;
    manifest["version"] = kVersion;
    manifest["seed"] = cfg.at("seed");
    manifest["config_hash"] = config::config_hash(cfg);
    manifest["metrics"] = std::move(metrics);
    io::write_text_file(out_dir / (stage + "_manifest.json"), manifest.dump(2));
}

inline uint64_t file_checksum(const fs::path& path) {
    const std::string bytes = io::read_text_file(path);
    return config::fnv1a64(bytes.data(), bytes.size());
}

inline data::CorpusConfig corpus_config(const nlohmann::json& cfg) {
    const auto& d = cfg.at("data");
    data::CorpusConfig cc;
    cc.malignant_count = d.at("malignant_count").get<std::size_t>();
    cc.benign_count = d.at("benign_count").get<std::size_t>();
    cc.borderline_count = d.at("borderline_count").get<std::size_t>();
    cc.train_fraction = d.at("train_fraction").get<double>();
    cc.coverage = d.at("coverage").get<double>();
    cc.noise = d.at("noise").get<double>();
    cc.seed = cfg.at("seed").get<uint64_t>();
    cc.generator = data::GeneratorConfig::defaults();
    cc.generator.height = d.at("height").get<std::size_t>();
    cc.generator.width = d.at("width").get<std::size_t>();
    const auto depth = d.at("depth").get<std::size_t>();
    if (depth != cc.generator.depth) {
        cc.generator.depth = depth;
        for (auto& row : cc.generator.class_means) row.resize(depth, 0.0);
        cc.generator.channel_sigma.resize(depth, 1.0);
    }
    return cc;
}

inline pixelclf::RecognizeConfig stage1_config(const nlohmann::json& cfg) {
    const auto& s = cfg.at("stage1");
    pixelclf::RecognizeConfig rc;
    rc.confidence_learning = s.at("confidence_learning").get<bool>();
    rc.folds = s.at("folds").get<std::size_t>();
    rc.booster.rounds = s.at("rounds").get<std::size_t>();
    rc.booster.max_depth = s.at("max_depth").get<std::size_t>();
    rc.booster.learning_rate = s.at("learning_rate").get<double>();
    return rc;
}

inline distill::DistillConfig stage2_config(const nlohmann::json& cfg) {
    const auto& s = cfg.at("stage2");
    distill::DistillConfig dc;
    dc.side = s.at("patch_side").get<std::size_t>();
    dc.in_channels = cfg.at("data").at("depth").get<std::size_t>();
    dc.embed_dim = s.at("embed_dim").get<std::size_t>();
    dc.epochs = s.at("epochs").get<std::size_t>();
    dc.batch_size = s.at("batch_size").get<std::size_t>();
    dc.learning_rate = s.at("learning_rate").get<double>();
    dc.holdout_fraction = s.at("holdout_fraction").get<double>();
    dc.seed = derive_seed(cfg.at("seed").get<uint64_t>(), 2, 0x57a2ULL);
    return dc;
}

inline mil::MilConfig stage3_config(const nlohmann::json& cfg) {
    const auto& s = cfg.at("stage3");
    mil::MilConfig mc;
    mc.embed_dim = cfg.at("stage2").at("embed_dim").get<std::size_t>();
    mc.latent = s.at("latent").get<std::size_t>();
    mc.dropout_p = s.at("dropout").get<double>();
    mc.epochs = s.at("epochs").get<std::size_t>();
    mc.batch_size = s.at("batch_size").get<std::size_t>();
    mc.learning_rate = s.at("learning_rate").get<double>();
    mc.seed = derive_seed(cfg.at("seed").get<uint64_t>(), 3, 0x57a3ULL);
    return mc;
}

}  // namespace detail

inline nlohmann::json run_gen(const nlohmann::json& cfg) {
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    const auto corpus = data::build_corpus(detail::corpus_config(cfg));
    data::save_corpus(corpus, out_dir / "corpus");

    nlohmann::json metrics;
    metrics["slide_count"] = corpus.slides.size();
    nlohmann::json checksums = nlohmann::json::object();
    for (const auto& rec : corpus.slides) {
        const auto path = out_dir / "corpus" / (rec.slide.slide_id + ".plrs");
        char buf[19];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(detail::file_checksum(path)));
        checksums[rec.slide.slide_id] = buf;
    }
    metrics["slide_checksums"] = checksums;
    detail::write_manifest(cfg, "gen", metrics, out_dir);
    return metrics;
}

inline nlohmann::json run_stage1(const nlohmann::json& cfg) {
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    if (!fs::exists(out_dir / "corpus" / "corpus.json")) throw MissingArtifact("corpus", "gen");
    const auto corpus = data::load_corpus(out_dir / "corpus");
    const auto rc = detail::stage1_config(cfg);
    fs::create_directories(out_dir / "stage1");

    double train_acc = 0.0, test_acc = 0.0;
    std::size_t pruned_total = 0;
    std::vector<double> gain_sum;
    for (std::size_t i = 0; i < corpus.slides.size(); ++i) {
        const auto& rec = corpus.slides[i];
        auto slide_cfg = rc;
        slide_cfg.seed = derive_seed(cfg.at("seed").get<uint64_t>(), i, 0x57a1ULL);
        const auto res = pixelclf::recognize_structures(rec.slide, rec.annotation, slide_cfg);
        pixelclf::save_probability_map(res.map, out_dir / "stage1" / (rec.slide.slide_id + ".plpm"));
        pruned_total += res.pruned_count;

        const auto acc = eval::detail::slide_accuracy(rec, rec.annotation, res.map);
        train_acc += acc.train;
        test_acc += acc.test;

        const auto fi = gbdt::feature_importance(res.model);
        if (gain_sum.empty()) gain_sum.assign(fi.gains.size(), 0.0);
        for (std::size_t d = 0; d < fi.gains.size(); ++d) gain_sum[d] += fi.gains[d];
    }
    const double ns = static_cast<double>(corpus.slides.size());
    for (double& g : gain_sum) g /= ns;

    gbdt::FeatureImportance mean_fi;
    mean_fi.gains = gain_sum;
    mean_fi.ranking.resize(gain_sum.size());
    std::iota(mean_fi.ranking.begin(), mean_fi.ranking.end(), std::size_t{0});
    std::sort(mean_fi.ranking.begin(), mean_fi.ranking.end(), [&](std::size_t a, std::size_t b) {
        if (gain_sum[a] != gain_sum[b]) return gain_sum[a] > gain_sum[b];
        return a < b;
    });
    pixelclf::save_importance_csv(mean_fi, corpus.slides.front().slide.channel_names,
                                  out_dir / "stage1" / "importance.csv");

    nlohmann::json metrics;
    metrics["mean_annotated_accuracy"] = train_acc / ns;
    metrics["mean_heldout_accuracy"] = test_acc / ns;
    metrics["pruned_pixels"] = pruned_total;
    metrics["top_channel"] = mean_fi.ranking.front();
    detail::write_manifest(cfg, "stage1", metrics, out_dir);
    return metrics;
}

inline nlohmann::json run_stage2(const nlohmann::json& cfg) {
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    if (!fs::exists(out_dir / "corpus" / "corpus.json")) throw MissingArtifact("corpus", "gen");
    const auto corpus = data::load_corpus(out_dir / "corpus");
    for (const auto& rec : corpus.slides)
        if (!fs::exists(out_dir / "stage1" / (rec.slide.slide_id + ".plpm")))
            throw MissingArtifact("stage-1 probability maps", "stage1");

    auto dc = detail::stage2_config(cfg);
    const auto stride = cfg.at("stage2").at("stride").get<std::size_t>();
    fs::create_directories(out_dir / "stage2");

    std::vector<distill::PatchSet> all_sets;
    for (const auto& rec : corpus.slides) {
        const auto pm = pixelclf::load_probability_map(out_dir / "stage1" / (rec.slide.slide_id + ".plpm"));
        all_sets.push_back(distill::extract_patches(rec.slide, pm, dc.side, stride));
    }

    // Training pool: patches from train-split slides, optionally subsampled.
    std::vector<const distill::Patch*> pool;
    for (std::size_t i = 0; i < corpus.slides.size(); ++i)
        if (corpus.slides[i].split == data::Split::Train)
            for (const auto& p : all_sets[i].patches) pool.push_back(&p);
    const auto max_patches = cfg.at("stage2").at("max_train_patches").get<std::size_t>();
    distill::PatchSet train_pool;
    train_pool.side = dc.side;
    if (pool.size() > max_patches) {
        Rng rng(derive_seed(dc.seed, 9, 0x9a7cULL));
        std::vector<std::size_t> order(pool.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        for (std::size_t i = 0; i < max_patches; ++i) train_pool.patches.push_back(*pool[order[i]]);
    } else {
        for (const auto* p : pool) train_pool.patches.push_back(*p);
    }

    auto result = distill::train({train_pool}, dc);
    distill::save_net(result.net, out_dir / "stage2" / "net.plnn");
    distill::save_history_csv(result.history, out_dir / "stage2" / "history.csv");
    for (std::size_t i = 0; i < corpus.slides.size(); ++i) {
        const auto emb = distill::embed(result.net, all_sets[i]);
        distill::save_embeddings(emb, out_dir / "stage2" / (corpus.slides[i].slide.slide_id + ".pleb"));
    }

    nlohmann::json metrics;
    const auto& last = result.history.back();
    metrics["epochs"] = dc.epochs;
    metrics["train_patches"] = train_pool.patches.size();
    metrics["final_train_acc"] = last.train.acc;
    metrics["final_train_loss"] = last.train.loss;
    metrics["final_holdout_acc"] = last.holdout.acc;
    metrics["final_holdout_loss"] = last.holdout.loss;
    detail::write_manifest(cfg, "stage2", metrics, out_dir);
    return metrics;
}

inline nlohmann::json run_stage3(const nlohmann::json& cfg) {
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    if (!fs::exists(out_dir / "corpus" / "corpus.json")) throw MissingArtifact("corpus", "gen");
    const auto corpus = data::load_corpus(out_dir / "corpus");
    for (const auto& rec : corpus.slides)
        if (!fs::exists(out_dir / "stage2" / (rec.slide.slide_id + ".pleb")))
            throw MissingArtifact("stage-2 embeddings", "stage2");

    auto mc = detail::stage3_config(cfg);
    fs::create_directories(out_dir / "stage3");

    std::vector<mil::Bag> train_bags, test_bags, all_bags;
    for (const auto& rec : corpus.slides) {
        mil::Bag bag;
        bag.embeddings = distill::load_embeddings(out_dir / "stage2" / (rec.slide.slide_id + ".pleb"));
        bag.label = rec.slide.tumor_class;
        bag.roi_id = rec.slide.slide_id;
        all_bags.push_back(bag);
        (rec.split == data::Split::Train ? train_bags : test_bags).push_back(std::move(bag));
    }

    auto model = mil::train(train_bags, mc, test_bags);
    mil::save_params(model.attention, model.heads, out_dir / "stage3" / "params.plnn");
    mil::export_roi_embeddings(model.attention, model.heads, all_bags,
                               out_dir / "stage3" / "roi_embeddings.csv");

    // Validation ROC/AUC per class plus micro average.
    Matrix probs(test_bags.size(), mil::kNumHeads);
    std::vector<int> labels(test_bags.size());
    for (std::size_t i = 0; i < test_bags.size(); ++i) {
        const auto pred = mil::predict(model.attention, model.heads, test_bags[i].embeddings);
        for (std::size_t c = 0; c < mil::kNumHeads; ++c) probs(i, c) = pred.class_probs[c];
        labels[i] = static_cast<int>(test_bags[i].label);
    }
    nlohmann::json metrics;
    metrics["micro_average_auc"] = eval::micro_average_auc(probs, labels);
    nlohmann::json per_class = nlohmann::json::object();
    for (std::size_t c = 0; c < mil::kNumHeads; ++c) {
        std::vector<double> scores(test_bags.size());
        std::vector<int> binary(test_bags.size());
        for (std::size_t i = 0; i < test_bags.size(); ++i) {
            scores[i] = probs(i, c);
            binary[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
        }
        const auto curve = eval::roc(scores, binary);
        const auto name = data::tumor_class_name(static_cast<data::TumorClass>(c));
        per_class[name] = curve.auc;
        eval::save_roc_csv(curve, out_dir / "stage3" / ("roc_" + std::string(name) + ".csv"));
    }
    metrics["per_class_auc"] = per_class;
    metrics["train_micro_auc"] = model.history.back().train_micro_auc;
    detail::write_manifest(cfg, "stage3", metrics, out_dir);
    return metrics;
}

inline nlohmann::json run_pipeline(const nlohmann::json& cfg) {
    nlohmann::json metrics;
    metrics["gen"] = run_gen(cfg);
    metrics["stage1"] = run_stage1(cfg);
    metrics["stage2"] = run_stage2(cfg);
    metrics["stage3"] = run_stage3(cfg);
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    metrics["micro_average_auc"] = metrics["stage3"]["micro_average_auc"];
    metrics["per_class_auc"] = metrics["stage3"]["per_class_auc"];
    detail::write_manifest(cfg, "pipeline", metrics, out_dir);
    return metrics;
}

inline nlohmann::json run_noise_exp(const nlohmann::json& cfg) {
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    if (!fs::exists(out_dir / "corpus" / "corpus.json")) throw MissingArtifact("corpus", "gen");
    auto corpus = data::load_corpus(out_dir / "corpus");
    const auto max_slides = cfg.at("noise_exp").at("max_slides").get<std::size_t>();
    if (corpus.slides.size() > max_slides) corpus.slides.resize(max_slides);

    const auto levels = cfg.at("noise_exp").at("levels").get<std::vector<double>>();
    auto rc = detail::stage1_config(cfg);
    const auto report =
        eval::noise_sweep(corpus, levels, derive_seed(cfg.at("seed").get<uint64_t>(), 4, 0x57a4ULL), rc);
    fs::create_directories(out_dir / "noise_exp");
    eval::save_noise_sweep_csv(report, out_dir / "noise_exp" / "sweep.csv");
    io::write_text_file(out_dir / "noise_exp" / "sweep.json", eval::noise_sweep_json(report).dump(2));
    detail::write_manifest(cfg, "noise-exp", eval::noise_sweep_json(report), out_dir);
    return eval::noise_sweep_json(report);
}

inline nlohmann::json run_render(const nlohmann::json& cfg) {
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    if (!fs::exists(out_dir / "corpus" / "corpus.json")) throw MissingArtifact("corpus", "gen");
    const auto corpus = data::load_corpus(out_dir / "corpus");
    fs::create_directories(out_dir / "render");
    const auto palette = render::Palette::default_he();
    nlohmann::json metrics;
    std::size_t rendered = 0;
    for (const auto& rec : corpus.slides) {
        const auto pm_path = out_dir / "stage1" / (rec.slide.slide_id + ".plpm");
        if (!fs::exists(pm_path)) throw MissingArtifact("stage-1 probability maps", "stage1");
        const auto pm = pixelclf::load_probability_map(pm_path);
        render::write_image(render::pseudo_stain(pm, palette),
                            out_dir / "render" / (rec.slide.slide_id + ".ppm"));
        ++rendered;
    }
    metrics["rendered"] = rendered;
    detail::write_manifest(cfg, "render", metrics, out_dir);
    return metrics;
}

inline nlohmann::json run_report(const nlohmann::json& cfg) {
    const fs::path out_dir = cfg.at("output_dir").get<std::string>();
    nlohmann::json report;
    for (const char* stage : {"gen", "stage1", "stage2", "stage3", "pipeline", "noise-exp", "render"}) {
        const auto path = out_dir / (std::string(stage) + "_manifest.json");
        if (fs::exists(path)) report[stage] = nlohmann::json::parse(io::read_text_file(path));
    }
    if (report.empty()) throw MissingArtifact("stage manifests", "pipeline");
    io::write_text_file(out_dir / "report.json", report.dump(2));
    return report;
}

}  // namespace polarpath::pipeline
