#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "polarpath/core.hpp"
#include "polarpath/io.hpp"

namespace polarpath::config {

// Full run configuration with embedded defaults; JSON files override keys,
// unknown keys are rejected.
inline nlohmann::json default_config() {
    return nlohmann::json{
        {"seed", 1},
        {"output_dir", "out"},
        {"data",
         {{"malignant_count", 18},
          {"benign_count", 16},
          {"borderline_count", 12},
          {"train_fraction", 2.0 / 3.0},
          {"coverage", 0.05},
          {"noise", 0.0},
          {"height", 256},
          {"width", 256},
          {"depth", 16}}},
        {"stage1",
         {{"confidence_learning", true},
          {"folds", 5},
          {"rounds", 50},
          {"max_depth", 4},
          {"learning_rate", 0.2}}},
        {"stage2",
         {{"patch_side", 64},
          {"stride", 64},
          {"embed_dim", 64},
          {"epochs", 15},
          {"batch_size", 8},
          {"learning_rate", 0.3},
          {"holdout_fraction", 0.2},
          {"max_train_patches", 240}}},
        {"stage3",
         {{"latent", 256},
          {"dropout", 0.25},
          {"epochs", 30},
          {"batch_size", 4},
          {"learning_rate", 0.05}}},
        {"noise_exp", {{"levels", {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}}, {"max_slides", 3}}}};
}

namespace detail {

inline void merge_checked(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix) {
    for (const auto& [key, value] : overlay.items()) {
        if (!base.contains(key))
            throw InvalidArgument("unknown config key: " + (prefix.empty() ? key : prefix + "." + key));
        if (base[key].is_object() && value.is_object()) {
            merge_checked(base[key], value, prefix.empty() ? key : prefix + "." + key);
        } else {
            base[key] = value;
        }
    }
}

}  // namespace detail

inline nlohmann::json load_config(const std::filesystem::path& path) {
    auto cfg = default_config();
    if (!path.empty()) {
        nlohmann::json overlay;
        try {
            overlay = nlohmann::json::parse(io::read_text_file(path));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("config parse error: " + std::string(e.what()));
        }
        detail::merge_checked(cfg, overlay, "");
    }
    return cfg;
}

inline void validate_config(const nlohmann::json& cfg) {
    const auto& d = cfg.at("data");
    if (d.at("train_fraction").get<double>() <= 0.0 || d.at("train_fraction").get<double>() >= 1.0)
        throw InvalidArgument("data.train_fraction must be in (0, 1)");
    if (d.at("coverage").get<double>() <= 0.0 || d.at("coverage").get<double>() > 1.0)
        throw InvalidArgument("data.coverage must be in (0, 1]");
    if (d.at("noise").get<double>() < 0.0 || d.at("noise").get<double>() > 1.0)
        throw InvalidArgument("data.noise must be in [0, 1]");
    if (cfg.at("stage1").at("folds").get<int>() < 2) throw InvalidArgument("stage1.folds must be >= 2");
    if (cfg.at("stage2").at("patch_side").get<int>() < 8)
        throw InvalidArgument("stage2.patch_side must be >= 8");
    const double p = cfg.at("stage3").at("dropout").get<double>();
    if (p < 0.0 || p >= 1.0) throw InvalidArgument("stage3.dropout must be in [0, 1)");
}

// Switches stage 2 to the full-scale settings (224-pixel patches, 1024-wide
// embeddings).
inline void apply_paper_scale(nlohmann::json& cfg) {
    cfg["stage2"]["patch_side"] = 224;
    cfg["stage2"]["stride"] = 224;
    cfg["stage2"]["embed_dim"] = 1024;
}

inline uint64_t fnv1a64(const void* data, std::size_t size, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string config_hash(const nlohmann::json& cfg) {
    const std::string dump = cfg.dump();
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(dump.data(), dump.size())));
    return buf;
}

}  // namespace polarpath::config
