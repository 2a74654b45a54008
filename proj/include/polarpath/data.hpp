#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polarpath/core.hpp"
#include "polarpath/io.hpp"

namespace polarpath::data {

enum class TumorClass { Malignant = 0, Benign = 1, Borderline = 2, Unknown = 3 };

inline const char* tumor_class_name(TumorClass c) {
    switch (c) {
        case TumorClass::Malignant: return "malignant";
        case TumorClass::Benign: return "benign";
        case TumorClass::Borderline: return "borderline";
        default: return "unknown";
    }
}

inline TumorClass tumor_class_from_name(const std::string& s) {
    if (s == "malignant") return TumorClass::Malignant;
    if (s == "benign") return TumorClass::Benign;
    if (s == "borderline") return TumorClass::Borderline;
    if (s == "unknown") return TumorClass::Unknown;
    throw FormatError("unknown tumor class name: " + s);
}

// Structure classes produced by the generator and predicted by stage 1.
enum Structure : int { kCell = 0, kFiber = 1, kColloid = 2, kBackground = 3 };
inline constexpr int kNumStructures = 4;

// Per-pixel polarization-feature tensor, H x W x D row-major, float so the
// on-disk f32 format round-trips bit-exactly.
struct PolarSlide {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t depth = 0;
    std::vector<float> values;  // [r][c][d]
    std::string slide_id;
    TumorClass tumor_class = TumorClass::Unknown;
    std::vector<std::string> channel_names;

    float& at(std::size_t r, std::size_t c, std::size_t d) {
        return values[(r * width + c) * depth + d];
    }
    float at(std::size_t r, std::size_t c, std::size_t d) const {
        return values[(r * width + c) * depth + d];
    }
};

struct StructureMap {
    std::size_t height = 0;
    std::size_t width = 0;
    int num_classes = kNumStructures;
    std::vector<uint8_t> labels;  // [r][c]

    uint8_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
    uint8_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
};

struct AnnotationEntry {
    uint32_t row = 0;
    uint32_t col = 0;
    uint8_t label = 0;
};

struct SparseAnnotation {
    std::vector<AnnotationEntry> entries;
    double coverage_fraction = 0.0;
    double noise_fraction = 0.0;
};

struct ClassComposition {
    double cell = 0.0;
    double fiber = 0.0;
    double colloid = 0.0;
    double background = 0.0;
    double orientation_coherence = 0.5;  // 1 = perfectly aligned fibers

    double sum() const { return cell + fiber + colloid + background; }
};

struct GeneratorConfig {
    std::size_t height = 256;
    std::size_t width = 256;
    std::size_t depth = 16;
    int num_structures = kNumStructures;

    // class_means[structure][channel]; only the first informative channels
    // carry separation, the rest are distractors.
    std::vector<std::vector<double>> class_means;
    std::vector<double> channel_sigma;
    double spatial_noise_amp = 0.15;
    std::size_t spatial_noise_scale = 32;

    double blob_radius_min = 8.0;
    double blob_radius_max = 14.0;
    std::size_t fiber_block = 64;
    double fiber_length_scale = 48.0;
    double fiber_width_scale = 7.0;
    std::size_t colloid_scale = 56;
    double composition_jitter = 0.02;

    std::map<TumorClass, ClassComposition> composition;

    static GeneratorConfig defaults();
};

inline std::vector<std::string> default_channel_names(std::size_t depth) {
    static const std::array<const char*, 6> informative = {
        "linear_retardance",       "linear_phase_delay",   "degree_of_anisotropy",
        "circular_to_linear_conv", "circular_birefringence", "circular_phase_delay"};
    std::vector<std::string> names;
    names.reserve(depth);
    for (std::size_t d = 0; d < depth; ++d) {
        if (d < informative.size()) {
            names.emplace_back(informative[d]);
        } else {
            names.push_back("aux_" + std::to_string(d));
        }
    }
    return names;
}

inline GeneratorConfig GeneratorConfig::defaults() {
    GeneratorConfig cfg;
    cfg.class_means.assign(kNumStructures, std::vector<double>(cfg.depth, 0.0));
    // Channel 0 carries the widest class separation so importance ranking
    // has a designated winner; channels 6+ are zero-mean distractors.
    const double means[kNumStructures][6] = {
        /* cell       */ {2.0, 1.2, 1.0, 0.8, 0.0, 0.5},
        /* fiber      */ {-2.0, 1.2, -1.0, 0.0, 0.8, 0.5},
        /* colloid    */ {0.7, -1.2, -1.0, -0.8, 0.0, 0.5},
        /* background */ {-0.7, -1.2, 1.0, 0.0, -0.8, -0.5},
    };
    for (int s = 0; s < kNumStructures; ++s)
        for (std::size_t d = 0; d < 6 && d < cfg.depth; ++d) cfg.class_means[s][d] = means[s][d];
    cfg.channel_sigma.assign(cfg.depth, 1.0);
    for (std::size_t d = 0; d < 6 && d < cfg.depth; ++d) cfg.channel_sigma[d] = 0.5;

    cfg.composition[TumorClass::Malignant] = {0.34, 0.16, 0.14, 0.36, 0.30};
    cfg.composition[TumorClass::Benign] = {0.10, 0.14, 0.40, 0.36, 0.85};
    cfg.composition[TumorClass::Borderline] = {0.22, 0.30, 0.24, 0.24, 0.55};
    cfg.composition[TumorClass::Unknown] = {0.20, 0.20, 0.25, 0.35, 0.50};
    return cfg;
}

namespace detail {

// Gaussian lattice noise: a deterministic N(0,1) value per integer lattice
// point, bilinearly interpolated at real coordinates.
inline double lattice_gaussian(uint64_t seed, int64_t i, int64_t j) {
    const uint64_t h = splitmix64(seed ^ splitmix64(static_cast<uint64_t>(i) * 0x8cb92ba72f3d8dd7ULL ^
                                                   static_cast<uint64_t>(j) * 0xd1b54a32d192ed03ULL));
    // Two 32-bit halves -> Box-Muller.
    const double u1 = (static_cast<double>(h >> 11) * 0x1.0p-53) * (1.0 - 1e-12) + 1e-12;
    const double u2 = static_cast<double>(splitmix64(h) >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline double lattice_noise(uint64_t seed, double u, double v) {
    const double fu = std::floor(u);
    const double fv = std::floor(v);
    const int64_t i = static_cast<int64_t>(fu);
    const int64_t j = static_cast<int64_t>(fv);
    const double au = u - fu;
    const double av = v - fv;
    const double n00 = lattice_gaussian(seed, i, j);
    const double n01 = lattice_gaussian(seed, i, j + 1);
    const double n10 = lattice_gaussian(seed, i + 1, j);
    const double n11 = lattice_gaussian(seed, i + 1, j + 1);
    return (1 - au) * ((1 - av) * n00 + av * n01) + au * ((1 - av) * n10 + av * n11);
}

// Smooth isotropic field over the slide, one value per pixel.
inline std::vector<double> smooth_field(uint64_t seed, std::size_t h, std::size_t w, double scale) {
    std::vector<double> out(h * w);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            out[r * w + c] = lattice_noise(seed, static_cast<double>(r) / scale,
                                           static_cast<double>(c) / scale);
    return out;
}

// Marks the floor(fraction * |eligible|) eligible pixels with the largest
// field values.
inline void mark_quantile(const std::vector<double>& field, const std::vector<uint8_t>& eligible,
                          double fraction, std::vector<uint8_t>& mask) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < field.size(); ++i)
        if (eligible[i]) idx.push_back(i);
    const std::size_t count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size())));
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(count, idx.size())),
                      idx.end(), [&](std::size_t a, std::size_t b) {
                          if (field[a] != field[b]) return field[a] > field[b];
                          return a < b;
                      });
    for (std::size_t k = 0; k < count && k < idx.size(); ++k) mask[idx[k]] = 1;
}

}  // namespace detail

inline void validate_generator_config(const GeneratorConfig& cfg) {
    if (cfg.height == 0 || cfg.width == 0 || cfg.depth == 0)
        throw InvalidArgument("generator config: dimensions must be >= 1");
    if (cfg.num_structures != kNumStructures)
        throw InvalidArgument("generator config: structure class count must be 4");
    if (cfg.class_means.size() != static_cast<std::size_t>(kNumStructures))
        throw InvalidArgument("generator config: class_means must have one row per structure");
    for (const auto& row : cfg.class_means)
        if (row.size() != cfg.depth) throw InvalidArgument("generator config: class_means row width != depth");
    if (cfg.channel_sigma.size() != cfg.depth)
        throw InvalidArgument("generator config: channel_sigma size != depth");
    for (const auto& [cls, comp] : cfg.composition) {
        (void)cls;
        if (comp.cell < 0 || comp.fiber < 0 || comp.colloid < 0 || comp.background < 0)
            throw InvalidArgument("composition fractions must be non-negative");
        if (std::abs(comp.sum() - 1.0) > 1e-9)
            throw InvalidArgument("composition fractions must sum to 1");
    }
}

inline std::pair<PolarSlide, StructureMap> generate_slide(uint64_t seed, TumorClass tumor_class,
                                                          const GeneratorConfig& cfg) {
    validate_generator_config(cfg);
    auto it = cfg.composition.find(tumor_class);
    if (it == cfg.composition.end()) throw InvalidArgument("no composition rule for tumor class");
    ClassComposition comp = it->second;

    const std::size_t h = cfg.height, w = cfg.width, depth = cfg.depth;
    const uint64_t base = derive_seed(seed, static_cast<uint64_t>(tumor_class), 0x501a7ULL);
    Rng rng(base);

    // Per-slide jitter on the composition; background absorbs the change.
    if (cfg.composition_jitter > 0) {
        auto jitter = [&](double f) {
            const double j = rng.uniform(-cfg.composition_jitter, cfg.composition_jitter);
            return std::max(0.0, f + j);
        };
        comp.cell = jitter(comp.cell);
        comp.fiber = jitter(comp.fiber);
        comp.colloid = jitter(comp.colloid);
        comp.background = std::max(0.0, 1.0 - comp.cell - comp.fiber - comp.colloid);
    }

    StructureMap map;
    map.height = h;
    map.width = w;
    map.num_classes = kNumStructures;
    map.labels.assign(h * w, static_cast<uint8_t>(kBackground));

    // Colloid: smooth low-frequency regions, exact pixel quantile.
    {
        const auto field = detail::smooth_field(derive_seed(base, 1, 0xc0UL), h, w,
                                                static_cast<double>(cfg.colloid_scale));
        std::vector<uint8_t> eligible(h * w, 1), mask(h * w, 0);
        detail::mark_quantile(field, eligible, comp.colloid, mask);
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) map.labels[i] = kColloid;
    }

    // Fiber: anisotropic bands; orientation per block scattered around the
    // slide-level dominant angle by (1 - coherence).
    {
        const double theta0 = rng.uniform(0.0, M_PI);
        const std::size_t nbr = (h + cfg.fiber_block - 1) / cfg.fiber_block;
        const std::size_t nbc = (w + cfg.fiber_block - 1) / cfg.fiber_block;
        std::vector<double> theta(nbr * nbc);
        for (auto& t : theta)
            t = theta0 + (1.0 - comp.orientation_coherence) * rng.uniform(-0.9, 0.9);
        const uint64_t fseed = derive_seed(base, 2, 0xf1ULL);
        std::vector<double> field(h * w);
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const double t = theta[(r / cfg.fiber_block) * nbc + (c / cfg.fiber_block)];
                const double x = static_cast<double>(c), y = static_cast<double>(r);
                const double u = (x * std::cos(t) + y * std::sin(t)) / cfg.fiber_length_scale;
                const double v = (-x * std::sin(t) + y * std::cos(t)) / cfg.fiber_width_scale;
                field[r * w + c] = detail::lattice_noise(fseed, u, v);
            }
        }
        std::vector<uint8_t> eligible(h * w), mask(h * w, 0);
        for (std::size_t i = 0; i < eligible.size(); ++i) eligible[i] = map.labels[i] == kBackground;
        detail::mark_quantile(field, eligible, comp.fiber / std::max(1e-12, 1.0 - comp.colloid), mask);
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) map.labels[i] = kFiber;
    }

    // Cells: dart-thrown blobs with a minimum center spacing; blobs overwrite
    // whatever they land on until the target pixel budget is met.
    {
        const std::size_t target = static_cast<std::size_t>(comp.cell * static_cast<double>(h * w));
        std::vector<std::pair<double, double>> centers;
        std::vector<double> radii;
        std::size_t painted = 0, attempts = 0;
        const std::size_t max_attempts = 40000;
        while (painted < target && attempts < max_attempts) {
            ++attempts;
            const double cy = rng.uniform(0.0, static_cast<double>(h));
            const double cx = rng.uniform(0.0, static_cast<double>(w));
            const double rad = rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max);
            bool ok = true;
            for (std::size_t k = 0; k < centers.size(); ++k) {
                const double dy = cy - centers[k].first, dx = cx - centers[k].second;
                if (dy * dy + dx * dx < 0.8 * (rad + radii[k]) * (rad + radii[k])) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            centers.emplace_back(cy, cx);
            radii.push_back(rad);
            const long r0 = std::max<long>(0, static_cast<long>(cy - rad));
            const long r1 = std::min<long>(static_cast<long>(h) - 1, static_cast<long>(cy + rad));
            const long c0 = std::max<long>(0, static_cast<long>(cx - rad));
            const long c1 = std::min<long>(static_cast<long>(w) - 1, static_cast<long>(cx + rad));
            for (long r = r0; r <= r1; ++r) {
                for (long c = c0; c <= c1; ++c) {
                    const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
                    if (dy * dy + dx * dx > rad * rad) continue;
                    auto& lab = map.labels[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
                    if (lab != kCell) {
                        lab = kCell;
                        ++painted;
                    }
                }
            }
        }
    }

    PolarSlide slide;
    slide.height = h;
    slide.width = w;
    slide.depth = depth;
    slide.tumor_class = tumor_class;
    slide.channel_names = default_channel_names(depth);
    slide.values.resize(h * w * depth);

    Rng noise_rng(derive_seed(base, 3, 0xfeULL));
    std::vector<uint64_t> field_seeds(depth);
    for (std::size_t d = 0; d < depth; ++d) field_seeds[d] = derive_seed(base, 4 + d, 0x5fULL);
    const double scale = static_cast<double>(cfg.spatial_noise_scale);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const int lab = map.labels[r * w + c];
            for (std::size_t d = 0; d < depth; ++d) {
                double v = cfg.class_means[static_cast<std::size_t>(lab)][d];
                v += cfg.channel_sigma[d] * noise_rng.normal();
                v += cfg.spatial_noise_amp * detail::lattice_noise(field_seeds[d],
                                                                   static_cast<double>(r) / scale,
                                                                   static_cast<double>(c) / scale);
                slide.at(r, c, d) = static_cast<float>(v);
            }
        }
    }
    return {std::move(slide), std::move(map)};
}

inline SparseAnnotation sparse_annotate(const StructureMap& map, double coverage, double noise,
                                        uint64_t seed) {
    if (coverage <= 0.0 || coverage > 1.0) throw InvalidArgument("coverage must be in (0, 1]");
    if (noise < 0.0 || noise > 1.0) throw InvalidArgument("noise must be in [0, 1]");
    const std::size_t total = map.height * map.width;
    const std::size_t count = static_cast<std::size_t>(std::floor(coverage * static_cast<double>(total)));
    if (count == 0) throw InvalidArgument("coverage selects zero pixels");

    Rng rng(derive_seed(seed, 0, 0xa110ULL));
    std::vector<uint32_t> idx(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = static_cast<uint32_t>(i);
    // Partial Fisher-Yates: the first `count` entries are a uniform sample
    // without replacement.
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + rng.uniform_index(total - i);
        std::swap(idx[i], idx[j]);
    }

    SparseAnnotation ann;
    ann.coverage_fraction = coverage;
    ann.noise_fraction = noise;
    ann.entries.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const uint32_t p = idx[i];
        ann.entries[i] = {p / static_cast<uint32_t>(map.width), p % static_cast<uint32_t>(map.width),
                          map.labels[p]};
    }

    const std::size_t flips = static_cast<std::size_t>(std::floor(noise * static_cast<double>(count)));
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    rng.shuffle(order);
    const int m = map.num_classes;
    for (std::size_t i = 0; i < flips; ++i) {
        auto& e = ann.entries[order[i]];
        const int offset = 1 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(m - 1)));
        e.label = static_cast<uint8_t>((e.label + offset) % m);
    }
    std::sort(ann.entries.begin(), ann.entries.end(), [](const AnnotationEntry& a, const AnnotationEntry& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    return ann;
}

// ---------------------------------------------------------------------------
// Corpus

enum class Split { Train, Test };

struct SlideRecord {
    PolarSlide slide;
    StructureMap map;
    SparseAnnotation annotation;
    Split split = Split::Train;
};

struct CorpusConfig {
    std::size_t malignant_count = 18;
    std::size_t benign_count = 16;
    std::size_t borderline_count = 12;
    double train_fraction = 2.0 / 3.0;
    double coverage = 0.05;
    double noise = 0.0;
    uint64_t seed = 1;
    GeneratorConfig generator = GeneratorConfig::defaults();
};

struct SlideCorpus {
    std::vector<SlideRecord> slides;
    uint64_t seed = 0;
};

inline SlideCorpus build_corpus(const CorpusConfig& cfg) {
    const std::array<std::pair<TumorClass, std::size_t>, 3> classes = {
        std::make_pair(TumorClass::Malignant, cfg.malignant_count),
        std::make_pair(TumorClass::Benign, cfg.benign_count),
        std::make_pair(TumorClass::Borderline, cfg.borderline_count)};
    if (cfg.train_fraction <= 0.0 || cfg.train_fraction >= 1.0)
        throw InvalidArgument("train fraction must be in (0, 1)");
    for (const auto& [cls, n] : classes) {
        (void)cls;
        if (n < 2) throw InvalidArgument("need at least 2 slides per class to stratify");
    }

    SlideCorpus corpus;
    corpus.seed = cfg.seed;
    std::size_t slide_index = 0;
    for (const auto& [cls, n] : classes) {
        const std::size_t n_train = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::floor(cfg.train_fraction * static_cast<double>(n) + 0.5)), 1,
            n - 1);
        // Shuffle within the class before assigning splits.
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng split_rng(derive_seed(cfg.seed, static_cast<uint64_t>(cls), 0x59117ULL));
        split_rng.shuffle(order);
        std::vector<Split> split(n, Split::Test);
        for (std::size_t i = 0; i < n_train; ++i) split[order[i]] = Split::Train;

        for (std::size_t i = 0; i < n; ++i, ++slide_index) {
            const uint64_t slide_seed = derive_seed(cfg.seed, slide_index, 0x511deULL);
            SlideRecord rec;
            auto [slide, map] = generate_slide(slide_seed, cls, cfg.generator);
            rec.slide = std::move(slide);
            rec.map = std::move(map);
            rec.slide.slide_id = "slide_" + std::to_string(slide_index);
            rec.annotation =
                sparse_annotate(rec.map, cfg.coverage, cfg.noise, derive_seed(cfg.seed, slide_index, 0xa22ULL));
            rec.split = split[i];
            corpus.slides.push_back(std::move(rec));
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Serialization

inline void save_slide(const PolarSlide& slide, const std::filesystem::path& path) {
    auto os = io::open_out(path);
    os.write("PLRS", 4);
    const char version = 1;
    os.write(&version, 1);
    io::write_u32(os, static_cast<uint32_t>(slide.height));
    io::write_u32(os, static_cast<uint32_t>(slide.width));
    io::write_u32(os, static_cast<uint32_t>(slide.depth));
    io::write_f32_array(os, slide.values.data(), slide.values.size());
    if (!os) throw Error("write failed: " + path.string());

    nlohmann::json meta;
    meta["slide_id"] = slide.slide_id;
    meta["tumor_class"] = tumor_class_name(slide.tumor_class);
    meta["channel_names"] = slide.channel_names;
    auto meta_path = path;
    meta_path.replace_extension(".meta.json");
    io::write_text_file(meta_path, meta.dump(2));
}

inline PolarSlide load_slide(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    io::expect_magic(is, "PLRS", path.string());
    char version = 0;
    is.read(&version, 1);
    if (!is || version != 1) throw FormatError("unsupported PLRS version in " + path.string());
    PolarSlide slide;
    slide.height = io::read_u32(is, "PLRS height");
    slide.width = io::read_u32(is, "PLRS width");
    slide.depth = io::read_u32(is, "PLRS depth");
    if (slide.height == 0 || slide.width == 0 || slide.depth == 0)
        throw DimensionError("PLRS with zero dimension: " + path.string());
    slide.values.resize(slide.height * slide.width * slide.depth);
    io::read_f32_array(is, slide.values.data(), slide.values.size(), path.string());

    auto meta_path = path;
    meta_path.replace_extension(".meta.json");
    if (std::filesystem::exists(meta_path)) {
        const auto meta = nlohmann::json::parse(io::read_text_file(meta_path));
        slide.slide_id = meta.value("slide_id", "");
        slide.tumor_class = tumor_class_from_name(meta.value("tumor_class", "unknown"));
        slide.channel_names = meta.value("channel_names", std::vector<std::string>{});
    }
    return slide;
}

inline void save_structure_map(const StructureMap& map, const std::filesystem::path& path) {
    auto os = io::open_out(path);
    os.write("PLBL", 4);
    io::write_u32(os, static_cast<uint32_t>(map.height));
    io::write_u32(os, static_cast<uint32_t>(map.width));
    io::write_u32(os, static_cast<uint32_t>(map.num_classes));
    os.write(reinterpret_cast<const char*>(map.labels.data()),
             static_cast<std::streamsize>(map.labels.size()));
    if (!os) throw Error("write failed: " + path.string());
}

inline StructureMap load_structure_map(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    io::expect_magic(is, "PLBL", path.string());
    StructureMap map;
    map.height = io::read_u32(is, "PLBL height");
    map.width = io::read_u32(is, "PLBL width");
    map.num_classes = static_cast<int>(io::read_u32(is, "PLBL class count"));
    map.labels.resize(map.height * map.width);
    is.read(reinterpret_cast<char*>(map.labels.data()), static_cast<std::streamsize>(map.labels.size()));
    if (static_cast<std::size_t>(is.gcount()) != map.labels.size())
        throw TruncationError("truncated payload in " + path.string());
    for (uint8_t l : map.labels)
        if (l >= map.num_classes) throw FormatError("label out of range in " + path.string());
    return map;
}

inline void save_annotation(const SparseAnnotation& ann, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "row,col,label\n";
    for (const auto& e : ann.entries) ss << e.row << "," << e.col << "," << int(e.label) << "\n";
    io::write_text_file(path, ss.str());
}

inline SparseAnnotation load_annotation(const std::filesystem::path& path) {
    std::istringstream is(io::read_text_file(path));
    std::string line;
    if (!std::getline(is, line) || io::split_csv_line(line) != std::vector<std::string>{"row", "col", "label"})
        throw FormatError("bad annotation CSV header in " + path.string());
    SparseAnnotation ann;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = io::split_csv_line(line);
        if (f.size() != 3) throw FormatError("bad annotation CSV row in " + path.string());
        ann.entries.push_back({static_cast<uint32_t>(std::stoul(f[0])),
                               static_cast<uint32_t>(std::stoul(f[1])),
                               static_cast<uint8_t>(std::stoi(f[2]))});
    }
    return ann;
}

inline void save_corpus(const SlideCorpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["seed"] = corpus.seed;
    manifest["slides"] = nlohmann::json::array();
    for (std::size_t i = 0; i < corpus.slides.size(); ++i) {
        const auto& rec = corpus.slides[i];
        const std::string stem = rec.slide.slide_id.empty() ? "slide_" + std::to_string(i) : rec.slide.slide_id;
        save_slide(rec.slide, dir / (stem + ".plrs"));
        save_structure_map(rec.map, dir / (stem + ".plbl"));
        save_annotation(rec.annotation, dir / (stem + ".ann.csv"));
        manifest["slides"].push_back({{"id", stem},
                                      {"tumor_class", tumor_class_name(rec.slide.tumor_class)},
                                      {"split", rec.split == Split::Train ? "train" : "test"},
                                      {"slide", stem + ".plrs"},
                                      {"map", stem + ".plbl"},
                                      {"annotation", stem + ".ann.csv"},
                                      {"coverage", rec.annotation.coverage_fraction},
                                      {"noise", rec.annotation.noise_fraction}});
    }
    io::write_text_file(dir / "corpus.json", manifest.dump(2));
}

inline SlideCorpus load_corpus(const std::filesystem::path& dir) {
    const auto manifest = nlohmann::json::parse(io::read_text_file(dir / "corpus.json"));
    SlideCorpus corpus;
    corpus.seed = manifest.value("seed", 0);
    for (const auto& s : manifest.at("slides")) {
        SlideRecord rec;
        rec.slide = load_slide(dir / s.at("slide").get<std::string>());
        rec.map = load_structure_map(dir / s.at("map").get<std::string>());
        rec.annotation = load_annotation(dir / s.at("annotation").get<std::string>());
        rec.annotation.coverage_fraction = s.value("coverage", 0.0);
        rec.annotation.noise_fraction = s.value("noise", 0.0);
        rec.split = s.at("split").get<std::string>() == "train" ? Split::Train : Split::Test;
        corpus.slides.push_back(std::move(rec));
    }
    return corpus;
}

}  // namespace polarpath::data
