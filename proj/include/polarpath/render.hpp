#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polarpath/core.hpp"
#include "polarpath/io.hpp"
#include "polarpath/pixelclf.hpp"

namespace polarpath::render {

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

// Per-structure-class RGB anchors for pseudo-H&E coloring.
struct Palette {
    std::vector<std::array<double, 3>> anchors;

    static Palette default_he() {
        Palette p;
        p.anchors = {{88, 41, 120},     // cell: hematoxylin violet
                     {226, 119, 146},   // fiber: eosin pink
                     {244, 186, 199},   // colloid: light rose
                     {255, 255, 255}};  // background: white
        return p;
    }
};

inline Palette palette_from_json(const nlohmann::json& j) {
    Palette p;
    for (const auto& anchor : j.at("anchors")) {
        if (anchor.size() != 3) throw FormatError("palette anchor must have 3 channels");
        std::array<double, 3> a{};
        for (std::size_t i = 0; i < 3; ++i) {
            a[i] = anchor[i].get<double>();
            if (a[i] < 0 || a[i] > 255) throw InvalidArgument("palette channel outside [0, 255]");
        }
        p.anchors.push_back(a);
    }
    return p;
}

struct Image {
    std::size_t height = 0, width = 0;
    std::vector<Rgb> pixels;

    Rgb& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
    Rgb at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
    bool operator==(const Image&) const = default;
};

// Probability-weighted convex blend of the class anchors; uncertain pixels
// come out washed toward the mixture of their candidate colors.
inline Image pseudo_stain(const pixelclf::ProbabilityMap& pmap, const Palette& palette) {
    if (palette.anchors.size() != pmap.num_classes)
        throw DimensionError("palette size does not match probability map class count");
    Image img;
    img.height = pmap.height;
    img.width = pmap.width;
    img.pixels.resize(pmap.height * pmap.width);
    parallel_for(pmap.height, [&](std::size_t r) {
        for (std::size_t c = 0; c < pmap.width; ++c) {
            double rgb[3] = {0, 0, 0};
            for (std::size_t m = 0; m < pmap.num_classes; ++m) {
                const double p = pmap.at(r, c, m);
                for (int ch = 0; ch < 3; ++ch) rgb[ch] += p * palette.anchors[m][static_cast<std::size_t>(ch)];
            }
            img.at(r, c) = {static_cast<uint8_t>(std::lround(std::clamp(rgb[0], 0.0, 255.0))),
                            static_cast<uint8_t>(std::lround(std::clamp(rgb[1], 0.0, 255.0))),
                            static_cast<uint8_t>(std::lround(std::clamp(rgb[2], 0.0, 255.0)))};
        }
    });
    return img;
}

// Binary PPM (P6, maxval 255).
inline void write_image(const Image& img, const std::filesystem::path& path) {
    auto os = io::open_out(path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size() * 3));
    if (!os) throw Error("write failed: " + path.string());
}

inline Image read_image(const std::filesystem::path& path) {
    auto is = io::open_in(path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw FormatError("not a P6 PPM: " + path.string());
    std::size_t w = 0, h = 0, maxval = 0;
    is >> w >> h >> maxval;
    if (!is || w == 0 || h == 0) throw FormatError("bad PPM header: " + path.string());
    if (maxval != 255) throw FormatError("unsupported PPM maxval in " + path.string());
    is.get();  // single whitespace after maxval
    Image img;
    img.height = h;
    img.width = w;
    img.pixels.resize(h * w);
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(h * w * 3));
    if (static_cast<std::size_t>(is.gcount()) != h * w * 3)
        throw TruncationError("truncated PPM payload in " + path.string());
    return img;
}

}  // namespace polarpath::render
