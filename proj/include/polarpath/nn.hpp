#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "polarpath/core.hpp"
#include "polarpath/io.hpp"

namespace polarpath::nn {

// Plane-major feature map: channels x height x width, doubles throughout so
// finite-difference gradient checks are meaningful.
struct Tensor {
    std::size_t c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::size_t c_, std::size_t h_, std::size_t w_, double fill = 0.0)
        : c(c_), h(h_), w(w_), v(c_ * h_ * w_, fill) {}

    double& at(std::size_t ch, std::size_t y, std::size_t x) { return v[(ch * h + y) * w + x]; }
    double at(std::size_t ch, std::size_t y, std::size_t x) const { return v[(ch * h + y) * w + x]; }
};

// 2-D convolution with zero padding.
struct Conv {
    std::size_t in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
    std::vector<double> weight;  // [out][in][ky][kx]
    std::vector<double> bias;    // [out]

    Conv() = default;
    Conv(std::size_t in, std::size_t out, std::size_t k_, std::size_t stride_, std::size_t pad_)
        : in_c(in), out_c(out), k(k_), stride(stride_), pad(pad_), weight(out * in * k_ * k_, 0.0),
          bias(out, 0.0) {}

    void init(Rng& rng) {
        const double a = 1.0 / std::sqrt(static_cast<double>(in_c * k * k));
        for (double& x : weight) x = rng.uniform(-a, a);
        for (double& x : bias) x = rng.uniform(-a, a);
    }

    std::size_t out_h(std::size_t h) const { return (h + 2 * pad - k) / stride + 1; }
    std::size_t out_w(std::size_t w) const { return (w + 2 * pad - k) / stride + 1; }

    Tensor forward(const Tensor& in) const {
        if (in.c != in_c) throw DimensionError("conv: channel mismatch");
        Tensor out(out_c, out_h(in.h), out_w(in.w));
        for (std::size_t oc = 0; oc < out_c; ++oc) {
            for (std::size_t oy = 0; oy < out.h; ++oy) {
                for (std::size_t ox = 0; ox < out.w; ++ox) {
                    double acc = bias[oc];
                    const long y0 = static_cast<long>(oy * stride) - static_cast<long>(pad);
                    const long x0 = static_cast<long>(ox * stride) - static_cast<long>(pad);
                    for (std::size_t ic = 0; ic < in_c; ++ic) {
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const long y = y0 + static_cast<long>(ky);
                            if (y < 0 || y >= static_cast<long>(in.h)) continue;
                            const double* wrow = &weight[((oc * in_c + ic) * k + ky) * k];
                            const double* irow = &in.v[(ic * in.h + static_cast<std::size_t>(y)) * in.w];
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long x = x0 + static_cast<long>(kx);
                                if (x < 0 || x >= static_cast<long>(in.w)) continue;
                                acc += wrow[kx] * irow[x];
                            }
                        }
                    }
                    out.at(oc, oy, ox) = acc;
                }
            }
        }
        return out;
    }

    // Accumulates parameter gradients into gw/gb and returns d(loss)/d(in).
    Tensor backward(const Tensor& in, const Tensor& dout, std::vector<double>& gw,
                    std::vector<double>& gb) const {
        Tensor din(in.c, in.h, in.w);
        for (std::size_t oc = 0; oc < out_c; ++oc) {
            for (std::size_t oy = 0; oy < dout.h; ++oy) {
                for (std::size_t ox = 0; ox < dout.w; ++ox) {
                    const double d = dout.at(oc, oy, ox);
                    if (d == 0.0) continue;
                    gb[oc] += d;
                    const long y0 = static_cast<long>(oy * stride) - static_cast<long>(pad);
                    const long x0 = static_cast<long>(ox * stride) - static_cast<long>(pad);
                    for (std::size_t ic = 0; ic < in_c; ++ic) {
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const long y = y0 + static_cast<long>(ky);
                            if (y < 0 || y >= static_cast<long>(in.h)) continue;
                            double* gwrow = &gw[((oc * in_c + ic) * k + ky) * k];
                            const double* wrow = &weight[((oc * in_c + ic) * k + ky) * k];
                            const double* irow = &in.v[(ic * in.h + static_cast<std::size_t>(y)) * in.w];
                            double* drow = &din.v[(ic * in.h + static_cast<std::size_t>(y)) * in.w];
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long x = x0 + static_cast<long>(kx);
                                if (x < 0 || x >= static_cast<long>(in.w)) continue;
                                gwrow[kx] += d * irow[x];
                                drow[x] += d * wrow[kx];
                            }
                        }
                    }
                }
            }
        }
        return din;
    }
};

inline Tensor tanh_forward(const Tensor& in) {
    Tensor out = in;
    for (double& x : out.v) x = std::tanh(x);
    return out;
}

// `act` is the forward output of tanh_forward.
inline Tensor tanh_backward(const Tensor& act, const Tensor& dout) {
    Tensor din = dout;
    for (std::size_t i = 0; i < din.v.size(); ++i) din.v[i] *= 1.0 - act.v[i] * act.v[i];
    return din;
}

// Parameter-free bilinear resize with half-pixel centers.
struct BilinearResize {
    struct Tap {
        std::size_t lo = 0, hi = 0;
        double frac = 0.0;
    };
    std::vector<Tap> ys, xs;
    std::size_t out_h = 0, out_w = 0;

    BilinearResize() = default;
    BilinearResize(std::size_t in_h, std::size_t in_w, std::size_t out_h_, std::size_t out_w_)
        : out_h(out_h_), out_w(out_w_) {
        auto make = [](std::size_t in_n, std::size_t out_n) {
            std::vector<Tap> taps(out_n);
            for (std::size_t o = 0; o < out_n; ++o) {
                double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) /
                                 static_cast<double>(out_n) -
                             0.5;
                src = std::min(std::max(src, 0.0), static_cast<double>(in_n - 1));
                const double f = std::floor(src);
                taps[o].lo = static_cast<std::size_t>(f);
                taps[o].hi = std::min(taps[o].lo + 1, in_n - 1);
                taps[o].frac = src - f;
            }
            return taps;
        };
        ys = make(in_h, out_h_);
        xs = make(in_w, out_w_);
    }

    Tensor forward(const Tensor& in) const {
        Tensor out(in.c, out_h, out_w);
        for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t y = 0; y < out_h; ++y)
                for (std::size_t x = 0; x < out_w; ++x) {
                    const auto& ty = ys[y];
                    const auto& tx = xs[x];
                    out.at(c, y, x) = (1 - ty.frac) * ((1 - tx.frac) * in.at(c, ty.lo, tx.lo) +
                                                       tx.frac * in.at(c, ty.lo, tx.hi)) +
                                      ty.frac * ((1 - tx.frac) * in.at(c, ty.hi, tx.lo) +
                                                 tx.frac * in.at(c, ty.hi, tx.hi));
                }
        return out;
    }

    Tensor backward(std::size_t in_h, std::size_t in_w, const Tensor& dout) const {
        Tensor din(dout.c, in_h, in_w);
        for (std::size_t c = 0; c < dout.c; ++c)
            for (std::size_t y = 0; y < out_h; ++y)
                for (std::size_t x = 0; x < out_w; ++x) {
                    const double d = dout.at(c, y, x);
                    const auto& ty = ys[y];
                    const auto& tx = xs[x];
                    din.at(c, ty.lo, tx.lo) += d * (1 - ty.frac) * (1 - tx.frac);
                    din.at(c, ty.lo, tx.hi) += d * (1 - ty.frac) * tx.frac;
                    din.at(c, ty.hi, tx.lo) += d * ty.frac * (1 - tx.frac);
                    din.at(c, ty.hi, tx.hi) += d * ty.frac * tx.frac;
                }
        return din;
    }
};

// Channel-wise softmax at each pixel.
inline Tensor channel_softmax(const Tensor& in) {
    Tensor out = in;
    std::vector<double> z(in.c);
    for (std::size_t y = 0; y < in.h; ++y)
        for (std::size_t x = 0; x < in.w; ++x) {
            for (std::size_t c = 0; c < in.c; ++c) z[c] = in.at(c, y, x);
            softmax_inplace(z);
            for (std::size_t c = 0; c < in.c; ++c) out.at(c, y, x) = z[c];
        }
    return out;
}

// `prob` is the forward output of channel_softmax.
inline Tensor channel_softmax_backward(const Tensor& prob, const Tensor& dout) {
    Tensor din = prob;
    for (std::size_t y = 0; y < prob.h; ++y)
        for (std::size_t x = 0; x < prob.w; ++x) {
            double dot = 0.0;
            for (std::size_t c = 0; c < prob.c; ++c) dot += dout.at(c, y, x) * prob.at(c, y, x);
            for (std::size_t c = 0; c < prob.c; ++c)
                din.at(c, y, x) = prob.at(c, y, x) * (dout.at(c, y, x) - dot);
        }
    return din;
}

// ---------------------------------------------------------------------------
// "PLNN" container: named f32 blocks.

inline void save_blocks(const std::vector<std::pair<std::string, const std::vector<double>*>>& blocks,
                        const std::filesystem::path& path) {
    auto os = io::open_out(path);
    os.write("PLNN", 4);
    io::write_u32(os, static_cast<uint32_t>(blocks.size()));
    for (const auto& [name, values] : blocks) {
        io::write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u32(os, static_cast<uint32_t>(values->size()));
    }
    std::vector<float> buf;
    for (const auto& [name, values] : blocks) {
        (void)name;
        buf.assign(values->begin(), values->end());
        io::write_f32_array(os, buf.data(), buf.size());
    }
    if (!os) throw Error("write failed: " + path.string());
}

inline std::vector<std::pair<std::string, std::vector<double>>> load_blocks(
    const std::filesystem::path& path) {
    auto is = io::open_in(path);
    io::expect_magic(is, "PLNN", path.string());
    const uint32_t count = io::read_u32(is, "PLNN block count");
    std::vector<std::pair<std::string, std::vector<double>>> blocks(count);
    for (auto& [name, values] : blocks) {
        const uint32_t len = io::read_u32(is, "PLNN name length");
        name.resize(len);
        is.read(name.data(), len);
        if (!is) throw TruncationError("truncated PLNN name in " + path.string());
        values.resize(io::read_u32(is, "PLNN block size"));
    }
    std::vector<float> buf;
    for (auto& [name, values] : blocks) {
        (void)name;
        buf.resize(values.size());
        io::read_f32_array(is, buf.data(), buf.size(), path.string());
        values.assign(buf.begin(), buf.end());
    }
    return blocks;
}

}  // namespace polarpath::nn
