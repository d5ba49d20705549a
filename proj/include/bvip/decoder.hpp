#pragma once

// Forward-only convolutional prompt decoder: five [NORM-ACT-CONV] blocks.
// Blocks 1-4 upsample 2x (nearest) and use depthwise-separable convolutions;
// block 5 is a standard 3x3 convolution producing three channels. The output
// is resized (nearest) to the target image resolution.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bvip/common.hpp"

namespace bvip {

struct LatentShape {
    std::size_t channels = 2;
    std::size_t height = 7;
    std::size_t width = 7;

    std::size_t size() const { return channels * height * width; }
    bool operator==(const LatentShape&) const = default;
};

inline constexpr std::size_t kDecoderBlocks = 5;

struct DecoderConfig {
    LatentShape latent;
    std::array<std::size_t, kDecoderBlocks> widths{8, 8, 8, 8, 3};  ///< output channels per block
    std::size_t out_height = 224;
    std::size_t out_width = 224;
    double norm_momentum = 0.1;
    double norm_eps = 1e-5;

    void validate() const {
        require(latent.size() > 0, "decoder: latent shape must be non-empty");
        for (auto w : widths) require(w > 0, "decoder: block widths must be positive");
        require(widths.back() == 3, "decoder: last block must produce 3 channels");
        require(out_height > 0 && out_width > 0, "decoder: output size must be positive");
        require(norm_momentum > 0.0 && norm_momentum <= 1.0, "decoder: norm momentum must lie in (0, 1]");
    }

    std::size_t in_channels(std::size_t block) const { return block == 0 ? latent.channels : widths[block - 1]; }
};

/// Learnable and running-statistics state of one block.
struct DecoderBlock {
    Vec norm_scale;    ///< in_ch
    Vec norm_shift;    ///< in_ch
    Vec depthwise;     ///< in_ch×3×3 (blocks 1-4), empty for block 5
    Vec pointwise;     ///< out_ch×in_ch (blocks 1-4) or out_ch×in_ch×3×3 (block 5)
    Vec bias;          ///< out_ch
    Vec running_mean;  ///< in_ch, not learnable
    Vec running_var;   ///< in_ch, not learnable
};

struct DecoderParams {
    DecoderConfig config;
    std::array<DecoderBlock, kDecoderBlocks> blocks;

    /// Zero-initialized parameters with unit norm scale and unit running variance.
    static DecoderParams zeros(const DecoderConfig& cfg) {
        cfg.validate();
        DecoderParams p;
        p.config = cfg;
        for (std::size_t b = 0; b < kDecoderBlocks; ++b) {
            const std::size_t in = cfg.in_channels(b), out = cfg.widths[b];
            auto& blk = p.blocks[b];
            blk.norm_scale.assign(in, 1.0);
            blk.norm_shift.assign(in, 0.0);
            if (b + 1 < kDecoderBlocks) {
                blk.depthwise.assign(in * 9, 0.0);
                blk.pointwise.assign(out * in, 0.0);
            } else {
                blk.depthwise.clear();
                blk.pointwise.assign(out * in * 9, 0.0);
            }
            blk.bias.assign(out, 0.0);
            blk.running_mean.assign(in, 0.0);
            blk.running_var.assign(in, 1.0);
        }
        return p;
    }

    /// Kernels uniform in [−1/√fan_in, 1/√fan_in]; norm scale 1, shifts and biases 0.
    static DecoderParams initialize(const DecoderConfig& cfg, Rng& rng) {
        DecoderParams p = zeros(cfg);
        for (std::size_t b = 0; b < kDecoderBlocks; ++b) {
            const std::size_t in = cfg.in_channels(b);
            auto& blk = p.blocks[b];
            const double s_dw = 1.0 / 3.0;  // fan_in 9
            for (auto& w : blk.depthwise) w = rng.uniform(-s_dw, s_dw);
            const double fan = b + 1 < kDecoderBlocks ? double(in) : double(in * 9);
            const double s_pw = 1.0 / std::sqrt(fan);
            for (auto& w : blk.pointwise) w = rng.uniform(-s_pw, s_pw);
        }
        return p;
    }

    /// Number of learnable entries (running statistics excluded).
    std::size_t learnable_count() const {
        std::size_t n = 0;
        for (const auto& b : blocks)
            n += b.norm_scale.size() + b.norm_shift.size() + b.depthwise.size() + b.pointwise.size() + b.bias.size();
        return n;
    }
};

/// Learnable count for a configuration, from per-layer arithmetic.
inline std::size_t decoder_learnable_count(const DecoderConfig& cfg) {
    std::size_t n = 0;
    for (std::size_t b = 0; b < kDecoderBlocks; ++b) {
        const std::size_t in = cfg.in_channels(b), out = cfg.widths[b];
        n += 2 * in + out;  // norm scale/shift + bias
        n += b + 1 < kDecoderBlocks ? 9 * in + out * in : 9 * in * out;
    }
    return n;
}

/// A batch of C×H×W feature maps stored contiguously.
struct FeatureMaps {
    std::size_t batch = 0, channels = 0, height = 0, width = 0;
    Vec data;

    FeatureMaps() = default;
    FeatureMaps(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
        : batch(n), channels(c), height(h), width(w), data(n * c * h * w, 0.0) {}

    std::size_t plane() const { return height * width; }
    std::size_t item_size() const { return channels * plane(); }
    double* item(std::size_t n) { return data.data() + n * item_size(); }
    const double* item(std::size_t n) const { return data.data() + n * item_size(); }
    double* channel(std::size_t n, std::size_t c) { return item(n) + c * plane(); }
    const double* channel(std::size_t n, std::size_t c) const { return item(n) + c * plane(); }
};

enum class NormMode { Train, Inference };

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

namespace detail {

/// Normalizes each channel, applies scale/shift and GELU in place.
inline void norm_act(FeatureMaps& x, DecoderBlock& blk, NormMode mode, double momentum, double eps) {
    const std::size_t plane = x.plane();
    for (std::size_t c = 0; c < x.channels; ++c) {
        double mean, var;
        if (mode == NormMode::Train) {
            double s = 0.0;
            for (std::size_t n = 0; n < x.batch; ++n) {
                const double* p = x.channel(n, c);
                for (std::size_t k = 0; k < plane; ++k) s += p[k];
            }
            const double count = double(x.batch * plane);
            mean = s / count;
            double ss = 0.0;
            for (std::size_t n = 0; n < x.batch; ++n) {
                const double* p = x.channel(n, c);
                for (std::size_t k = 0; k < plane; ++k) ss += (p[k] - mean) * (p[k] - mean);
            }
            var = ss / count;
            const double unbiased = count > 1.0 ? ss / (count - 1.0) : var;
            blk.running_mean[c] = (1.0 - momentum) * blk.running_mean[c] + momentum * mean;
            blk.running_var[c] = (1.0 - momentum) * blk.running_var[c] + momentum * unbiased;
        } else {
            mean = blk.running_mean[c];
            var = blk.running_var[c];
        }
        const double mul = blk.norm_scale[c] / std::sqrt(var + eps);
        const double add = blk.norm_shift[c] - mean * mul;
        for (std::size_t n = 0; n < x.batch; ++n) {
            double* p = x.channel(n, c);
            for (std::size_t k = 0; k < plane; ++k) p[k] = gelu(p[k] * mul + add);
        }
    }
}

inline FeatureMaps upsample2(const FeatureMaps& x) {
    FeatureMaps y(x.batch, x.channels, 2 * x.height, 2 * x.width);
    for (std::size_t n = 0; n < x.batch; ++n)
        for (std::size_t c = 0; c < x.channels; ++c) {
            const double* src = x.channel(n, c);
            double* dst = y.channel(n, c);
            for (std::size_t i = 0; i < y.height; ++i) {
                const double* srow = src + (i / 2) * x.width;
                double* drow = dst + i * y.width;
                for (std::size_t j = 0; j < y.width; ++j) drow[j] = srow[j / 2];
            }
        }
    return y;
}

/// 3×3 convolution of one plane with zero padding, accumulated into `out`.
inline void conv3x3_accumulate(const double* in, double* out, std::size_t h, std::size_t w, const double* k) {
    for (std::size_t i = 0; i < h; ++i) {
        double* orow = out + i * w;
        for (int di = -1; di <= 1; ++di) {
            const long ii = long(i) + di;
            if (ii < 0 || ii >= long(h)) continue;
            const double* irow = in + std::size_t(ii) * w;
            const double k0 = k[(di + 1) * 3], k1 = k[(di + 1) * 3 + 1], k2 = k[(di + 1) * 3 + 2];
            if (w == 1) {
                orow[0] += k1 * irow[0];
                continue;
            }
            orow[0] += k1 * irow[0] + k2 * irow[1];
            for (std::size_t j = 1; j + 1 < w; ++j) orow[j] += k0 * irow[j - 1] + k1 * irow[j] + k2 * irow[j + 1];
            orow[w - 1] += k0 * irow[w - 2] + k1 * irow[w - 1];
        }
    }
}

inline FeatureMaps separable_conv(const FeatureMaps& x, const DecoderBlock& blk, std::size_t out_ch) {
    const std::size_t plane = x.plane(), in_ch = x.channels;
    FeatureMaps y(x.batch, out_ch, x.height, x.width);
    Vec dw(in_ch * plane);
    for (std::size_t n = 0; n < x.batch; ++n) {
        std::fill(dw.begin(), dw.end(), 0.0);
        for (std::size_t c = 0; c < in_ch; ++c)
            conv3x3_accumulate(x.channel(n, c), dw.data() + c * plane, x.height, x.width, &blk.depthwise[c * 9]);
        for (std::size_t o = 0; o < out_ch; ++o) {
            double* dst = y.channel(n, o);
            std::fill(dst, dst + plane, blk.bias[o]);
            for (std::size_t c = 0; c < in_ch; ++c) {
                const double wgt = blk.pointwise[o * in_ch + c];
                if (wgt == 0.0) continue;
                const double* src = dw.data() + c * plane;
                for (std::size_t k = 0; k < plane; ++k) dst[k] += wgt * src[k];
            }
        }
    }
    return y;
}

inline FeatureMaps standard_conv(const FeatureMaps& x, const DecoderBlock& blk, std::size_t out_ch) {
    const std::size_t plane = x.plane(), in_ch = x.channels;
    FeatureMaps y(x.batch, out_ch, x.height, x.width);
    for (std::size_t n = 0; n < x.batch; ++n)
        for (std::size_t o = 0; o < out_ch; ++o) {
            double* dst = y.channel(n, o);
            std::fill(dst, dst + plane, blk.bias[o]);
            for (std::size_t c = 0; c < in_ch; ++c)
                conv3x3_accumulate(x.channel(n, c), dst, x.height, x.width, &blk.pointwise[(o * in_ch + c) * 9]);
        }
    return y;
}

inline FeatureMaps resize_nearest(const FeatureMaps& x, std::size_t h, std::size_t w) {
    if (x.height == h && x.width == w) return x;
    FeatureMaps y(x.batch, x.channels, h, w);
    for (std::size_t n = 0; n < x.batch; ++n)
        for (std::size_t c = 0; c < x.channels; ++c) {
            const double* src = x.channel(n, c);
            double* dst = y.channel(n, c);
            for (std::size_t i = 0; i < h; ++i) {
                const std::size_t si = i * x.height / h;
                for (std::size_t j = 0; j < w; ++j) dst[i * w + j] = src[si * x.width + j * x.width / w];
            }
        }
    return y;
}

}  // namespace detail

/// Runs the decoder on a batch of latent maps. In Train mode normalization
/// uses batch statistics and updates the running averages held in `params`.
inline FeatureMaps decoder_forward(FeatureMaps x, DecoderParams& params, NormMode mode) {
    const DecoderConfig& cfg = params.config;
    if (x.channels != cfg.latent.channels || x.height != cfg.latent.height || x.width != cfg.latent.width)
        throw ShapeError("decoder_forward: input does not match the latent shape");
    for (std::size_t b = 0; b < kDecoderBlocks; ++b) {
        DecoderBlock& blk = params.blocks[b];
        detail::norm_act(x, blk, mode, cfg.norm_momentum, cfg.norm_eps);
        if (b + 1 < kDecoderBlocks) {
            // Nearest upsampling commutes with the per-element norm/activation above.
            x = detail::separable_conv(detail::upsample2(x), blk, cfg.widths[b]);
        } else {
            x = detail::standard_conv(x, blk, cfg.widths[b]);
        }
    }
    return detail::resize_nearest(x, cfg.out_height, cfg.out_width);
}

}  // namespace bvip
