#pragma once

// Input-dependent prompt generation: a frozen encoder, a task-level trigger
// vector, and the convolutional decoder. Also the prompt composition rule,
// the border-band (frame) prompt baseline and parameter flattening.

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>

#include "bvip/common.hpp"
#include "bvip/decoder.hpp"
#include "bvip/image.hpp"
#include "bvip/linalg.hpp"
#include "bvip/pca.hpp"

namespace bvip {

enum class PromptMode { Conditional, Frame, None };

inline const char* to_string(PromptMode m) {
    switch (m) {
        case PromptMode::Conditional: return "conditional";
        case PromptMode::Frame: return "frame";
        case PromptMode::None: return "none";
    }
    return "?";
}

inline PromptMode parse_prompt_mode(const std::string& s) {
    if (s == "conditional") return PromptMode::Conditional;
    if (s == "frame") return PromptMode::Frame;
    if (s == "none") return PromptMode::None;
    throw ConfigError("unknown prompt mode '" + s + "'");
}

struct PromptConfig {
    double epsilon = 1.0;
    double clip_low = 0.0;
    double clip_high = 1.0;
    PromptMode mode = PromptMode::Conditional;
    std::size_t frame_pad = 30;
    LatentShape latent{32, 7, 7};

    void validate() const {
        require(epsilon >= 0.0 && epsilon <= 1.0, "prompt: epsilon must lie in [0, 1]");
        require(clip_low < clip_high, "prompt: clip_low must be below clip_high");
        require(latent.size() > 0, "prompt: latent shape must be non-empty");
    }
};

/// clip(x + ε·prompt, lo, hi), element-wise.
inline Vec prompt_image(std::span<const double> x, std::span<const double> prompt, const PromptConfig& cfg) {
    require_same_length(x.size(), prompt.size(), "prompt_image");
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = std::clamp(x[i] + cfg.epsilon * prompt[i], cfg.clip_low, cfg.clip_high);
    return out;
}

// ---------------------------------------------------------------------------
// Encoders

class FeatureEncoder {
public:
    virtual ~FeatureEncoder() = default;
    virtual std::size_t input_dim() const = 0;
    virtual std::size_t output_dim() const = 0;
    virtual Vec encode(std::span<const double> x) const = 0;
};

/// Projection onto principal directions fitted on the few-shot training images.
class PcaEncoder final : public FeatureEncoder {
public:
    explicit PcaEncoder(PcaProjection proj) : proj_(std::move(proj)) {}

    std::size_t input_dim() const override { return proj_.input_dim(); }
    std::size_t output_dim() const override { return proj_.k(); }
    Vec encode(std::span<const double> x) const override { return pca_project(proj_, x); }
    const PcaProjection& projection() const { return proj_; }

private:
    PcaProjection proj_;
};

/// Fixed seeded random linear map followed by tanh. Stand-in for a frozen
/// pretrained feature extractor; weights are drawn once and never change.
class FrozenRandomEncoder final : public FeatureEncoder {
public:
    FrozenRandomEncoder(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed)
        : weights_(output_dim, input_dim), seed_(seed) {
        require(input_dim > 0 && output_dim > 0, "frozen encoder: dimensions must be positive");
        Rng rng(seed);
        const double s = 1.0 / std::sqrt(static_cast<double>(input_dim));
        for (auto& w : weights_.data) w = s * rng.normal();
    }

    std::size_t input_dim() const override { return weights_.cols; }
    std::size_t output_dim() const override { return weights_.rows; }
    Vec encode(std::span<const double> x) const override {
        Vec z = matvec(weights_, x);
        for (auto& v : z) v = std::tanh(v);
        return z;
    }
    std::uint64_t seed() const { return seed_; }

private:
    Matrix weights_;
    std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Coordinator

/// How the encoder feature and trigger vector form the decoder latent.
enum class Composition { Sum, Concat };

class Coordinator {
public:
    Coordinator(std::shared_ptr<const FeatureEncoder> encoder, Composition comp, DecoderParams params)
        : encoder_(std::move(encoder)), comp_(comp), params_(std::move(params)) {
        require(encoder_ != nullptr, "coordinator: encoder required");
        const std::size_t k = encoder_->output_dim(), latent = params_.config.latent.size();
        if (comp_ == Composition::Sum) {
            if (k != latent)
                throw ShapeError("coordinator: feature length " + std::to_string(k) +
                                 " does not match latent size " + std::to_string(latent));
            trigger_.assign(k, 0.0);
        } else {
            if (k >= latent)
                throw ShapeError("coordinator: feature length " + std::to_string(k) +
                                 " leaves no room for a trigger in latent size " + std::to_string(latent));
            trigger_.assign(latent - k, 0.0);
        }
    }

    const FeatureEncoder& encoder() const { return *encoder_; }
    Composition composition() const { return comp_; }
    const DecoderParams& params() const { return params_; }
    DecoderParams& params() { return params_; }
    const Vec& trigger() const { return trigger_; }

    /// Learnable entries: decoder parameters followed by the trigger.
    std::size_t learnable_count() const { return params_.learnable_count() + trigger_.size(); }

    /// Encodes every image once; features depend only on the frozen encoder.
    Matrix encode_all(const ImageBatch& images) const {
        require_same_length(images.shape.size(), encoder_->input_dim(), "coordinator encode");
        Matrix f(images.count, encoder_->output_dim());
        for (std::size_t i = 0; i < images.count; ++i) {
            const Vec z = encoder_->encode(images.image(i));
            std::copy(z.begin(), z.end(), f.row(i).begin());
        }
        return f;
    }

    /// Combines precomputed features with the trigger into the decoder latent.
    FeatureMaps latent(const Matrix& features, std::span<const std::size_t> rows) const {
        const LatentShape& ls = params_.config.latent;
        FeatureMaps x(rows.size(), ls.channels, ls.height, ls.width);
        for (std::size_t n = 0; n < rows.size(); ++n) {
            const auto f = features.row(rows[n]);
            double* dst = x.item(n);
            if (comp_ == Composition::Sum) {
                for (std::size_t j = 0; j < f.size(); ++j) dst[j] = f[j] + trigger_[j];
            } else {
                std::copy(f.begin(), f.end(), dst);
                std::copy(trigger_.begin(), trigger_.end(), dst + f.size());
            }
        }
        return x;
    }

    /// Prompts (batch × 3 × H × W) for the selected rows of `features`.
    FeatureMaps generate(const Matrix& features, std::span<const std::size_t> rows, NormMode mode) {
        return decoder_forward(latent(features, rows), params_, mode);
    }

    Vec flatten() const {
        Vec out;
        out.reserve(learnable_count());
        for (const auto& b : params_.blocks)
            for (const Vec* v : {&b.norm_scale, &b.norm_shift, &b.depthwise, &b.pointwise, &b.bias})
                out.insert(out.end(), v->begin(), v->end());
        out.insert(out.end(), trigger_.begin(), trigger_.end());
        return out;
    }

    void unflatten(std::span<const double> phi) {
        require_same_length(phi.size(), learnable_count(), "coordinator unflatten");
        std::size_t at = 0;
        auto take = [&](Vec& v) {
            std::copy(phi.begin() + at, phi.begin() + at + v.size(), v.begin());
            at += v.size();
        };
        for (auto& b : params_.blocks)
            for (Vec* v : {&b.norm_scale, &b.norm_shift, &b.depthwise, &b.pointwise, &b.bias}) take(*v);
        take(trigger_);
    }

private:
    std::shared_ptr<const FeatureEncoder> encoder_;
    Composition comp_;
    DecoderParams params_;
    Vec trigger_;
};

// ---------------------------------------------------------------------------
// Reference configurations

inline constexpr std::size_t kBlackVipFeatureDim = 768;
inline constexpr std::size_t kBlackVipTriggerDim = 800;

/// Desk-scale conditional prompt: PCA features summed with an 18-entry trigger.
inline DecoderConfig se_decoder_defaults(std::size_t out_height, std::size_t out_width) {
    DecoderConfig c;
    c.latent = {2, 3, 3};
    c.widths = {4, 4, 4, 4, 3};
    c.out_height = out_height;
    c.out_width = out_width;
    return c;
}

/// Frozen 768-d feature concatenated with an 800-d trigger, reshaped to 32×7×7;
/// widths put the learnable count near 9K.
inline DecoderConfig blackvip_decoder_defaults(std::size_t out_height = 224, std::size_t out_width = 224) {
    DecoderConfig c;
    c.latent = {32, 7, 7};
    c.widths = {64, 48, 16, 16, 3};
    c.out_height = out_height;
    c.out_width = out_width;
    return c;
}

// ---------------------------------------------------------------------------
// Frame prompt

/// Learnable values on a border band of width `pad`, added before clipping.
class FramePrompt {
public:
    FramePrompt(ImageShape shape, std::size_t pad) : shape_(shape), pad_(pad) {
        if (pad == 0) throw ConfigError("frame prompt: pad must be positive");
        if (2 * pad >= std::min(shape.height, shape.width))
            throw ConfigError("frame prompt: pad " + std::to_string(pad) + " too large for " +
                              std::to_string(shape.height) + "x" + std::to_string(shape.width));
        for (std::size_t y = 0; y < shape.height; ++y)
            for (std::size_t x = 0; x < shape.width; ++x)
                if (in_band(y, x)) band_.push_back(y * shape.width + x);
        values_.assign(shape.channels * band_.size(), 0.0);
    }

    static std::size_t parameter_count(ImageShape s, std::size_t pad) {
        return s.channels * (s.height * s.width - (s.height - 2 * pad) * (s.width - 2 * pad));
    }

    bool in_band(std::size_t y, std::size_t x) const {
        return y < pad_ || x < pad_ || y >= shape_.height - pad_ || x >= shape_.width - pad_;
    }

    std::size_t learnable_count() const { return values_.size(); }
    const Vec& flatten() const { return values_; }
    void unflatten(std::span<const double> phi) {
        require_same_length(phi.size(), values_.size(), "frame unflatten");
        std::copy(phi.begin(), phi.end(), values_.begin());
    }

    /// Full-size prompt image: zero off the band.
    Vec prompt() const {
        Vec p(shape_.size(), 0.0);
        const std::size_t plane = shape_.height * shape_.width;
        for (std::size_t c = 0; c < shape_.channels; ++c)
            for (std::size_t k = 0; k < band_.size(); ++k) p[c * plane + band_[k]] = values_[c * band_.size() + k];
        return p;
    }

    Vec apply(std::span<const double> x, const PromptConfig& cfg) const { return prompt_image(x, prompt(), cfg); }

    ImageShape shape() const { return shape_; }
    std::size_t pad() const { return pad_; }

private:
    ImageShape shape_;
    std::size_t pad_;
    std::vector<std::size_t> band_;
    Vec values_;
};

}  // namespace bvip
