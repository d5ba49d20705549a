#pragma once

// Digit data: IDX ingestion, procedural glyphs, and the two synthetic
// distribution-shift benchmarks (background-color bias and off-center digits
// with a centered distractor), plus few-shot splitting and tensor export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bvip/common.hpp"

namespace bvip {

inline constexpr std::size_t kDigitSide = 28;
inline constexpr std::size_t kDigitPixels = kDigitSide * kDigitSide;
inline constexpr int kNumDigitClasses = 10;

struct DigitImage {
    std::array<double, kDigitPixels> pixels{};  ///< row-major, values in [0, 1]
    int label = 0;

    double at(std::size_t row, std::size_t col) const { return pixels[row * kDigitSide + col]; }
};

/// Channel-major (C×H×W) RGB image with values in [0, 1].
struct RgbCanvas {
    std::size_t height = 0;
    std::size_t width = 0;
    Vec pixels;
    int label = 0;

    RgbCanvas() = default;
    RgbCanvas(std::size_t h, std::size_t w, int lbl = 0)
        : height(h), width(w), pixels(3 * h * w, 0.0), label(lbl) {}

    std::size_t size() const { return pixels.size(); }
    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return pixels[(c * height + y) * width + x];
    }
};

// ---------------------------------------------------------------------------
// IDX container

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    if (offset + 4 > bytes.size()) throw ParseError("truncated IDX header", bytes.size());
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

/// Parses an IDX image stream (magic 2051, count, rows, cols, u8 pixels) and its
/// label stream (magic 2049, count, u8 labels). Pixels are scaled by 1/255.
inline std::vector<DigitImage> parse_idx(std::span<const std::uint8_t> image_bytes,
                                         std::span<const std::uint8_t> label_bytes) {
    using detail::read_be32;
    if (const auto m = read_be32(image_bytes, 0); m != kIdxImageMagic)
        throw ParseError("bad IDX image magic " + std::to_string(m), 0);
    const std::uint32_t count = read_be32(image_bytes, 4);
    const std::uint32_t rows = read_be32(image_bytes, 8);
    const std::uint32_t cols = read_be32(image_bytes, 12);
    if (rows != kDigitSide || cols != kDigitSide)
        throw ParseError("IDX images must be 28x28, got " + std::to_string(rows) + "x" +
                             std::to_string(cols),
                         8);
    if (const auto m = read_be32(label_bytes, 0); m != kIdxLabelMagic)
        throw ParseError("bad IDX label magic " + std::to_string(m), 0);
    const std::uint32_t label_count = read_be32(label_bytes, 4);
    if (label_count != count)
        throw ParseError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                             std::to_string(label_count) + " labels",
                         4);

    const std::size_t image_end = 16 + std::size_t{count} * kDigitPixels;
    if (image_bytes.size() < image_end) throw ParseError("truncated IDX image payload", image_bytes.size());
    if (label_bytes.size() < 8 + std::size_t{count})
        throw ParseError("truncated IDX label payload", label_bytes.size());

    std::vector<DigitImage> out(count);
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t base = 16 + n * kDigitPixels;
        for (std::size_t k = 0; k < kDigitPixels; ++k)
            out[n].pixels[k] = image_bytes[base + k] / 255.0;
        const std::uint8_t lbl = label_bytes[8 + n];
        if (lbl >= kNumDigitClasses)
            throw ParseError("IDX label out of range: " + std::to_string(lbl), 8 + n);
        out[n].label = lbl;
    }
    return out;
}

inline std::uint8_t quantize_pixel(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::vector<std::uint8_t> write_idx_images(std::span<const DigitImage> images) {
    std::vector<std::uint8_t> out;
    out.reserve(16 + images.size() * kDigitPixels);
    detail::write_be32(out, kIdxImageMagic);
    detail::write_be32(out, static_cast<std::uint32_t>(images.size()));
    detail::write_be32(out, kDigitSide);
    detail::write_be32(out, kDigitSide);
    for (const auto& im : images)
        for (double v : im.pixels) out.push_back(quantize_pixel(v));
    return out;
}

inline std::vector<std::uint8_t> write_idx_labels(std::span<const DigitImage> images) {
    std::vector<std::uint8_t> out;
    detail::write_be32(out, kIdxLabelMagic);
    detail::write_be32(out, static_cast<std::uint32_t>(images.size()));
    for (const auto& im : images) out.push_back(static_cast<std::uint8_t>(im.label));
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Procedural glyphs

/// Seven-segment layout: a top, b upper-right, c lower-right, d bottom,
/// e lower-left, f upper-left, g middle.
enum Segment : unsigned { kSegA = 1, kSegB = 2, kSegC = 4, kSegD = 8, kSegE = 16, kSegF = 32, kSegG = 64 };

inline unsigned segment_mask(int digit) {
    static constexpr unsigned masks[10] = {
        kSegA | kSegB | kSegC | kSegD | kSegE | kSegF,          // 0
        kSegB | kSegC,                                          // 1
        kSegA | kSegB | kSegG | kSegE | kSegD,                  // 2
        kSegA | kSegB | kSegG | kSegC | kSegD,                  // 3
        kSegF | kSegG | kSegB | kSegC,                          // 4
        kSegA | kSegF | kSegG | kSegC | kSegD,                  // 5
        kSegA | kSegF | kSegG | kSegE | kSegC | kSegD,          // 6
        kSegA | kSegB | kSegC,                                  // 7
        kSegA | kSegB | kSegC | kSegD | kSegE | kSegF | kSegG,  // 8
        kSegA | kSegB | kSegC | kSegD | kSegF | kSegG,          // 9
    };
    require(digit >= 0 && digit <= 9, "segment_mask: digit must lie in [0, 9]");
    return masks[digit];
}

/// Stroke mask of a digit with its box anchored at (top, left) inside 28×28.
inline std::array<bool, kDigitPixels> glyph_mask(int digit, int dy = 0, int dx = 0) {
    struct Rect {
        int y0, y1, x0, x1;
    };
    // Box spans rows 4..23 and cols 8..19; strokes are 3 px thick.
    static constexpr Rect rects[7] = {
        {4, 7, 8, 20},     // a
        {4, 15, 17, 20},   // b
        {13, 24, 17, 20},  // c
        {21, 24, 8, 20},   // d
        {13, 24, 8, 11},   // e
        {4, 15, 8, 11},    // f
        {13, 16, 8, 20},   // g
    };
    std::array<bool, kDigitPixels> m{};
    const unsigned segs = segment_mask(digit);
    for (unsigned s = 0; s < 7; ++s) {
        if (!(segs & (1u << s))) continue;
        const Rect& r = rects[s];
        for (int y = r.y0 + dy; y < r.y1 + dy; ++y)
            for (int x = r.x0 + dx; x < r.x1 + dx; ++x)
                if (y >= 0 && y < int(kDigitSide) && x >= 0 && x < int(kDigitSide))
                    m[std::size_t(y) * kDigitSide + std::size_t(x)] = true;
    }
    return m;
}

/// Procedural 28×28 digit: the digit's seven-segment mask shifted by up to
/// ±2 px, stroke intensity in [0.75, 1] and background in [0, 0.1].
inline DigitImage gen_glyph(int digit, Rng& rng) {
    require(digit >= 0 && digit <= 9, "gen_glyph: digit must lie in [0, 9]");
    const int dy = static_cast<int>(rng.below(5)) - 2;
    const int dx = static_cast<int>(rng.below(5)) - 2;
    const auto mask = glyph_mask(digit, dy, dx);
    DigitImage im;
    im.label = digit;
    for (std::size_t k = 0; k < kDigitPixels; ++k)
        im.pixels[k] = mask[k] ? rng.uniform(0.75, 1.0) : rng.uniform(0.0, 0.1);
    return im;
}

/// `per_class` glyphs of every digit; image n uses its own derived stream.
inline std::vector<DigitImage> gen_glyph_set(std::size_t per_class, std::uint64_t seed) {
    std::vector<DigitImage> out;
    out.reserve(per_class * kNumDigitClasses);
    for (std::size_t n = 0; n < per_class; ++n)
        for (int d = 0; d < kNumDigitClasses; ++d) {
            Rng rng(derive_seed(seed, out.size()));
            out.push_back(gen_glyph(d, rng));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling helpers

/// Resizes a square grayscale digit to side `s`: box averaging when shrinking,
/// nearest neighbour when enlarging.
inline Vec resize_digit(const DigitImage& im, std::size_t s) {
    require(s >= 1, "resize_digit: size must be positive");
    Vec out(s * s, 0.0);
    const std::size_t n = kDigitSide;
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            if (s >= n) {
                out[y * s + x] = im.at(y * n / s, x * n / s);
                continue;
            }
            const std::size_t y0 = y * n / s, y1 = std::max(y0 + 1, (y + 1) * n / s);
            const std::size_t x0 = x * n / s, x1 = std::max(x0 + 1, (x + 1) * n / s);
            double acc = 0.0;
            for (std::size_t yy = y0; yy < y1; ++yy)
                for (std::size_t xx = x0; xx < x1; ++xx) acc += im.at(yy, xx);
            out[y * s + x] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
        }
    return out;
}

/// Paints a grayscale patch into all three channels, keeping the brighter value.
inline void stamp_gray(RgbCanvas& canvas, std::span<const double> patch, std::size_t side,
                       std::size_t top, std::size_t left) {
    require(top + side <= canvas.height && left + side <= canvas.width, "stamp_gray: patch out of bounds");
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const double v = std::clamp(patch[y * side + x], 0.0, 1.0);
            for (std::size_t c = 0; c < 3; ++c) {
                double& dst = canvas.at(c, top + y, left + x);
                dst = std::max(dst, v);
            }
        }
}

/// White digit on black, resized to `side` and centered on a square canvas.
inline RgbCanvas digit_on_canvas(const DigitImage& im, std::size_t canvas, std::size_t side) {
    require(side <= canvas, "digit_on_canvas: digit larger than canvas");
    RgbCanvas out(canvas, canvas, im.label);
    const Vec patch = side == kDigitSide ? Vec(im.pixels.begin(), im.pixels.end()) : resize_digit(im, side);
    const std::size_t off = (canvas - side) / 2;
    stamp_gray(out, patch, side, off, off);
    return out;
}

// ---------------------------------------------------------------------------
// Background-color bias

using Rgb = std::array<double, 3>;

/// Default preassigned background per digit. All channels stay ≤ 0.9.
inline std::array<Rgb, 10> default_palette() {
    return {{{0.9, 0.1, 0.1},
             {0.1, 0.9, 0.1},
             {0.1, 0.1, 0.9},
             {0.9, 0.9, 0.1},
             {0.9, 0.1, 0.9},
             {0.1, 0.9, 0.9},
             {0.9, 0.5, 0.1},
             {0.9, 0.5, 0.7},
             {0.5, 0.1, 0.9},
             {0.5, 0.5, 0.5}}};
}

enum class Split { Train, Test };

struct BiasedSpec {
    double rho = 0.9;
    std::array<Rgb, 10> palette = default_palette();
    Split split = Split::Train;
    std::uint64_t seed = 0;

    void validate() const {
        require(rho >= 0.0 && rho <= 1.0, "biased spec: rho must lie in [0, 1]");
        for (std::size_t i = 0; i < palette.size(); ++i)
            for (std::size_t j = i + 1; j < palette.size(); ++j)
                require(palette[i] != palette[j], "biased spec: palette colors must be distinct");
    }

    /// Probability that an image carries its label's preassigned color.
    double preassigned_probability() const { return split == Split::Train ? rho : 1.0 - rho; }
};

/// Index of the background color chosen for image n of the given label.
inline int biased_color_index(const BiasedSpec& spec, std::size_t n, int label) {
    Rng rng(derive_seed(spec.seed, n));
    if (rng.bernoulli(spec.preassigned_probability())) return label;
    const int other = static_cast<int>(rng.below(9));
    return other >= label ? other + 1 : other;
}

/// Colors the background (stroke < 0.5) of each digit and keeps strokes white.
inline std::vector<RgbCanvas> make_biased(std::span<const DigitImage> images, const BiasedSpec& spec) {
    spec.validate();
    std::vector<RgbCanvas> out;
    out.reserve(images.size());
    for (std::size_t n = 0; n < images.size(); ++n) {
        const DigitImage& im = images[n];
        const Rgb& color = spec.palette[std::size_t(biased_color_index(spec, n, im.label))];
        RgbCanvas cv(kDigitSide, kDigitSide, im.label);
        for (std::size_t y = 0; y < kDigitSide; ++y)
            for (std::size_t x = 0; x < kDigitSide; ++x) {
                const double s = im.at(y, x);
                for (std::size_t c = 0; c < 3; ++c) cv.at(c, y, x) = s < 0.5 ? color[c] : s;
            }
        out.push_back(std::move(cv));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Off-center digits with a centered distractor

enum class ScaleRatio { OneToOne, OneToFour };
enum class Edge { Top = 0, Bottom = 1, Left = 2, Right = 3 };

struct LocSpec {
    std::size_t canvas_size = 224;
    ScaleRatio scale_ratio = ScaleRatio::OneToOne;
    std::uint64_t seed = 0;
    bool with_distractor = true;

    /// Real-digit side: 28 px at 224, scaled proportionally otherwise.
    std::size_t digit_side() const {
        return std::max<std::size_t>(1, (kDigitSide * canvas_size + 112) / 224);
    }
    std::size_t fake_side() const { return scale_ratio == ScaleRatio::OneToFour ? 4 * digit_side() : digit_side(); }

    void validate() const {
        require(canvas_size >= 8, "loc spec: canvas too small");
        require(canvas_size >= 2 * fake_side(), "loc spec: canvas must be at least twice the distractor size");
    }
};

struct LocPlacement {
    Edge edge;
    std::size_t top;
    std::size_t left;
    int fake_class;
};

/// Picks one of the four edge bands uniformly, then a uniform offset along it.
inline LocPlacement draw_loc_placement(const LocSpec& spec, Rng& rng) {
    const std::size_t s = spec.digit_side();
    const std::size_t span = spec.canvas_size - s + 1;
    const auto edge = static_cast<Edge>(rng.below(4));
    const auto along = static_cast<std::size_t>(rng.below(span));
    const std::size_t far = spec.canvas_size - s;
    LocPlacement p{edge, 0, 0, static_cast<int>(rng.below(kNumDigitClasses))};
    switch (edge) {
        case Edge::Top: p.top = 0, p.left = along; break;
        case Edge::Bottom: p.top = far, p.left = along; break;
        case Edge::Left: p.top = along, p.left = 0; break;
        case Edge::Right: p.top = along, p.left = far; break;
    }
    return p;
}

/// Real digit on a random edge band, a random-class distractor centered at 1×
/// or 4× the real digit's size. Label is the real digit's class.
inline std::vector<RgbCanvas> make_loc(std::span<const DigitImage> images, const LocSpec& spec,
                                       std::vector<LocPlacement>* placements = nullptr) {
    spec.validate();
    require(!images.empty(), "make_loc: empty image pool");
    std::array<std::vector<std::size_t>, kNumDigitClasses> by_class;
    for (std::size_t i = 0; i < images.size(); ++i) by_class[std::size_t(images[i].label)].push_back(i);

    const std::size_t s = spec.digit_side();
    const std::size_t f = spec.fake_side();
    const std::size_t center = (spec.canvas_size - f) / 2;
    std::vector<RgbCanvas> out;
    out.reserve(images.size());
    if (placements) placements->clear();
    for (std::size_t n = 0; n < images.size(); ++n) {
        Rng rng(derive_seed(spec.seed, n));
        const LocPlacement p = draw_loc_placement(spec, rng);
        RgbCanvas cv(spec.canvas_size, spec.canvas_size, images[n].label);
        if (spec.with_distractor) {
            const auto& pool = by_class[std::size_t(p.fake_class)];
            const std::size_t pick = pool.empty() ? rng.below(images.size()) : pool[rng.below(pool.size())];
            stamp_gray(cv, resize_digit(images[pick], f), f, center, center);
        }
        stamp_gray(cv, resize_digit(images[n], s), s, p.top, p.left);
        out.push_back(std::move(cv));
        if (placements) placements->push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Few-shot splitting

struct FewShotSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Exactly k train and k_val validation indices per class, disjoint, sorted by
/// class then draw order. The caller keeps its test set untouched.
inline FewShotSplit few_shot_split(std::span<const int> labels, std::size_t k, std::size_t k_val,
                                   std::uint64_t seed, int num_classes = kNumDigitClasses) {
    require(k >= 1, "few_shot_split: k must be positive");
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < num_classes, "few_shot_split: label out of range");
        by_class[std::size_t(labels[i])].push_back(i);
    }
    FewShotSplit out;
    for (int c = 0; c < num_classes; ++c) {
        auto& pool = by_class[std::size_t(c)];
        if (pool.size() < k + k_val)
            throw Error("few_shot_split: class " + std::to_string(c) + " has " +
                        std::to_string(pool.size()) + " examples, needs " + std::to_string(k + k_val));
        Rng rng(derive_seed(seed, std::uint64_t(c)));
        shuffle(pool, rng);
        out.train.insert(out.train.end(), pool.begin(), pool.begin() + std::ptrdiff_t(k));
        out.val.insert(out.val.end(), pool.begin() + std::ptrdiff_t(k), pool.begin() + std::ptrdiff_t(k + k_val));
    }
    return out;
}

template <typename T>
std::vector<T> gather(std::span<const T> items, std::span<const std::size_t> idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(items[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Export

/// Writes `images.f32` (little-endian float32, N×3×H×W) and `manifest.json`.
inline void export_canvases(const std::filesystem::path& dir, std::span<const RgbCanvas> canvases,
                            const nlohmann::json& spec, std::uint64_t seed) {
    require(!canvases.empty(), "export_canvases: nothing to export");
    std::filesystem::create_directories(dir);
    const std::size_t h = canvases.front().height, w = canvases.front().width;
    std::ofstream out(dir / "images.f32", std::ios::binary);
    std::vector<int> labels;
    for (const auto& cv : canvases) {
        require(cv.height == h && cv.width == w, "export_canvases: mixed canvas shapes");
        for (double v : cv.pixels) {
            const auto f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            const char le[4] = {char(bits), char(bits >> 8), char(bits >> 16), char(bits >> 24)};
            out.write(le, 4);
        }
        labels.push_back(cv.label);
    }
    nlohmann::json manifest{{"tensor", "images.f32"},
                            {"dtype", "float32"},
                            {"byte_order", "little"},
                            {"layout", "NCHW"},
                            {"shape", {canvases.size(), 3, h, w}},
                            {"labels", labels},
                            {"seed", seed},
                            {"spec", spec}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

}  // namespace bvip
