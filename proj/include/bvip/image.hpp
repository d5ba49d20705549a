#pragma once

// Contiguous batches of C×H×W images.

#include <span>

#include "bvip/common.hpp"
#include "bvip/data.hpp"

namespace bvip {

struct ImageShape {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t size() const { return channels * height * width; }
    bool operator==(const ImageShape&) const = default;
};

struct ImageBatch {
    ImageShape shape;
    std::size_t count = 0;
    Vec data;

    ImageBatch() = default;
    ImageBatch(ImageShape s, std::size_t n) : shape(s), count(n), data(s.size() * n, 0.0) {}

    std::span<double> image(std::size_t i) { return {data.data() + i * shape.size(), shape.size()}; }
    std::span<const double> image(std::size_t i) const { return {data.data() + i * shape.size(), shape.size()}; }
};

inline ImageBatch batch_from_canvases(std::span<const RgbCanvas> canvases, std::span<const std::size_t> indices) {
    require(!canvases.empty(), "batch_from_canvases: no canvases");
    const ImageShape shape{3, canvases.front().height, canvases.front().width};
    ImageBatch b(shape, indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const RgbCanvas& c = canvases[indices[i]];
        if (c.height != shape.height || c.width != shape.width)
            throw ShapeError("batch_from_canvases: canvases differ in size");
        std::copy(c.pixels.begin(), c.pixels.end(), b.image(i).begin());
    }
    return b;
}

inline ImageBatch batch_from_canvases(std::span<const RgbCanvas> canvases) {
    std::vector<std::size_t> all(canvases.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return batch_from_canvases(canvases, all);
}

inline std::vector<int> labels_of(std::span<const RgbCanvas> canvases) {
    std::vector<int> out;
    out.reserve(canvases.size());
    for (const auto& c : canvases) out.push_back(c.label);
    return out;
}

}  // namespace bvip
