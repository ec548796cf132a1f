// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace medgen {

using Rng = std::mt19937_64;

/// Derive an independent stream seed from a base seed and a tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

/// Single-channel row-major image with values nominally in [0, 1].
/// Slices, canvases and quadrant grids are all carried by this type.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<size_t>(h) * w, fill) {}

    float& at(int r, int c) { return pixels[static_cast<size_t>(r) * width + c]; }
    float at(int r, int c) const { return pixels[static_cast<size_t>(r) * width + c]; }
    size_t size() const { return pixels.size(); }
    bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
    bool operator==(const Image&) const = default;
};

using Slice = Image;

/// Integer class ids per pixel; 0 is background.
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::int32_t> ids;
    int dataset_id = 1;
    int class_count = 1;

    LabelMap() = default;
    LabelMap(int h, int w, int dataset = 1, int classes = 1)
        : height(h), width(w), ids(static_cast<size_t>(h) * w, 0), dataset_id(dataset), class_count(classes) {}

    std::int32_t& at(int r, int c) { return ids[static_cast<size_t>(r) * width + c]; }
    std::int32_t at(int r, int c) const { return ids[static_cast<size_t>(r) * width + c]; }
    size_t size() const { return ids.size(); }
    bool same_shape(const LabelMap& o) const { return height == o.height && width == o.width; }
    bool operator==(const LabelMap& o) const { return height == o.height && width == o.width && ids == o.ids; }

    /// Sorted distinct foreground ids present in the map.
    std::vector<int> present_classes() const;
    /// Throws InvalidInput when an id falls outside [0, class_count].
    void validate() const;
};

} // namespace medgen
