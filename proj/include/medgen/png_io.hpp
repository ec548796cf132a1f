// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "medgen/image.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace medgen {

struct Raw16 {
    int height = 0;
    int width = 0;
    std::vector<std::uint16_t> values;
};

/// 16-bit grayscale PNG. Throws DataError with the path on failure.
void write_png16_raw(const std::filesystem::path& path, const Raw16& img);
Raw16 read_png16_raw(const std::filesystem::path& path);

/// Intensity images: [0,1] <-> [0,65535].
void write_png16(const std::filesystem::path& path, const Image& img);
Image read_png16(const std::filesystem::path& path);

/// Label maps store class ids verbatim.
void write_label_png(const std::filesystem::path& path, const LabelMap& label);
LabelMap read_label_png(const std::filesystem::path& path, int dataset_id, int class_count);

} // namespace medgen
