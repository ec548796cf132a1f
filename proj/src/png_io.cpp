// SPDX-License-Identifier: Apache-2.0
#include "medgen/png_io.hpp"

#include "medgen/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace medgen {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

void write_png16_raw(const std::filesystem::path& path, const Raw16& img) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng init failed: " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("png write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(img.width) * 2);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            const std::uint16_t v = img.values[static_cast<size_t>(r) * img.width + c];
            row[2 * c] = static_cast<png_byte>(v >> 8); // PNG is big-endian
            row[2 * c + 1] = static_cast<png_byte>(v & 0xFF);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Raw16 read_png16_raw(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng init failed: " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("malformed png: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const int out_depth = png_get_bit_depth(png, info);
    const size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> row(rowbytes);
    Raw16 img{height, width, std::vector<std::uint16_t>(static_cast<size_t>(width) * height)};
    for (int r = 0; r < height; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (int c = 0; c < width; ++c) {
            std::uint16_t v = out_depth == 16 ? static_cast<std::uint16_t>((row[2 * c] << 8) | row[2 * c + 1])
                                              : static_cast<std::uint16_t>(row[c] * 257);
            img.values[static_cast<size_t>(r) * width + c] = v;
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png16(const std::filesystem::path& path, const Image& img) {
    Raw16 raw{img.height, img.width, std::vector<std::uint16_t>(img.size())};
    for (size_t i = 0; i < img.size(); ++i)
        raw.values[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 65535.0f));
    write_png16_raw(path, raw);
}

Image read_png16(const std::filesystem::path& path) {
    Raw16 raw = read_png16_raw(path);
    Image img(raw.height, raw.width);
    for (size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<float>(raw.values[i]) / 65535.0f;
    return img;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& label) {
    Raw16 raw{label.height, label.width, std::vector<std::uint16_t>(label.size())};
    for (size_t i = 0; i < label.size(); ++i) raw.values[i] = static_cast<std::uint16_t>(label.ids[i]);
    write_png16_raw(path, raw);
}

LabelMap read_label_png(const std::filesystem::path& path, int dataset_id, int class_count) {
    Raw16 raw = read_png16_raw(path);
    LabelMap l(raw.height, raw.width, dataset_id, class_count);
    for (size_t i = 0; i < l.size(); ++i) l.ids[i] = raw.values[i];
    try {
        l.validate();
    } catch (const InvalidInput& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return l;
}

} // namespace medgen
