#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "stylefuse/errors.hpp"
#include "stylefuse/tensor.hpp"

namespace stylefuse {

// Images are (C,H,W) tensors with values in [0,1]; C is 1 or 3.
// 8-bit PNG is the interchange format for inputs, masks, and outputs.

namespace detail {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace detail

inline Tensor load_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ValidationError("cannot open image: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png_create_info_struct(png);
    if (!png || !info) throw std::runtime_error("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValidationError("corrupt PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color     = png_get_color_type(png, info);
    int depth     = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValidationError("unsupported PNG channel count in " + path);
    }

    std::vector<png_byte> rowbuf(static_cast<size_t>(w) * channels);
    Tensor img({channels, static_cast<int>(h), static_cast<int>(w)});
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(c, static_cast<int>(y), static_cast<int>(x)) =
                    rowbuf[x * channels + c] / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline void save_png(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw std::invalid_argument("save_png: expected (1|3,H,W), got " + shape_str(img.shape()));
    int C = img.dim(0), H = img.dim(1), W = img.dim(2);

    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());

    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot write image: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png_create_info_struct(png);
    if (!png || !info) throw std::runtime_error("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> rowbuf(static_cast<size_t>(W) * C);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) {
                double v = img.at(c, y, x);
                v        = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                rowbuf[static_cast<size_t>(x) * C + c] =
                    static_cast<png_byte>(v * 255.0 + 0.5);
            }
        png_write_row(png, rowbuf.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// masks travel as single-channel PNGs holding exactly 0 or 255
inline Tensor load_mask_png(const std::string& path) {
    Tensor img = load_png(path);
    if (img.dim(0) != 1) throw ValidationError("mask PNG must be single channel: " + path);
    Tensor mask({img.dim(1), img.dim(2)});
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = img[i] >= 0.5 ? 1.0 : 0.0;
    return mask;
}

inline void save_mask_png(const std::string& path, const Tensor& mask) {
    if (mask.ndim() != 2) throw std::invalid_argument("save_mask_png: expected (H,W)");
    Tensor img({1, mask.dim(0), mask.dim(1)});
    for (int64_t i = 0; i < mask.numel(); ++i) img[i] = mask[i] != 0.0 ? 1.0 : 0.0;
    save_png(path, img);
}

inline double image_mean(const Tensor& img) { return img.mean(); }

}  // namespace stylefuse
