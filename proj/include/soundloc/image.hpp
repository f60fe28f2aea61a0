// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "soundloc/common.hpp"
#include "soundloc/tensor.hpp"

namespace soundloc::img {

/// 8-bit interleaved RGB image.
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(3) * w * h, 0) {}

  std::uint8_t& at(int x, int y, int ch) {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 +
               static_cast<std::size_t>(ch)];
  }
  std::uint8_t at(int x, int y, int ch) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 +
               static_cast<std::size_t>(ch)];
  }
};

inline void write_png(const std::string& path, const Image& image) {
  if (image.width <= 0 || image.height <= 0) {
    throw InvalidInput("write_png: empty image");
  }
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("write_png: cannot open " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError("write_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(
                           image.rgb.data() +
                           static_cast<std::size_t>(y) * image.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("read_png: cannot open " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw CorruptFile("read_png: not a PNG file: " + path);
  }
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw CorruptFile("read_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  Image image(static_cast<int>(png_get_image_width(png, info)),
              static_cast<int>(png_get_image_height(png, info)));
  for (int y = 0; y < image.height; ++y) {
    png_read_row(png,
                 image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3,
                 nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return image;
}

/// 2x2 box-filter downscale. Requires even side lengths.
inline Image downscale_half(const Image& in) {
  if (in.width % 2 != 0 || in.height % 2 != 0) {
    throw InvalidInput("downscale_half: image sides must be even");
  }
  Image out(in.width / 2, in.height / 2);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const int sum = in.at(2 * x, 2 * y, ch) + in.at(2 * x + 1, 2 * y, ch) +
                        in.at(2 * x, 2 * y + 1, ch) +
                        in.at(2 * x + 1, 2 * y + 1, ch);
        out.at(x, y, ch) = static_cast<std::uint8_t>((sum + 2) / 4);
      }
    }
  }
  return out;
}

/// Bilinear upsample of an H x W map to out_h x out_w (align-corners-free,
/// cell-center sampling).
inline RTensor upsample_bilinear(const RTensor& map, int out_h, int out_w) {
  if (map.ndim() != 2) throw InvalidInput("upsample_bilinear: expected H x W");
  const int h = map.dim(0), w = map.dim(1);
  RTensor out({out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = std::clamp(fx - x0, 0.0, 1.0);
      out(y, x) = map(y0, x0) * (1 - wy) * (1 - wx) +
                  map(y0, x1) * (1 - wy) * wx + map(y1, x0) * wy * (1 - wx) +
                  map(y1, x1) * wy * wx;
    }
  }
  return out;
}

/// Blends a [0,1] heatmap over the image as a red tint.
inline Image overlay_heatmap(const Image& image, const RTensor& map01) {
  const RTensor up = upsample_bilinear(map01, image.height, image.width);
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double a = std::clamp(up(y, x), 0.0, 1.0);
      out.at(x, y, 0) = static_cast<std::uint8_t>(
          std::lround((1.0 - 0.6 * a) * image.at(x, y, 0) + 0.6 * a * 255.0));
      out.at(x, y, 1) = static_cast<std::uint8_t>(
          std::lround((1.0 - 0.6 * a) * image.at(x, y, 1)));
      out.at(x, y, 2) = static_cast<std::uint8_t>(
          std::lround((1.0 - 0.6 * a) * image.at(x, y, 2)));
    }
  }
  return out;
}

}  // namespace soundloc::img
