#pragma once

// PNG read/write via libpng: 8-bit grayscale images and 8-bit paletted label
// masks, non-interlaced. Readers accept grayscale, palette, and RGB(A) (for
// masks the palette index / gray value is the label).

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "cma/core/common.hpp"

namespace cma::io {

struct Image8 {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> pixels;  // row-major
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  CMA_CHECK(f != nullptr, IoError, "cannot open " << path);
  return f;
}

}  // namespace detail

inline void write_gray8(const std::string& path, const Image8& img) {
  auto f = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  CMA_CHECK(png, IoError, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed for " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Paletted mask; palette colors picked so labels are visible in any viewer.
inline void write_palette8(const std::string& path, const Image8& img, int num_labels) {
  auto f = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  CMA_CHECK(png, IoError, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed for " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> palette(static_cast<size_t>(std::max(num_labels, 1)));
  for (size_t i = 0; i < palette.size(); ++i) {
    const auto v = static_cast<png_byte>(palette.size() == 1 ? 0 : (255 * i) / (palette.size() - 1));
    palette[i] = {v, v, v};
  }
  png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
  png_write_info(png, info);
  for (int64_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void write_rgb8(const std::string& path, int64_t height, int64_t width,
                       const std::vector<uint8_t>& rgb) {
  CMA_CHECK_INPUT(static_cast<int64_t>(rgb.size()) == height * width * 3, "rgb buffer size mismatch");
  auto f = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  CMA_CHECK(png, IoError, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed for " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + y * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads an 8-bit single-channel view of a PNG: palette images yield their
// palette indices, grayscale yields gray values, RGB(A) is rejected for
// masks but averaged for plain images via `allow_rgb`.
inline Image8 read_channel8(const std::string& path, bool palette_as_index, bool allow_rgb = true) {
  auto f = detail::open_file(path, "rb");
  png_byte header[8];
  CMA_CHECK(std::fread(header, 1, 8, f.get()) == 8 && !png_sig_cmp(header, 0, 8), IoError,
            path << " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  CMA_CHECK(png, IoError, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed for " + path);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  const bool is_palette = color == PNG_COLOR_TYPE_PALETTE;

  if (depth == 16) png_set_strip_16(png);
  if (depth < 8 && !is_palette) png_set_expand_gray_1_2_4_to_8(png);
  if (is_palette && depth < 8) png_set_packing(png);
  if (is_palette && !palette_as_index) png_set_palette_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image8 img;
  img.height = png_get_image_height(png, info);
  img.width = png_get_image_width(png, info);
  const png_size_t rowbytes = png_get_rowbytes(png, info);
  const int64_t channels = static_cast<int64_t>(rowbytes) / img.width;
  CMA_CHECK(channels == 1 || (channels == 3 && allow_rgb), IoError,
            path << ": unsupported channel layout (" << channels << " channels)");

  std::vector<uint8_t> row(rowbytes);
  img.pixels.resize(static_cast<size_t>(img.height * img.width));
  for (int64_t y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    if (channels == 1) {
      std::copy_n(row.data(), img.width, img.pixels.data() + y * img.width);
    } else {
      for (int64_t x = 0; x < img.width; ++x) {
        const int v = (row[static_cast<size_t>(3 * x)] + row[static_cast<size_t>(3 * x + 1)] +
                       row[static_cast<size_t>(3 * x + 2)]) / 3;
        img.pixels[static_cast<size_t>(y * img.width + x)] = static_cast<uint8_t>(v);
      }
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline Image8 read_gray8(const std::string& path) { return read_channel8(path, false, true); }
inline Image8 read_mask8(const std::string& path) { return read_channel8(path, true, false); }

}  // namespace cma::io
