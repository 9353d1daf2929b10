#pragma once

// Evaluation artifacts: side-by-side overlay PNGs (image | mask | prediction)
// and the naive 3-D stack of predicted slices as a .npy volume.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cma/core/common.hpp"
#include "cma/io/png.hpp"

namespace cma::io {

inline void label_color(uint8_t label, uint8_t* rgb) {
  switch (label) {
    case 1:  // organ
      rgb[0] = 70;
      rgb[1] = 130;
      rgb[2] = 180;
      break;
    case 2:  // tumor
      rgb[0] = 220;
      rgb[1] = 60;
      rgb[2] = 60;
      break;
    default:
      rgb[0] = rgb[1] = rgb[2] = 0;
  }
}

inline void write_overlay_png(const std::string& path, int64_t h, int64_t w,
                              const std::vector<uint8_t>& image, const std::vector<uint8_t>& mask,
                              const std::vector<uint8_t>& pred) {
  const int64_t gap = 2;
  const int64_t ow = 3 * w + 2 * gap;
  std::vector<uint8_t> rgb(static_cast<size_t>(h * ow * 3), 255);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      uint8_t* px = rgb.data() + (y * ow + x) * 3;
      px[0] = px[1] = px[2] = image[static_cast<size_t>(y * w + x)];
      label_color(mask[static_cast<size_t>(y * w + x)], rgb.data() + (y * ow + w + gap + x) * 3);
      label_color(pred[static_cast<size_t>(y * w + x)], rgb.data() + (y * ow + 2 * (w + gap) + x) * 3);
    }
  }
  write_rgb8(path, h, ow, rgb);
}

// Minimal NPY (version 1.0) writer for a uint8 volume of shape [n, h, w]:
// the predictions of a split stacked along a new leading axis.
inline void write_npy_u8(const std::string& path, int64_t n, int64_t h, int64_t w,
                         const std::vector<uint8_t>& data) {
  CMA_CHECK_INPUT(static_cast<int64_t>(data.size()) == n * h * w, "volume buffer size mismatch");
  std::string header = "{'descr': '|u1', 'fortran_order': False, 'shape': (" + std::to_string(n) + ", " +
                       std::to_string(h) + ", " + std::to_string(w) + "), }";
  const size_t unpadded = 10 + header.size() + 1;
  const size_t padded = (unpadded + 63) / 64 * 64;
  header.append(padded - unpadded, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  CMA_CHECK(out.good(), IoError, "cannot write " << path);
  const char magic[8] = {'\x93', 'N', 'U', 'M', 'P', 'Y', '\x01', '\x00'};
  out.write(magic, 8);
  const auto hlen = static_cast<uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&hlen), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

}  // namespace cma::io
