#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdm/core/tensor.hpp"

namespace sdm {

/// 8-bit binary PGM (P5) or PPM (P6, converted to luma 0.299 R + 0.587 G + 0.114 B).
/// Returns [1, H, W] with values in [0, 1].
Tensor<float> decode_pnm(const std::string& bytes, const std::string& what = "image");
Tensor<float> load_image(const std::string& path);

/// Grayscale P5; values are clamped to [0, 1] and rounded to 8 bits.
std::string encode_pgm(const Tensor<float>& image);
void save_pgm(const std::string& path, const Tensor<float>& image);

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}
  void set(long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

std::string encode_ppm(const RgbImage& image);

}  // namespace sdm
