#include "sdm/io/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "sdm/core/errors.hpp"
#include "sdm/io/files.hpp"

namespace sdm {

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::string& what) : b_(bytes), what_(what) {}

  std::size_t number() {
    skip_space();
    if (pos_ >= b_.size() || !std::isdigit(static_cast<unsigned char>(b_[pos_]))) fail("expected a number");
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + std::size_t(b_[pos_++] - '0');
      if (v > (1u << 30)) fail("dimension too large");
    }
    return v;
  }
  /// Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) fail("missing raster separator");
    return pos_ + 1;
  }
  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": malformed header: " + msg); }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  const std::string& what_;
  std::size_t pos_ = 2;
};

}  // namespace

Tensor<float> decode_pnm(const std::string& bytes, const std::string& what) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError(what + ": not a binary PGM (P5) or PPM (P6) file");
  }
  const bool color = bytes[1] == '6';
  HeaderReader r(bytes, what);
  const std::size_t w = r.number(), h = r.number(), maxval = r.number();
  if (w == 0 || h == 0) r.fail("zero dimension");
  if (maxval != 255) throw FormatError(what + ": unsupported maxval " + std::to_string(maxval) + " (only 255)");
  const std::size_t start = r.raster_start(), ch = color ? 3 : 1;
  if (bytes.size() - start < w * h * ch) throw FormatError(what + ": truncated pixel data");
  Tensor<float> img({1, h, w});
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + start);
  for (std::size_t k = 0; k < w * h; ++k) {
    if (color) {
      const double y = 0.299 * px[3 * k] + 0.587 * px[3 * k + 1] + 0.114 * px[3 * k + 2];
      img[k] = float(y / 255.0);
    } else {
      img[k] = float(px[k]) / 255.0f;
    }
  }
  return img;
}

Tensor<float> load_image(const std::string& path) { return decode_pnm(read_file(path), path); }

std::string encode_pgm(const Tensor<float>& image) {
  require_rank(image, 3, "encode_pgm");
  if (image.dim(0) != 1) throw ShapeError("encode_pgm expects a single channel");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (float v : image.data()) out.push_back(char(std::lround(std::clamp(double(v), 0.0, 1.0) * 255.0)));
  return out;
}

void save_pgm(const std::string& path, const Tensor<float>& image) { write_file_atomic(path, encode_pgm(image)); }

void RgbImage::set(long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x < 0 || y < 0 || x >= long(width) || y >= long(height)) return;
  auto* p = &rgb[(std::size_t(y) * width + std::size_t(x)) * 3];
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

std::string encode_ppm(const RgbImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.rgb.data()), image.rgb.size());
  return out;
}

}  // namespace sdm
