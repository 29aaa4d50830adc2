#include "sdm/train/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

#include "sdm/core/errors.hpp"

namespace sdm {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double smooth(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

}  // namespace

Texture::Texture(std::uint64_t seed, double base_cell, int octaves, double persistence)
    : seed_(mix(seed)), base_cell_(base_cell), octaves_(octaves), persistence_(persistence) {
  norm_ = 0;
  for (int o = 0; o < octaves_; ++o) norm_ += std::pow(persistence_, o);
}

double Texture::lattice(std::int64_t ix, std::int64_t iy, int octave) const {
  const std::uint64_t h = mix(seed_ ^ mix(std::uint64_t(ix) * 0x100000001b3ULL ^ mix(std::uint64_t(iy) + 17 * octave)));
  return double(h >> 11) * (1.0 / 9007199254740992.0);
}

double Texture::operator()(double x, double y) const {
  double v = 0, amp = 1, cell = base_cell_;
  for (int o = 0; o < octaves_; ++o) {
    const double fx = x / cell + 0.37 * o, fy = y / cell + 0.61 * o;
    const double x0 = std::floor(fx), y0 = std::floor(fy);
    const double tx = smooth(fx - x0), ty = smooth(fy - y0);
    const auto ix = std::int64_t(x0), iy = std::int64_t(y0);
    const double a = lattice(ix, iy, o), b = lattice(ix + 1, iy, o);
    const double c = lattice(ix, iy + 1, o), d = lattice(ix + 1, iy + 1, o);
    v += amp * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
    amp *= persistence_;
    cell /= 2;
  }
  return std::clamp(0.5 + 2.0 * (v / norm_ - 0.5), 0.0, 1.0);
}

Mat3 random_homography(std::mt19937_64& rng, const SynthOptions& opt) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), us(opt.min_scale, opt.max_scale);
  const double deg = std::numbers::pi / 180.0, n = double(opt.size), c = (n - 1) / 2.0;
  Mat3 to_center, from_center, k;
  to_center << 1, 0, -c, 0, 1, -c, 0, 0, 1;
  k << n, 0, 0, 0, n, 0, 0, 0, 1;
  for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
    const double tilt_x = u(rng) * opt.max_tilt_deg * deg, tilt_y = u(rng) * opt.max_tilt_deg * deg;
    const double rot = u(rng) * opt.max_rotation_deg * deg, scale = us(rng);
    const double tx = u(rng) * opt.max_translation * n, ty = u(rng) * opt.max_translation * n;
    const Eigen::Matrix3d r = (Eigen::AngleAxisd(tilt_x, Eigen::Vector3d::UnitX()) *
                               Eigen::AngleAxisd(tilt_y, Eigen::Vector3d::UnitY()))
                                  .toRotationMatrix();
    const Mat3 tilt = k * r * k.inverse();
    Mat3 sim;
    sim << scale * std::cos(rot), -scale * std::sin(rot), 0, scale * std::sin(rot), scale * std::cos(rot), 0, 0, 0, 1;
    from_center << 1, 0, c + tx, 0, 1, c + ty, 0, 0, 1;
    Mat3 h = from_center * sim * tilt * to_center;
    if (std::abs(h(2, 2)) < 1e-12) continue;
    h /= h(2, 2);
    bool inside = true;
    for (const auto& corner : image_corners(n, n)) {
      const auto q = apply_homography(h, corner);
      inside = inside && q && q->x() >= 0 && q->y() >= 0 && q->x() <= n - 1 && q->y() <= n - 1;
    }
    if (inside) return h;
  }
  throw DegenerateError("could not sample a homography keeping image A inside image B");
}

SyntheticPair make_synthetic_pair(std::mt19937_64& rng, const SynthOptions& opt) {
  const Texture tex(rng());
  const Mat3 h = random_homography(rng, opt);
  const Mat3 h_inv = h.inverse();
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.noise_sigma);
  const std::size_t n = opt.size;
  SyntheticPair p{Tensor<float>({1, n, n}), Tensor<float>({1, n, n}), h};
  auto render = [&](Tensor<float>& img, bool warp) {
    const double gain = 1.0 + opt.gain_jitter * u(rng), bias = opt.bias_jitter * u(rng);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        Vec2 q{double(x), double(y)};
        if (warp) q = apply_homography(h_inv, q).value_or(Vec2(1e6, 1e6));
        const double v = gain * (tex(q.x(), q.y()) - 0.5) + 0.5 + bias + noise(rng);
        img.at(0, y, x) = float(std::clamp(v, 0.0, 1.0));
      }
    }
  };
  render(p.a, false);
  render(p.b, true);
  return p;
}

std::vector<Tensor<float>> texture_images(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const Texture tex(mix(seed + i));
    Tensor<float> img({1, size, size});
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) img.at(0, y, x) = float(tex(double(x), double(y)));
    }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace sdm
