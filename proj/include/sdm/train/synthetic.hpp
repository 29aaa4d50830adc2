#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "sdm/core/tensor.hpp"
#include "sdm/geometry/homography.hpp"

namespace sdm {

/// Continuous multi-octave value-noise texture, defined on the whole plane.
class Texture {
 public:
  explicit Texture(std::uint64_t seed, double base_cell = 16.0, int octaves = 4, double persistence = 0.6);
  /// Value in [0, 1].
  double operator()(double x, double y) const;

 private:
  double lattice(std::int64_t ix, std::int64_t iy, int octave) const;

  std::uint64_t seed_;
  double base_cell_;
  int octaves_;
  double persistence_;
  double norm_;
};

struct SynthOptions {
  std::size_t size = 64;
  double max_tilt_deg = 15;
  double max_rotation_deg = 20;
  double min_scale = 0.7, max_scale = 1.4;
  double max_translation = 0.1;  // fraction of size
  double gain_jitter = 0.2;      // gain in [1 - g, 1 + g]
  double bias_jitter = 0.1;
  double noise_sigma = 0.02;
  int max_attempts = 1000;
};

struct SyntheticPair {
  Tensor<float> a, b;  // [1, size, size] in [0, 1]
  Mat3 h;              // pixel coordinates of A -> B
};

/// Random plane-induced homography: tilt (camera rotation), in-plane rotation,
/// scale and translation about the image center, rejection-sampled until all
/// four corners of A land inside B.
Mat3 random_homography(std::mt19937_64& rng, const SynthOptions& opt);

/// A samples the texture directly; B samples it through H^-1, then both get
/// gain/bias jitter and Gaussian noise.
SyntheticPair make_synthetic_pair(std::mt19937_64& rng, const SynthOptions& opt = {});

/// Texture images for normalisation calibration.
std::vector<Tensor<float>> texture_images(std::size_t count, std::size_t size, std::uint64_t seed);

}  // namespace sdm
