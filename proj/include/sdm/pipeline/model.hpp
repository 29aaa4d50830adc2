#pragma once

#include <cstdint>
#include <vector>

#include "sdm/core/autodiff.hpp"
#include "sdm/match/coarse.hpp"
#include "sdm/match/refine.hpp"
#include "sdm/model/backbone.hpp"
#include "sdm/model/params.hpp"
#include "sdm/pipeline/config.hpp"

namespace sdm {

/// Random initialisation of every module, then normalisation calibration on
/// `calibration_images` procedural textures.
template <typename T>
ParamSet<T> init_model(const ModelConfig& cfg, std::uint64_t seed, std::size_t calibration_images = 8,
                       std::size_t calibration_size = 64);

template <typename T>
struct TrainForward {
  Pyramid<T> pyr_a, pyr_b;
  Var<T> coarse_a, coarse_b;  // transformed coarse maps [d, H/8, W/8]
  Var<T> fine_a, fine_b;      // [d_fine, H, W]
};

/// Differentiable forward of both images (multi-branch backbone).
template <typename T>
TrainForward<T> forward_train(Binder<T>& bind, Var<T> image_a, Var<T> image_b, const ModelConfig& cfg);

/// Coarse score matrix on the tape: inv_temperature * <f_i, f_j> / d.
template <typename T>
Var<T> coarse_scores(Var<T> coarse_a, Var<T> coarse_b, const ModelConfig& cfg);

struct StageTimes {
  double backbone = 0, transform = 0, coarse = 0, fine_fusion = 0, refinement = 0, total = 0;
};

struct MatchOutput {
  std::vector<CoarseMatch> coarse;  // flat indices in the padded grids
  std::vector<FineMatch> fine;      // original image coordinates
  GridDims grid_a, grid_b;          // padded coarse grids
  GridDims image_a, image_b;        // original sizes
  StageTimes times;
};

struct MatchOptions {
  MatchMode mode = MatchMode::Full;
  double tau = 0.2;
  bool second_stage = true;
};

/// Right/bottom zero padding to a multiple of `multiple`.
template <typename T>
Tensor<T> pad_image(const Tensor<T>& image, std::size_t multiple);

/// Number of coarse cells along an axis whose centers lie inside `extent` pixels.
std::size_t valid_cells(std::size_t extent);

/// Inference pipeline with the fused single-branch backbone.
template <typename T>
class Matcher {
 public:
  Matcher(const ModelConfig& cfg, const ParamSet<T>& params);

  /// Images are [1, H, W] in [0, 1], any size >= 8 x 8.
  MatchOutput match(const Tensor<T>& image_a, const Tensor<T>& image_b, const MatchOptions& opt) const;

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  const ParamSet<T>& params_;
  DeployBackbone<T> backbone_;
};

}  // namespace sdm
