#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "sdm/core/autodiff.hpp"
#include "sdm/match/coarse.hpp"
#include "sdm/model/params.hpp"

namespace sdm {

/// Coarse cells are 8x8 pixels; cell (cx, cy) is centered at pixel (8cx + 4, 8cy + 4).
constexpr std::size_t kCoarseStride = 8;

struct FineConfig {
  std::size_t d_fine = 64;
  std::size_t patch_width = 8;  // w, even
  double inv_temperature = 10;
};

struct GridDims {
  std::size_t w = 0, h = 0;
};

struct FineMatch {
  double xa = 0, ya = 0;  // integer pixel in A
  double xb = 0, yb = 0;  // sub-pixel location in B
  double confidence = 0;  // of the coarse match it refines
  std::size_t coarse_index = 0;  // position in the coarse match list
};

template <typename T>
void init_fine(ParamSet<T>& params, std::size_t coarse_dim, std::size_t quarter_dim, std::size_t half_dim,
               std::size_t d_fine, std::mt19937_64& rng);

/// Ladder fusion: up2(coarse) + lateral 1x1(quarter) -> 3x3 conv + ReLU ->
/// up2 + lateral 1x1(half) -> 3x3 conv -> up2. Output [d_fine, 8H, 8W].
template <typename T>
Var<T> fuse_fine_features(Binder<T>& bind, Var<T> coarse, Var<T> quarter, Var<T> half);

template <typename T>
struct FinePatchPair {
  Tensor<T> a, b;  // [d_fine, w, w]
  long ax0 = 0, ay0 = 0, bx0 = 0, by0 = 0;
  bool padded = false;  // part of a patch falls outside its image
};

/// Top-left pixel of the w x w patch centered on coarse cell `cell`.
std::array<long, 2> patch_origin(std::size_t cell, std::size_t grid_w, std::size_t w);

/// Patches around each coarse match; outside pixels read zero and set `padded`.
/// `image_*` are the valid (unpadded) image sizes.
template <typename T>
std::vector<FinePatchPair<T>> crop_patches(const Tensor<T>& fine_a, const Tensor<T>& fine_b,
                                           const std::vector<CoarseMatch>& matches, GridDims grid_a,
                                           GridDims grid_b, GridDims image_a, GridDims image_b, std::size_t w);

/// Local score matrix S_l = inv_temperature * <a, b> / d over patch pixels, [w*w, w*w].
template <typename T>
Tensor<T> local_scores(const Tensor<T>& patch_a, const Tensor<T>& patch_b, double inv_temperature);

struct Stage1Pick {
  std::size_t a = 0, b = 0;  // row-major patch pixel indices
  double score = 0;
};

/// Highest-scoring mutual pair of S_l among rows/cols with a nonzero mask
/// entry; ties go to the smallest row-major index. Empty if nothing is valid.
template <typename T>
std::optional<Stage1Pick> stage1_select(const Tensor<T>& scores, const std::vector<unsigned char>* row_mask = nullptr,
                                        const std::vector<unsigned char>* col_mask = nullptr);

struct Offset {
  double dx = 0, dy = 0;
};

/// Offset offsets in window order: (u, v) for v = -1..1 (rows), u = -1..1 (cols).
const std::array<std::array<int, 2>, 9>& window_offsets();

/// Softmax expectation over the 9 offsets. Masked entries get zero weight;
/// throws DegenerateError when all are masked.
Offset expectation_from_scores(const std::array<double, 9>& scores, const std::array<bool, 9>& valid);

/// Correlates feat_a [d] with window_b [d, 3, 3] scaled by 1/sqrt(d) and takes the expectation.
template <typename T>
Offset stage2_expectation(const Tensor<T>& feat_a, const Tensor<T>& window_b, const std::array<bool, 9>& valid);

struct RefineStats {
  std::size_t discarded = 0;
  std::size_t padded = 0;
};

/// Two-stage refinement of every coarse match. With `second_stage` off,
/// pt_B is the stage-1 pixel.
template <typename T>
std::vector<FineMatch> refine(const std::vector<CoarseMatch>& matches, const Tensor<T>& fine_a,
                              const Tensor<T>& fine_b, GridDims grid_a, GridDims grid_b, GridDims image_a,
                              GridDims image_b, const FineConfig& cfg, bool second_stage = true,
                              RefineStats* stats = nullptr);

}  // namespace sdm
