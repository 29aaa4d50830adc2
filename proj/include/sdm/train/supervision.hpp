#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "sdm/core/autodiff.hpp"
#include "sdm/geometry/homography.hpp"
#include "sdm/match/refine.hpp"

namespace sdm {

struct GtPair {
  std::size_t i = 0, j = 0;  // flat coarse cell indices in A and B
  Vec2 target;               // warped center of cell i, in B pixels
};

struct GroundTruth {
  GridDims grid_a, grid_b;  // ceil(dim / 8) cells per axis
  std::vector<GtPair> coarse_pairs;
  std::vector<unsigned char> valid_mask;  // per A cell
};

/// Warps every A cell center whose center lies inside A; a warped point inside
/// B (on a cell whose center lies inside B) pairs with the cell containing it.
/// Throws DegenerateError for a singular H.
GroundTruth build_gt_homography(const Mat3& h, GridDims image_a, GridDims image_b);

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.25;
};

/// Floor applied to probabilities before the log.
constexpr double kProbabilityFloor = 1e-12;

/// -mean log P(i, j) over GT pairs. Throws DegenerateError when there are none.
template <typename T>
double coarse_loss(const Tensor<T>& p, const GroundTruth& gt);

/// Patch pixel index pairs (a, b) supervised for one match; empty masks the match.
using PixelPairs = std::vector<std::pair<std::size_t, std::size_t>>;

/// Pixels of patch A (inside image A) whose rounded warp lands in patch B
/// (inside image B), as row-major patch indices.
PixelPairs fine_pixel_targets(const Mat3& h, long ax0, long ay0, long bx0, long by0, std::size_t w, GridDims image_a,
                              GridDims image_b);

/// Per match: mean of -log dual_softmax(S_l) over its GT pixel pairs; then the
/// mean over unmasked matches. Throws DegenerateError when every match is masked.
template <typename T>
double fine_loss_stage1(const std::vector<Tensor<T>>& scores, const std::vector<PixelPairs>& gt);

/// Mean squared distance in pixels^2.
double fine_loss_stage2(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt);

/// l_c + alpha * l_f1 + beta * l_f2. Throws NumericError on a non-finite component.
double total_loss(double l_c, double l_f1, double l_f2, const LossWeights& w = {});

namespace ag {

template <typename T> Var<T> coarse_loss(Var<T> p, const GroundTruth& gt);
/// Single match term; `pairs` must be non-empty.
template <typename T> Var<T> fine_match_loss_stage1(Var<T> scores, const PixelPairs& pairs);
/// Squared distance between pred [1, 2] and a constant target.
template <typename T> Var<T> squared_distance(Var<T> pred, Vec2 target);
template <typename T> Var<T> total_loss(Var<T> l_c, Var<T> l_f1, Var<T> l_f2, const LossWeights& w = {});

}  // namespace ag

}  // namespace sdm
