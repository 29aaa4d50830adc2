#include "sdm/train/supervision.hpp"

#include <cmath>
#include <string>

#include <Eigen/LU>

#include "sdm/core/errors.hpp"
#include "sdm/match/coarse.hpp"

namespace sdm {

namespace {

std::size_t grid_cells(std::size_t extent) { return (extent + kCoarseStride - 1) / kCoarseStride; }

std::size_t valid_cell_count(std::size_t extent) {
  const std::size_t half = kCoarseStride / 2;
  return extent <= half ? 0 : (extent - half - 1) / kCoarseStride + 1;
}

}  // namespace

GroundTruth build_gt_homography(const Mat3& h, GridDims image_a, GridDims image_b) {
  const double det = h.determinant(), scale = std::pow(h.norm(), 3);
  if (!std::isfinite(det) || !(scale > 0) || !(std::abs(det) > 1e-12 * scale)) {
    throw DegenerateError("ground truth homography is singular");
  }
  GroundTruth gt;
  gt.grid_a = {grid_cells(image_a.w), grid_cells(image_a.h)};
  gt.grid_b = {grid_cells(image_b.w), grid_cells(image_b.h)};
  gt.valid_mask.assign(gt.grid_a.w * gt.grid_a.h, 0);
  const std::size_t va_w = valid_cell_count(image_a.w), va_h = valid_cell_count(image_a.h);
  const std::size_t vb_w = valid_cell_count(image_b.w), vb_h = valid_cell_count(image_b.h);
  const double half = kCoarseStride / 2.0, s = kCoarseStride;
  for (std::size_t cy = 0; cy < va_h; ++cy) {
    for (std::size_t cx = 0; cx < va_w; ++cx) {
      const auto q = apply_homography(h, Vec2{cx * s + half, cy * s + half});
      if (!q || q->x() < 0 || q->y() < 0 || q->x() > double(image_b.w - 1) || q->y() > double(image_b.h - 1)) continue;
      const auto jx = std::size_t(q->x() / s), jy = std::size_t(q->y() / s);
      if (jx >= vb_w || jy >= vb_h) continue;
      const std::size_t i = cy * gt.grid_a.w + cx;
      gt.valid_mask[i] = 1;
      gt.coarse_pairs.push_back({i, jy * gt.grid_b.w + jx, *q});
    }
  }
  return gt;
}

template <typename T>
double coarse_loss(const Tensor<T>& p, const GroundTruth& gt) {
  require_rank(p, 2, "coarse_loss");
  if (gt.coarse_pairs.empty()) throw DegenerateError("coarse loss without ground-truth pairs");
  double acc = 0;
  for (const auto& g : gt.coarse_pairs) {
    if (g.i >= p.dim(0) || g.j >= p.dim(1)) throw ShapeError("ground-truth pair outside the probability matrix");
    acc -= std::log(std::max(double(p[g.i * p.dim(1) + g.j]), kProbabilityFloor));
  }
  return acc / double(gt.coarse_pairs.size());
}

PixelPairs fine_pixel_targets(const Mat3& h, long ax0, long ay0, long bx0, long by0, std::size_t w, GridDims image_a,
                              GridDims image_b) {
  PixelPairs out;
  const long lw = long(w);
  for (long py = 0; py < lw; ++py) {
    for (long px = 0; px < lw; ++px) {
      const long xa = ax0 + px, ya = ay0 + py;
      if (xa < 0 || ya < 0 || xa >= long(image_a.w) || ya >= long(image_a.h)) continue;
      const auto q = apply_homography(h, Vec2{double(xa), double(ya)});
      if (!q) continue;
      const long xb = std::lround(q->x()), yb = std::lround(q->y());
      if (xb < 0 || yb < 0 || xb >= long(image_b.w) || yb >= long(image_b.h)) continue;
      const long qx = xb - bx0, qy = yb - by0;
      if (qx < 0 || qy < 0 || qx >= lw || qy >= lw) continue;
      out.emplace_back(std::size_t(py * lw + px), std::size_t(qy * lw + qx));
    }
  }
  return out;
}

template <typename T>
double fine_loss_stage1(const std::vector<Tensor<T>>& scores, const std::vector<PixelPairs>& gt) {
  if (scores.size() != gt.size()) throw ShapeError("fine_loss_stage1: score and target counts differ");
  double acc = 0;
  std::size_t used = 0;
  for (std::size_t m = 0; m < scores.size(); ++m) {
    if (gt[m].empty()) continue;
    const Tensor<T> p = dual_softmax(scores[m]);
    double lm = 0;
    for (const auto& [a, b] : gt[m]) lm -= std::log(std::max(double(p[a * p.dim(1) + b]), kProbabilityFloor));
    acc += lm / double(gt[m].size());
    ++used;
  }
  if (!used) throw DegenerateError("fine stage-1 loss: every match has its target outside the patch");
  return acc / double(used);
}

double fine_loss_stage2(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("fine_loss_stage2: prediction and target counts differ");
  if (pred.empty()) throw DegenerateError("fine stage-2 loss without matches");
  double acc = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) acc += (pred[k] - gt[k]).squaredNorm();
  return acc / double(pred.size());
}

double total_loss(double l_c, double l_f1, double l_f2, const LossWeights& w) {
  if (!std::isfinite(l_c) || !std::isfinite(l_f1) || !std::isfinite(l_f2)) {
    throw NumericError("non-finite loss component (l_c=" + std::to_string(l_c) + ", l_f1=" + std::to_string(l_f1) +
                       ", l_f2=" + std::to_string(l_f2) + ")");
  }
  if (w.alpha < 0 || w.beta < 0) throw UsageError("loss weights must be nonnegative");
  return l_c + w.alpha * l_f1 + w.beta * l_f2;
}

namespace ag {

template <typename T>
Var<T> coarse_loss(Var<T> p, const GroundTruth& gt) {
  if (gt.coarse_pairs.empty()) throw DegenerateError("coarse loss without ground-truth pairs");
  const std::size_t cols = p.dim(1);
  std::vector<std::size_t> idx;
  for (const auto& g : gt.coarse_pairs) {
    if (g.i >= p.dim(0) || g.j >= cols) throw ShapeError("ground-truth pair outside the probability matrix");
    idx.push_back(g.i * cols + g.j);
  }
  return scale(mean(log(gather(p, std::move(idx)), T(kProbabilityFloor))), T(-1));
}

template <typename T>
Var<T> fine_match_loss_stage1(Var<T> scores, const PixelPairs& pairs) {
  if (pairs.empty()) throw DegenerateError("fine stage-1 term without pixel targets");
  const std::size_t cols = scores.dim(1);
  std::vector<std::size_t> idx;
  for (const auto& [a, b] : pairs) idx.push_back(a * cols + b);
  return scale(mean(log(gather(dual_softmax(scores), std::move(idx)), T(kProbabilityFloor))), T(-1));
}

template <typename T>
Var<T> squared_distance(Var<T> pred, Vec2 target) {
  Var<T> t = pred.tape->input(Tensor<T>({1, 2}, {T(target.x()), T(target.y())}));
  return sum(square(sub(pred, t)));
}

template <typename T>
Var<T> total_loss(Var<T> l_c, Var<T> l_f1, Var<T> l_f2, const LossWeights& w) {
  sdm::total_loss(double(l_c.value()[0]), double(l_f1.value()[0]), double(l_f2.value()[0]), w);
  return add(add(l_c, scale(l_f1, T(w.alpha))), scale(l_f2, T(w.beta)));
}

}  // namespace ag

#define SDM_INSTANTIATE_SUPERVISION(T)                                                    \
  template double coarse_loss(const Tensor<T>&, const GroundTruth&);                      \
  template double fine_loss_stage1(const std::vector<Tensor<T>>&, const std::vector<PixelPairs>&); \
  template Var<T> ag::coarse_loss(Var<T>, const GroundTruth&);                            \
  template Var<T> ag::fine_match_loss_stage1(Var<T>, const PixelPairs&);                  \
  template Var<T> ag::squared_distance(Var<T>, Vec2);                                     \
  template Var<T> ag::total_loss(Var<T>, Var<T>, Var<T>, const LossWeights&);

SDM_INSTANTIATE_SUPERVISION(float)
SDM_INSTANTIATE_SUPERVISION(double)

}  // namespace sdm
