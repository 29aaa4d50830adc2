#include "sdm/geometry/homography.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>

#include "sdm/core/errors.hpp"

namespace sdm {

Mat3 normalize_homography(const Mat3& h) {
  Mat3 out = h;
  if (std::abs(h(2, 2)) > 1e-12) out /= h(2, 2);
  if (!out.allFinite() || std::abs(out.determinant()) <= 1e-12) throw DegenerateError("homography is singular");
  return out;
}

std::optional<Vec2> apply_homography(const Mat3& h, const Vec2& p) {
  const Eigen::Vector3d q = h * p.homogeneous();
  if (std::abs(q.z()) < 1e-12 || !std::isfinite(q.z())) return std::nullopt;
  return Vec2(q.x() / q.z(), q.y() / q.z());
}

WarpedPoints apply_homography(const Mat3& h, const std::vector<Vec2>& pts) {
  WarpedPoints out;
  out.points.reserve(pts.size());
  out.valid.reserve(pts.size());
  for (const auto& p : pts) {
    auto q = apply_homography(h, p);
    out.valid.push_back(q.has_value());
    out.points.push_back(q.value_or(Vec2(NAN, NAN)));
  }
  return out;
}

namespace {

/// Similarity moving the centroid to 0 and the mean distance to sqrt(2).
Mat3 hartley(const std::vector<Vec2>& pts) {
  Vec2 c = Vec2::Zero();
  for (const auto& p : pts) c += p;
  c /= double(pts.size());
  double mean = 0;
  for (const auto& p : pts) mean += (p - c).norm();
  mean /= double(pts.size());
  if (mean < 1e-12) throw DegenerateError("correspondences collapse to a single point");
  const double s = std::sqrt(2.0) / mean;
  Mat3 t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

bool has_collinear_triple(const std::vector<Vec2>& p) {
  double scale = 0;
  for (const auto& q : p) scale = std::max(scale, q.cwiseAbs().maxCoeff());
  const double tol = 1e-9 * std::max(1.0, scale * scale);
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = i + 1; j < p.size(); ++j) {
      for (std::size_t k = j + 1; k < p.size(); ++k) {
        const Vec2 u = p[j] - p[i], v = p[k] - p[i];
        if (std::abs(u.x() * v.y() - u.y() * v.x()) <= tol) return true;
      }
    }
  }
  return false;
}

}  // namespace

Mat3 dlt_homography(const std::vector<Vec2>& src, const std::vector<Vec2>& dst) {
  if (src.size() != dst.size()) throw DegenerateError("dlt: source and target counts differ");
  if (src.size() < 4) throw DegenerateError("dlt: need at least 4 correspondences");
  if (src.size() == 4 && (has_collinear_triple(src) || has_collinear_triple(dst))) {
    throw DegenerateError("dlt: three of the four points are collinear");
  }
  const Mat3 ts = hartley(src), td = hartley(dst);
  const std::size_t n = src.size();
  Eigen::MatrixXd a(2 * n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ts * src[i].homogeneous();
    const Eigen::Vector3d q = td * dst[i].homogeneous();
    const double x = p.x(), y = p.y(), u = q.x(), v = q.y();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // The null space must be one-dimensional: the second smallest singular value stays away from zero.
  if (sv.size() >= 8 && sv(7) <= 1e-10 * std::max(1.0, sv(0))) {
    throw DegenerateError("dlt: correspondences are degenerate (rank deficient)");
  }
  const Eigen::VectorXd hv = svd.matrixV().col(8);
  Mat3 hn;
  hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  return normalize_homography(td.inverse() * hn * ts);
}

double symmetric_transfer_error(const Mat3& h, const Mat3& h_inv, const Vec2& a, const Vec2& b) {
  const auto fb = apply_homography(h, a);
  const auto ba = apply_homography(h_inv, b);
  if (!fb || !ba) return std::numeric_limits<double>::infinity();
  return std::sqrt(0.5 * ((*fb - b).squaredNorm() + (*ba - a).squaredNorm()));
}

namespace {

std::size_t count_inliers(const Mat3& h, const std::vector<Vec2>& src, const std::vector<Vec2>& dst, double thr,
                          std::vector<bool>& mask) {
  mask.assign(src.size(), false);
  Mat3 hi;
  bool invertible = false;
  h.computeInverseWithCheck(hi, invertible);
  if (!invertible) return 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (symmetric_transfer_error(h, hi, src[i], dst[i]) < thr) {
      mask[i] = true;
      ++n;
    }
  }
  return n;
}

std::size_t needed_iterations(double inlier_ratio, double confidence, std::size_t cap) {
  const double w4 = std::pow(inlier_ratio, 4.0);
  if (w4 >= 1.0 - 1e-15) return 1;
  if (w4 <= 0.0) return cap;
  const double n = std::log(1.0 - confidence) / std::log(1.0 - w4);
  if (!std::isfinite(n) || n >= double(cap)) return cap;
  return std::max<std::size_t>(1, std::size_t(std::ceil(n)));
}

}  // namespace

RansacResult ransac_homography(const std::vector<Vec2>& src, const std::vector<Vec2>& dst, const RansacOptions& opt) {
  if (src.size() != dst.size()) throw DegenerateError("ransac: source and target counts differ");
  if (src.size() < 4) throw DegenerateError("ransac: need at least 4 matches");
  std::mt19937_64 rng(opt.seed);
  const std::size_t n = src.size();
  RansacResult best;
  best.h = Mat3::Identity();
  std::size_t budget = opt.max_iters;
  std::vector<bool> mask;
  std::vector<Vec2> s4(4), d4(4);
  std::size_t it = 0;
  for (; it < budget; ++it) {
    std::array<std::size_t, 4> idx{};
    for (std::size_t k = 0; k < 4; ++k) {
      bool fresh;
      do {
        idx[k] = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        fresh = std::find(idx.begin(), idx.begin() + k, idx[k]) == idx.begin() + k;
      } while (!fresh);
      s4[k] = src[idx[k]];
      d4[k] = dst[idx[k]];
    }
    Mat3 h;
    try {
      h = dlt_homography(s4, d4);
    } catch (const DegenerateError&) {
      continue;
    }
    const std::size_t c = count_inliers(h, src, dst, opt.threshold_px, mask);
    if (c > best.inlier_count) {
      best.inlier_count = c;
      best.h = h;
      best.inliers = mask;
      budget = std::min(budget, needed_iterations(double(c) / double(n), opt.confidence, opt.max_iters));
    }
  }
  best.iterations = it;
  if (best.inlier_count < 4) throw DegenerateError("ransac: no model with at least 4 inliers");
  // Refit on the inlier set; keep the refit only if it does not lose support.
  for (int round = 0; round < 3; ++round) {
    std::vector<Vec2> si, di;
    for (std::size_t i = 0; i < n; ++i) {
      if (best.inliers[i]) {
        si.push_back(src[i]);
        di.push_back(dst[i]);
      }
    }
    Mat3 h;
    try {
      h = dlt_homography(si, di);
    } catch (const DegenerateError&) {
      break;
    }
    const std::size_t c = count_inliers(h, src, dst, opt.threshold_px, mask);
    if (c < best.inlier_count) break;
    const bool same = mask == best.inliers;
    best.h = h;
    best.inliers = mask;
    best.inlier_count = c;
    if (same) break;
  }
  return best;
}

std::array<Vec2, 4> image_corners(double w, double h) {
  return {Vec2(0, 0), Vec2(w - 1, 0), Vec2(w - 1, h - 1), Vec2(0, h - 1)};
}

double corner_error(const Mat3& estimate, const Mat3& truth, double w, double h) {
  double sum = 0;
  for (const auto& c : image_corners(w, h)) {
    const auto a = apply_homography(estimate, c);
    const auto b = apply_homography(truth, c);
    if (!a || !b) return std::numeric_limits<double>::infinity();
    sum += (*a - *b).norm();
  }
  return sum / 4.0;
}

std::vector<double> corner_auc(const std::vector<double>& errors, const std::vector<double>& thresholds) {
  if (errors.empty()) throw DegenerateError("corner_auc: no errors given");
  std::vector<double> out;
  for (double t : thresholds) {
    if (!(t > 0)) throw UsageError("corner_auc: thresholds must be positive");
    double s = 0;
    for (double e : errors) {
      if (e < 0 || std::isnan(e)) throw UsageError("corner_auc: errors must be nonnegative");
      s += std::max(0.0, 1.0 - e / t);
    }
    out.push_back(s / double(errors.size()));
  }
  return out;
}

Eigen::Matrix3d Intrinsics::matrix() const {
  Eigen::Matrix3d k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

WarpedPoints warp_points_depth_pose(const std::vector<Vec2>& pts, const std::vector<double>& depth,
                                    const Intrinsics& k_a, const Intrinsics& k_b, const Eigen::Matrix4d& t_ab,
                                    double width_b, double height_b) {
  if (pts.size() != depth.size()) throw UsageError("warp: one depth per point required");
  const Eigen::Matrix3d ka_inv = k_a.matrix().inverse(), kb = k_b.matrix();
  WarpedPoints out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool ok = depth[i] > 0 && std::isfinite(depth[i]);
    Vec2 q(NAN, NAN);
    if (ok) {
      const Eigen::Vector3d xa = depth[i] * (ka_inv * pts[i].homogeneous());
      const Eigen::Vector3d xb = t_ab.topLeftCorner<3, 3>() * xa + t_ab.topRightCorner<3, 1>();
      ok = xb.z() > 0;
      if (ok) {
        const Eigen::Vector3d p = kb * xb;
        q = Vec2(p.x() / p.z(), p.y() / p.z());
        ok = q.x() >= 0 && q.y() >= 0 && q.x() < width_b && q.y() < height_b;
      }
    }
    out.points.push_back(q);
    out.valid.push_back(ok);
  }
  return out;
}

}  // namespace sdm
