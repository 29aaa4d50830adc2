#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace sdm {

using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

/// Scales H so h33 = 1 when h33 is not ~0; throws DegenerateError if |det| <= 1e-12 afterwards.
Mat3 normalize_homography(const Mat3& h);

/// Projective map of one point; nullopt when the point maps to infinity.
std::optional<Vec2> apply_homography(const Mat3& h, const Vec2& p);

struct WarpedPoints {
  std::vector<Vec2> points;
  std::vector<bool> valid;
};
WarpedPoints apply_homography(const Mat3& h, const std::vector<Vec2>& pts);

/// Normalized DLT from >= 4 correspondences src -> dst.
Mat3 dlt_homography(const std::vector<Vec2>& src, const std::vector<Vec2>& dst);

struct RansacOptions {
  double threshold_px = 3.0;
  std::size_t max_iters = 10000;
  double confidence = 0.999;
  std::uint64_t seed = 0;
};

struct RansacResult {
  Mat3 h;
  std::vector<bool> inliers;
  std::size_t inlier_count = 0;
  std::size_t iterations = 0;
};

/// Root-mean of the forward and backward squared transfer errors of one correspondence.
double symmetric_transfer_error(const Mat3& h, const Mat3& h_inv, const Vec2& a, const Vec2& b);

/// 4-point RANSAC with adaptive iteration count and a final refit on inliers.
RansacResult ransac_homography(const std::vector<Vec2>& src, const std::vector<Vec2>& dst, const RansacOptions& opt);

/// Corners (0,0), (w-1,0), (w-1,h-1), (0,h-1).
std::array<Vec2, 4> image_corners(double w, double h);

/// Mean distance between the image-A corners warped by `estimate` and by `truth`.
double corner_error(const Mat3& estimate, const Mat3& truth, double w, double h);

/// Per threshold t: mean over pairs of max(0, 1 - err / t).
std::vector<double> corner_auc(const std::vector<double>& errors, const std::vector<double>& thresholds = {3, 5, 10});

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Eigen::Matrix3d matrix() const;
};

/// Back-project pixels of A with depth, move by T_AB (4x4, A -> B camera), project with K_B.
/// Invalid: nonpositive input depth, nonpositive projected depth, or outside [0, w) x [0, h) of B.
WarpedPoints warp_points_depth_pose(const std::vector<Vec2>& pts, const std::vector<double>& depth,
                                    const Intrinsics& k_a, const Intrinsics& k_b, const Eigen::Matrix4d& t_ab,
                                    double width_b, double height_b);

}  // namespace sdm
