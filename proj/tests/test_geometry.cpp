#include <doctest.h>

#include <random>

#include "sdm/core/errors.hpp"
#include "sdm/geometry/homography.hpp"

using namespace sdm;

namespace {

Mat3 random_h(std::mt19937_64& rng, double size) {
  std::uniform_real_distribution<double> u(-1, 1);
  Mat3 h;
  h << 1 + 0.2 * u(rng), 0.2 * u(rng), size * 0.1 * u(rng), 0.2 * u(rng), 1 + 0.2 * u(rng), size * 0.1 * u(rng),
      0.3 * u(rng) / size, 0.3 * u(rng) / size, 1;
  return h;
}

double corner_dist(const Mat3& a, const Mat3& b, double size) { return corner_error(a, b, size, size); }

}  // namespace

TEST_CASE("apply_homography") {
  const Vec2 p{3.5, -2};
  CHECK(*apply_homography(Mat3::Identity(), p) == p);
  Mat3 t = Mat3::Identity();
  t(0, 2) = 5;
  t(1, 2) = -1.25;
  CHECK(*apply_homography(t, p) == Vec2{8.5, -3.25});

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 200);
  for (int trial = 0; trial < 100; ++trial) {
    const Mat3 h = random_h(rng, 200);
    const Vec2 q{u(rng), u(rng)};
    long double x = 0, y = 0, w = 0;
    for (int c = 0; c < 3; ++c) {
      const long double v = c == 0 ? q.x() : c == 1 ? q.y() : 1;
      x += h(0, c) * v;
      y += h(1, c) * v;
      w += h(2, c) * v;
    }
    const auto r = apply_homography(h, q);
    REQUIRE(r);
    CHECK(std::abs(r->x() - double(x / w)) < 1e-9);
    CHECK(std::abs(r->y() - double(y / w)) < 1e-9);
    const auto back = apply_homography(h.inverse(), *r);
    CHECK((*back - q).norm() < 1e-6);
  }
  Mat3 vanish = Mat3::Identity();
  vanish(2, 0) = 1;
  vanish(2, 2) = 0;
  CHECK_FALSE(apply_homography(vanish, Vec2{0, 4}).has_value());
  const auto many = apply_homography(vanish, std::vector<Vec2>{Vec2{0, 4}, Vec2{2, 1}});
  CHECK_FALSE(many.valid[0]);
  CHECK(many.valid[1]);
}

TEST_CASE("normalization") {
  Mat3 h = 3.0 * Mat3::Identity();
  CHECK(normalize_homography(h)(2, 2) == 1.0);
  CHECK_THROWS_AS(normalize_homography(Mat3::Zero()), DegenerateError);
}

TEST_CASE("dlt recovers known homographies") {
  std::mt19937_64 rng(2);
  const std::vector<Vec2> square{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  for (int trial = 0; trial < 50; ++trial) {
    Mat3 h = random_h(rng, 1);
    h /= h(2, 2);
    std::vector<Vec2> dst;
    for (const auto& p : square) dst.push_back(*apply_homography(h, p));
    const Mat3 est = dlt_homography(square, dst);
    CHECK((est - h).cwiseAbs().maxCoeff() < 1e-6);
  }
  CHECK((dlt_homography(square, square) - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);

  std::uniform_real_distribution<double> u(0, 256);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat3 h = random_h(rng, 256);
    std::vector<Vec2> src, dst;
    for (int k = 0; k < 30; ++k) {
      src.emplace_back(u(rng), u(rng));
      dst.push_back(*apply_homography(h, src.back()));
    }
    CHECK(corner_dist(dlt_homography(src, dst), h, 256) < 1e-6);
  }
  CHECK_THROWS_AS(dlt_homography({{0, 0}, {1, 1}, {2, 2}, {0, 5}}, square), DegenerateError);
  CHECK_THROWS_AS(dlt_homography({{0, 0}, {1, 1}, {2, 2}}, {{0, 0}, {1, 1}, {2, 2}}), DegenerateError);
  CHECK_THROWS_AS(dlt_homography({{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}}, {{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}}),
                  DegenerateError);
}

TEST_CASE("ransac on clean and contaminated matches") {
  std::uniform_real_distribution<double> u(0, 256);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Mat3 h = random_h(rng, 256);
    std::vector<Vec2> src, dst;
    for (int k = 0; k < 200; ++k) {
      src.emplace_back(u(rng), u(rng));
      dst.push_back(k % 2 ? Vec2{u(rng), u(rng)} : *apply_homography(h, src.back()));
    }
    RansacOptions opt;
    opt.seed = seed;
    const auto r = ransac_homography(src, dst, opt);
    CHECK(corner_dist(r.h, h, 256) < 1.0);
    CHECK(r.inlier_count >= 100);
    for (int k = 0; k < 200; k += 2) CHECK(r.inliers[k]);
    const auto again = ransac_homography(src, dst, opt);
    CHECK(again.inliers == r.inliers);
    CHECK(again.h == r.h);

    std::vector<Vec2> clean_dst;
    for (const auto& p : src) clean_dst.push_back(*apply_homography(h, p));
    const auto c = ransac_homography(src, clean_dst, opt);
    CHECK(c.inlier_count == 200);
    CHECK(corner_dist(c.h, h, 256) < 1e-3);
  }
  CHECK_THROWS_AS(ransac_homography({{0, 0}, {1, 0}, {0, 1}}, {{0, 0}, {1, 0}, {0, 1}}, {}), DegenerateError);
}

TEST_CASE("corner error and auc") {
  CHECK(corner_error(Mat3::Identity(), Mat3::Identity(), 64, 48) == 0.0);
  Mat3 t = Mat3::Identity();
  t(0, 2) = 3;
  CHECK(corner_error(t, Mat3::Identity(), 64, 48) == doctest::Approx(3.0));
  const auto corners = image_corners(64, 48);
  CHECK(corners[2] == Vec2{63, 47});

  CHECK(corner_auc({0, 0, 0}) == std::vector<double>{1, 1, 1});
  CHECK(corner_auc({10, 12, INFINITY}) == std::vector<double>{0, 0, 0});
  CHECK(corner_auc({0, 5}, {5})[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(corner_auc({}), DegenerateError);
  CHECK_THROWS_AS(corner_auc({-1.0}), UsageError);
  std::mt19937_64 rng(3);
  std::exponential_distribution<double> e(0.3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> errs;
    for (int k = 0; k < 10; ++k) errs.push_back(e(rng));
    const auto a = corner_auc(errs);
    CHECK(a[0] <= a[1]);
    CHECK(a[1] <= a[2]);
  }
}

TEST_CASE("depth and pose warping") {
  const Intrinsics k{500, 480, 320, 240};
  std::vector<Vec2> pts{{10, 20}, {320, 240}, {600, 400}};
  const auto same = warp_points_depth_pose(pts, {2, 3, 4}, k, k, Eigen::Matrix4d::Identity(), 640, 480);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(same.valid[i]);
    CHECK((same.points[i] - pts[i]).norm() < 1e-9);
  }

  Eigen::Matrix4d closer = Eigen::Matrix4d::Identity();
  closer(2, 3) = -1.0;  // depth 2 -> 1
  const auto z = warp_points_depth_pose({{330, 250}, {300, 200}}, {2, 2}, k, k, closer, 640, 480);
  CHECK((z.points[0] - Vec2{340, 260}).norm() < 1e-9);
  CHECK((z.points[1] - Vec2{280, 160}).norm() < 1e-9);

  const auto bad = warp_points_depth_pose({{1, 1}, {2, 2}, {630, 470}}, {0, -1, 1}, k, k, closer, 640, 480);
  CHECK_FALSE(bad.valid[0]);
  CHECK_FALSE(bad.valid[1]);
  CHECK_FALSE(bad.valid[2]);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1), px(0, 640), dz(2, 8);
  const Intrinsics kb{450, 455, 300, 250};
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Matrix3d r =
        (Eigen::AngleAxisd(0.2 * u(rng), Eigen::Vector3d::UnitX()) * Eigen::AngleAxisd(0.2 * u(rng), Eigen::Vector3d::UnitY()) *
         Eigen::AngleAxisd(0.2 * u(rng), Eigen::Vector3d::UnitZ()))
            .toRotationMatrix();
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    t.block<3, 3>(0, 0) = r;
    t.block<3, 1>(0, 3) = Eigen::Vector3d(0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng));
    const Vec2 p{px(rng), px(rng) * 0.75};
    const double d = dz(rng);
    // long double chain: back-project, rigid motion, project
    const long double X = (p.x() - k.cx) / k.fx * d, Y = (p.y() - k.cy) / k.fy * d, Z = d;
    long double c[3];
    for (int row = 0; row < 3; ++row) c[row] = t(row, 0) * X + t(row, 1) * Y + t(row, 2) * Z + t(row, 3);
    const long double ux = kb.fx * c[0] / c[2] + kb.cx, uy = kb.fy * c[1] / c[2] + kb.cy;
    const auto w = warp_points_depth_pose({p}, {d}, k, kb, t, 1e6, 1e6);
    const bool inside = c[2] > 0 && ux >= 0 && uy >= 0 && ux < 1e6 && uy < 1e6;
    REQUIRE(w.valid[0] == inside);
    if (!inside) continue;
    CHECK(std::abs(w.points[0].x() - double(ux)) < 1e-6);
    CHECK(std::abs(w.points[0].y() - double(uy)) < 1e-6);
  }
}

TEST_CASE("symmetric transfer error") {
  Mat3 t = Mat3::Identity();
  t(0, 2) = 2;
  CHECK(symmetric_transfer_error(t, t.inverse(), {0, 0}, {2, 0}) == doctest::Approx(0.0));
  CHECK(symmetric_transfer_error(t, t.inverse(), {0, 0}, {5, 4}) == doctest::Approx(5.0));
}
