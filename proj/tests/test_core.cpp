#include <doctest.h>

#include <cmath>
#include <random>

#include "sdm/core/autodiff.hpp"
#include "sdm/core/counters.hpp"
#include "sdm/core/kernels.hpp"
#include "support/op_gradchecks.hpp"
#include "support/test_support.hpp"

using namespace sdm;
using sdm::testing::gradcheck;
using sdm::testing::max_abs_diff;
using sdm::testing::project;
using sdm::testing::random_tensor;

namespace {

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride, std::size_t pad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> y({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
              const long yy = long(i * stride + u) - long(pad), xx = long(j * stride + v) - long(pad);
              if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
              s += x.at(c, yy, xx) * k.at(o, c, u, v);
            }
        y.at(o, i, j) = s;
      }
  return y;
}

Tensor<double> naive_depthwise(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride,
                               std::size_t pad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), kh = k.dim(1), kw = k.dim(2);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> y({C, Ho, Wo});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double s = 0;
        for (std::size_t u = 0; u < kh; ++u)
          for (std::size_t v = 0; v < kw; ++v) {
            const long yy = long(i * stride + u) - long(pad), xx = long(j * stride + v) - long(pad);
            if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
            s += x.at(c, yy, xx) * k.at(c, u, v);
          }
        y.at(c, i, j) = s;
      }
  return y;
}

Tensor<double> naive_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                               double scale) {
  const std::size_t n = q.dim(0), m = k.dim(0), d = q.dim(1), dv = v.dim(1);
  Tensor<double> out({n, dv});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(m);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * k.at(j, c);
      s[j] = dot * scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t c = 0; c < dv; ++c) out.at(i, c) += s[j] / z * v.at(j, c);
  }
  return out;
}

double phi(double x) { return x > 0 ? x + 1 : std::exp(x); }

}  // namespace

TEST_CASE("conv2d identity and overlap counts") {
  Tensor<float> x({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = float(i);
  Tensor<float> k1({1, 1, 1, 1}, 1.0f);
  CHECK(max_abs_diff(kernels::conv2d(x, k1, 1, 0), x) == 0.0);

  Tensor<float> ones({1, 3, 3}, 1.0f);
  Tensor<float> k3({1, 1, 3, 3}, 1.0f);
  auto y = kernels::conv2d(ones, k3, 1, 1);
  CHECK(y.at(0, 1, 1) == 9.0f);
  CHECK(y.at(0, 0, 0) == 4.0f);
  CHECK(y.at(0, 0, 1) == 6.0f);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  std::mt19937_64 rng(1);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      auto x = random_tensor<double>({3, 8, 8}, rng);
      auto k = random_tensor<double>({4, 3, 3, 3}, rng);
      auto got = kernels::conv2d(x.cast<float>(), k.cast<float>(), stride, pad).cast<double>();
      CHECK(max_abs_diff(got, naive_conv(x, k, stride, pad)) < 1e-5);
    }
  }
  auto x = random_tensor<double>({5, 7, 9}, rng);
  auto k = random_tensor<double>({6, 5, 1, 1}, rng);
  CHECK(max_abs_diff(kernels::conv2d(x, k, 1, 0), naive_conv(x, k, 1, 0)) < 1e-12);
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor<float> x({2, 4, 4});
  Tensor<float> k({1, 3, 3, 3});
  CHECK_THROWS_AS(kernels::conv2d(x, k, 1, 1), ShapeError);
}

TEST_CASE("depthwise conv: identity, channel independence, oracle") {
  std::mt19937_64 rng(2);
  auto x = random_tensor<float>({2, 6, 6}, rng);
  Tensor<float> id({2, 1, 1}, 1.0f);
  CHECK(max_abs_diff(kernels::depthwise_conv2d(x, id, 1, 0), x) == 0.0);

  for (std::size_t i = 0; i < 36; ++i) x[36 + i] = 0.0f;
  auto y = kernels::depthwise_conv2d(x, random_tensor<float>({2, 3, 3}, rng), 1, 1);
  for (std::size_t i = 0; i < 36; ++i) CHECK(y[36 + i] == 0.0f);

  auto xd = random_tensor<double>({4, 12, 12}, rng);
  auto kd = random_tensor<double>({4, 4, 4}, rng);
  auto got = kernels::depthwise_conv2d(xd.cast<float>(), kd.cast<float>(), 4, 0).cast<double>();
  CHECK(max_abs_diff(got, naive_depthwise(xd, kd, 4, 0)) < 1e-5);
  CHECK_THROWS_AS(kernels::depthwise_conv2d(xd, random_tensor<double>({3, 3, 3}, rng), 1, 1), ShapeError);
}

TEST_CASE("maxpool: constant, global max, window scan, first-occurrence ties") {
  Tensor<float> c({1, 4, 4}, 2.5f);
  auto pc = kernels::maxpool2d(c, 2, 2);
  for (float v : pc.values.data()) CHECK(v == 2.5f);
  CHECK(pc.argmax[0] == 0);

  Tensor<float> r({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) r[i] = float(i);
  auto pr = kernels::maxpool2d(r, 4, 4);
  REQUIRE(pr.values.size() == 1);
  CHECK(pr.values[0] == 15.0f);

  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({2, 8, 8}, rng);
  auto p = kernels::maxpool2d(x, 4, 4);
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        float m = -INFINITY;
        for (std::size_t u = 0; u < 4; ++u)
          for (std::size_t v = 0; v < 4; ++v) m = std::max(m, x.at(ch, 4 * i + u, 4 * j + v));
        CHECK(p.values.at(ch, i, j) == m);
      }
  CHECK_THROWS_AS(kernels::maxpool2d(x, 9, 1), ShapeError);
}

TEST_CASE("maxpool gradient is one-hot routing") {
  std::mt19937_64 rng(4);
  Tape<double> tape;
  auto x = tape.variable(random_tensor<double>({2, 8, 8}, rng));
  auto y = ag::maxpool2d(x, 4, 4);
  auto g = random_tensor<double>(y.shape(), rng);
  tape.backward(ag::sum(ag::mul(y, tape.input(g))));
  const auto& gx = *tape.grad(x);
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double routed = 0;
        int nonzero = 0;
        for (std::size_t u = 0; u < 4; ++u)
          for (std::size_t v = 0; v < 4; ++v) {
            const double e = gx.at(ch, 4 * i + u, 4 * j + v);
            routed += std::abs(e);
            nonzero += e != 0.0;
          }
        CHECK(routed == doctest::Approx(std::abs(g.at(ch, i, j))));
        CHECK(nonzero <= 1);
      }
}

TEST_CASE("softmax: uniform, overflow safety, sums and 64-bit oracle") {
  Tensor<float> u({4}, 3.0f);
  auto su = kernels::softmax(u, 0);
  for (float v : su.data()) CHECK(v == doctest::Approx(0.25f));
  Tensor<float> big({2}, std::vector<float>{1000.0f, 0.0f});
  auto b = kernels::softmax(big, 0);
  CHECK(b[0] == 1.0f);
  CHECK(b[1] >= 0.0f);
  CHECK(b.all_finite());

  std::mt19937_64 rng(5);
  for (double mag : {1.0, 50.0, 1e4}) {
    auto x = random_tensor<double>({6, 11}, rng, -mag, mag);
    for (std::size_t axis : {0, 1}) {
      auto y = kernels::softmax(x.cast<float>(), axis);
      auto yd = kernels::softmax(x, axis);
      CHECK(max_abs_diff(y.cast<double>(), yd) < 1e-6);
      if (axis == 1) {
        for (std::size_t i = 0; i < 6; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < 11; ++j) s += y.at(i, j);
          CHECK(std::abs(s - 1.0) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("masked softmax zeroes masked entries and rejects fully masked rows") {
  Tensor<double> x({1, 3}, std::vector<double>{1.0, 2.0, 3.0});
  std::vector<unsigned char> mask{1, 0, 1};
  auto y = kernels::softmax(x, 1, &mask);
  CHECK(y[1] == 0.0);
  CHECK(y[0] + y[2] == doctest::Approx(1.0));
  std::vector<unsigned char> none{0, 0, 0};
  CHECK_THROWS_AS(kernels::softmax(x, 1, &none), DegenerateError);
}

TEST_CASE("vanilla attention: single key, one-hot limit, composed oracle") {
  std::mt19937_64 rng(6);
  auto q = random_tensor<float>({5, 8}, rng);
  auto k1 = random_tensor<float>({1, 8}, rng);
  auto v1 = random_tensor<float>({1, 8}, rng);
  auto out1 = kernels::vanilla_attention(q, k1, v1);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) CHECK(out1.at(i, c) == doctest::Approx(v1.at(0, c)));

  Tensor<float> qh({1, 2}, std::vector<float>{1.0f, 0.0f});
  Tensor<float> kh({3, 2}, std::vector<float>{0.0f, 0.0f, 1e4f, 0.0f, 0.0f, 0.0f});
  auto vh = random_tensor<float>({3, 4}, rng);
  auto oh = kernels::vanilla_attention(qh, kh, vh, 1.0f);
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(oh.at(0, c) - vh.at(1, c)) < 1e-4);

  auto qd = random_tensor<double>({5, 8}, rng);
  auto kd = random_tensor<double>({7, 8}, rng);
  auto vd = random_tensor<double>({7, 8}, rng);
  auto got = kernels::vanilla_attention(qd.cast<float>(), kd.cast<float>(), vd.cast<float>()).cast<double>();
  CHECK(max_abs_diff(got, naive_attention(qd, kd, vd, 1.0 / std::sqrt(8.0))) < 1e-5);
  CHECK_THROWS_AS(kernels::vanilla_attention(qd, random_tensor<double>({7, 6}, rng), vd), ShapeError);
}

TEST_CASE("linear attention: single key, constant query, per-query loop oracle") {
  std::mt19937_64 rng(7);
  auto q = random_tensor<double>({4, 6}, rng);
  auto k1 = random_tensor<double>({1, 6}, rng);
  auto v1 = random_tensor<double>({1, 5}, rng);
  auto out1 = kernels::linear_attention(q, k1, v1);
  auto van1 = kernels::vanilla_attention(q, k1, v1);
  CHECK(max_abs_diff(out1, van1) < 1e-12);

  auto k = random_tensor<double>({9, 6}, rng);
  auto v = random_tensor<double>({9, 5}, rng);
  auto z = kernels::linear_attention(Tensor<double>({3, 6}), k, v);
  for (std::size_t c = 0; c < 5; ++c) {
    double num = 0, den = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      double w = 0;
      for (std::size_t d = 0; d < 6; ++d) w += phi(k.at(j, d));
      num += w * v.at(j, c);
      den += w;
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(z.at(i, c) == doctest::Approx(num / den).epsilon(1e-12));
  }

  for (auto form : {kernels::LinearAttentionForm::Normalized, kernels::LinearAttentionForm::Literal}) {
    auto got = kernels::linear_attention(q.cast<float>(), k.cast<float>(), v.cast<float>(), form).cast<double>();
    Tensor<double> ref({4, 5});
    for (std::size_t i = 0; i < 4; ++i) {
      double den = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        double w = 0;
        for (std::size_t d = 0; d < 6; ++d) w += phi(q.at(i, d)) * phi(k.at(j, d));
        den += w;
        for (std::size_t c = 0; c < 5; ++c) {
          const double val = form == kernels::LinearAttentionForm::Literal ? phi(v.at(j, c)) : v.at(j, c);
          ref.at(i, c) += w * val;
        }
      }
      if (form == kernels::LinearAttentionForm::Normalized)
        for (std::size_t c = 0; c < 5; ++c) ref.at(i, c) /= den;
    }
    double scale = 1;
    for (double r : ref.data()) scale = std::max(scale, std::abs(r));
    CHECK(max_abs_diff(got, ref) / scale < 1e-5);
  }
}

TEST_CASE("bilinear upsample: identity, constant, closed-form 2x2") {
  std::mt19937_64 rng(8);
  auto x = random_tensor<float>({2, 3, 5}, rng);
  CHECK(max_abs_diff(kernels::bilinear_upsample(x, 1), x) == 0.0);
  Tensor<float> c({1, 3, 3}, 0.7f);
  auto uc = kernels::bilinear_upsample(c, 4);
  for (float v : uc.data()) CHECK(v == doctest::Approx(0.7f));

  Tensor<double> m({1, 2, 2}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  auto y = kernels::bilinear_upsample(m, 2);
  const double w[4][2] = {{1, 0}, {0.75, 0.25}, {0.25, 0.75}, {0, 1}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double expect = 0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) expect += w[i][a] * w[j][b] * m.at(0, a, b);
      CHECK(y.at(0, i, j) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("backward: analytic identities and tape errors") {
  std::mt19937_64 rng(9);
  {
    Tape<double> tape;
    auto x = tape.variable(random_tensor<double>({3, 4}, rng));
    tape.backward(ag::sum(x));
    for (double g : tape.grad(x)->data()) CHECK(g == 1.0);
  }
  {
    Tape<double> tape;
    auto x = tape.variable(random_tensor<double>({3, 4}, rng, -3, 3));
    tape.backward(ag::sum(ag::softmax(x, 1)));
    for (double g : tape.grad(x)->data()) CHECK(std::abs(g) < 1e-12);
  }
  {
    Tape<double> tape;
    auto x = tape.variable(random_tensor<double>({3, 4}, rng));
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
    auto c = tape.input(Tensor<double>({1}, 2.0));
    CHECK_THROWS_AS(tape.backward(ag::sum(c)), ShapeError);
  }
  {
    Tape<double> tape;
    auto x = tape.variable(Tensor<double>({2}, std::vector<double>{-1.0, 1.0}));
    CHECK_THROWS_AS(ag::log(x), NumericError);
  }
}

TEST_CASE("gradient shape equals value shape for every node") {
  std::mt19937_64 rng(10);
  Tape<double> tape;
  auto x = tape.variable(random_tensor<double>({2, 6, 6}, rng));
  auto k = tape.variable(random_tensor<double>({3, 2, 3, 3}, rng));
  auto y = ag::relu(ag::conv2d(x, k, 1, 1));
  auto t = ag::map_to_tokens(y);
  tape.backward(project(tape, ag::softmax(t, 1)));
  for (auto v : {x, k, y, t}) {
    REQUIRE(tape.grad(v) != nullptr);
    CHECK(tape.grad(v)->shape() == v.shape());
  }
}

TEST_CASE("every differentiable op passes central-difference checks") {
  const auto checks = sdm::testing::op_gradcheck_suite();
  CHECK(checks.size() >= 30);
  for (const auto& c : checks) {
    INFO(c.op);
    CHECK(c.error < 1e-4);
  }
}

TEST_CASE("composite conv -> attention graph matches finite differences") {
  std::mt19937_64 rng(12);
  auto x = random_tensor<double>({2, 6, 6}, rng);
  auto k = random_tensor<double>({4, 2, 3, 3}, rng, -0.5, 0.5);
  auto wq = random_tensor<double>({4, 4}, rng);
  double err = gradcheck({x, k, wq}, [](Tape<double>& t, const std::vector<Var<double>>& v) {
    auto f = ag::map_to_tokens(ag::relu(ag::conv2d(v[0], v[1], 1, 1)));
    auto q = ag::matmul(f, v[2]);
    return project(t, ag::attention(q, f, f, 2, 0.5));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("vanilla and linear attention agree when there is one key") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = random_tensor<double>({4, 8}, rng);
    auto k = random_tensor<double>({1, 8}, rng);
    auto v = random_tensor<double>({1, 8}, rng);
    CHECK(max_abs_diff(kernels::vanilla_attention(q, k, v), kernels::linear_attention(q, k, v)) < 1e-12);
  }
}

TEST_CASE("op counters record conv and softmax calls") {
  op_counters().reset();
  Tensor<float> x({1, 4, 4}, 1.0f);
  kernels::conv2d(x, Tensor<float>({1, 1, 1, 1}, 1.0f), 1, 0);
  kernels::softmax(Tensor<float>({3}, 0.0f), 0);
  CHECK(op_counters().conv2d == 1);
  CHECK(op_counters().softmax == 1);
}
