#include <doctest.h>

#include <set>

#include "sdm/core/counters.hpp"
#include "sdm/match/coarse.hpp"
#include "support/test_support.hpp"

using namespace sdm;
using sdm::testing::max_abs_diff;
using sdm::testing::random_tensor;

namespace {

std::vector<CoarseMatch> brute_mnn(const Tensor<double>& m, double tau) {
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<CoarseMatch> out;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      bool row_best = true, col_best = true;
      for (std::size_t k = 0; k < c; ++k) {
        if (m[i * c + k] > m[i * c + j] || (m[i * c + k] == m[i * c + j] && k < j)) row_best = false;
      }
      for (std::size_t k = 0; k < r; ++k) {
        if (m[k * c + j] > m[i * c + j] || (m[k * c + j] == m[i * c + j] && k < i)) col_best = false;
      }
      if (row_best && col_best && m[i * c + j] >= tau) out.push_back({i, j, m[i * c + j]});
    }
  }
  return out;
}

bool same_pairs(const std::vector<CoarseMatch>& a, const std::vector<CoarseMatch>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!(a[k] == b[k]) || a[k].confidence != b[k].confidence) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("correlation equals a nested-loop dot product") {
  std::mt19937_64 rng(1);
  const auto fa = random_tensor<double>({5, 3, 4}, rng), fb = random_tensor<double>({5, 2, 3}, rng);
  const auto s = correlate(fa, fb, 10.0);
  REQUIRE(s.shape() == Shape{12, 6});
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < 5; ++c) dot += fa[c * 12 + i] * fb[c * 6 + j];
      CHECK(s[i * 6 + j] == doctest::Approx(10 * dot).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(correlate(fa, random_tensor<double>({4, 2, 3}, rng), 1.0), ShapeError);
}

TEST_CASE("orthonormal per-cell features correlate to a scaled identity") {
  Tensor<double> f({4, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) f[i * 4 + i] = 1;
  const auto s = correlate(f, f, 10.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(s[i * 4 + j] == (i == j ? 10.0 : 0.0));
}

TEST_CASE("dual softmax closed forms") {
  CHECK(dual_softmax(Tensor<double>({1, 1}, {3.7}))[0] == doctest::Approx(1.0));
  const auto p = dual_softmax(Tensor<double>({2, 2}, {10, 0, 0, 10}));
  const double d = std::pow(1.0 / (1.0 + std::exp(-10.0)), 2);
  CHECK(p[0] == doctest::Approx(d).epsilon(1e-12));
  CHECK(p[3] == doctest::Approx(d).epsilon(1e-12));
  CHECK(p[1] < 1e-8);

  std::mt19937_64 rng(2);
  const auto s = random_tensor<double>({7, 9}, rng, -5, 5);
  const auto q = dual_softmax(s);
  for (std::size_t i = 0; i < 7; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < 9; ++j) z += std::exp(s[i * 9 + j]);
    for (std::size_t j = 0; j < 9; ++j) {
      double zc = 0;
      for (std::size_t k = 0; k < 7; ++k) zc += std::exp(s[k * 9 + j]);
      const double row = std::exp(s[i * 9 + j]) / z, col = std::exp(s[i * 9 + j]) / zc;
      CHECK(q[i * 9 + j] == doctest::Approx(row * col).epsilon(1e-12));
      CHECK(q[i * 9 + j] <= std::min(row, col) + 1e-15);
    }
  }
}

TEST_CASE("mnn hand-enumerated example") {
  const Tensor<double> m({2, 2}, {0.9, 0.8, 0.95, 0.1});
  const auto all = mnn_select(m, 0.0);
  REQUIRE(all.size() == 1);
  CHECK(all[0].i == 1);
  CHECK(all[0].j == 0);
  CHECK(mnn_select(m, 0.2).size() == 1);
  CHECK(mnn_select(m, 0.96).empty());
}

TEST_CASE("mnn equals the brute-force oracle, including ties") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> dims(1, 12), levels(0, 4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = dims(rng), c = dims(rng);
    Tensor<double> m({r, c});
    const bool ties = trial % 2;
    for (auto& v : m.storage()) v = ties ? double(levels(rng)) : std::uniform_real_distribution<double>(0, 1)(rng);
    const double tau = trial % 3 ? 0.3 : -INFINITY;
    CHECK(same_pairs(mnn_select(m, tau), brute_mnn(m, tau)));
  }
}

TEST_CASE("mnn properties: monotone invariance, transpose symmetry, injectivity") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_tensor<double>({10, 13}, rng, -3, 3);
    Tensor<double> g(m.shape()), t({13, 10});
    for (std::size_t k = 0; k < m.size(); ++k) g[k] = std::exp(2 * m[k]) + 5;
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < 13; ++j) t[j * 10 + i] = m[i * 13 + j];
    const auto a = mnn_select(m), b = mnn_select(g), c = mnn_select(t);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
    std::set<std::pair<std::size_t, std::size_t>> fwd, back;
    std::set<std::size_t> is, js;
    for (const auto& x : a) {
      fwd.insert({x.i, x.j});
      CHECK(is.insert(x.i).second);
      CHECK(js.insert(x.j).second);
    }
    for (const auto& x : c) back.insert({x.j, x.i});
    CHECK(fwd == back);
  }
}

TEST_CASE("full and optimized modes") {
  std::mt19937_64 rng(5);
  Tensor<double> f({16, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) f[i * 16 + i] = 1;
  for (auto mode : {MatchMode::Full, MatchMode::Optimized}) {
    const auto m = match_coarse(f, f, mode, 0.2, 10.0);
    REQUIRE(m.size() == 16);
    for (const auto& x : m) CHECK(x.i == x.j);
  }

  const auto fa = random_tensor<double>({8, 5, 6}, rng), fb = random_tensor<double>({8, 4, 6}, rng);
  op_counters().reset();
  const auto opt = match_coarse(fa, fb, MatchMode::Optimized, 0.2, 1.0);
  CHECK(op_counters().dual_softmax == 0);
  CHECK(op_counters().probability_matrices == 0);
  CHECK(op_counters().softmax == 0);
  CHECK(same_pairs(opt, brute_mnn(correlate(fa, fb, 1.0), -INFINITY)));

  const auto full = match_coarse(fa, fb, MatchMode::Full, 0.05, 1.0);
  CHECK(op_counters().dual_softmax == 1);
  CHECK(same_pairs(full, brute_mnn(dual_softmax(correlate(fa, fb, 1.0)), 0.05)));
  for (const auto& x : full) CHECK(x.confidence >= 0.05);
}

TEST_CASE("modes agree on discriminative features") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1), noise(0, 0.1);
  std::size_t agree = 0, total = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> fa({16, 4, 4}), fb({16, 4, 4});
    for (std::size_t k = 0; k < fa.size(); ++k) {
      fa[k] = n(rng);
      fb[k] = fa[k] + noise(rng);
    }
    const auto full = match_coarse(fa, fb, MatchMode::Full, 0.0, 1.0);
    const auto opt = match_coarse(fa, fb, MatchMode::Optimized, 0.0, 1.0);
    std::set<std::pair<std::size_t, std::size_t>> a;
    for (const auto& x : full) a.insert({x.i, x.j});
    for (const auto& x : opt) agree += a.count({x.i, x.j});
    total += std::max(full.size(), opt.size());
  }
  CHECK(double(agree) / double(total) >= 0.9);
}

TEST_CASE("dual softmax gradient") {
  std::mt19937_64 rng(7);
  const double err = sdm::testing::gradcheck({random_tensor<double>({4, 5}, rng, -2, 2)},
                                             [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                               return sdm::testing::project(t, ag::dual_softmax(v[0]));
                                             });
  CHECK(err < 1e-6);
}

TEST_CASE("mode names") {
  CHECK(parse_match_mode("full") == MatchMode::Full);
  CHECK(parse_match_mode("optimized") == MatchMode::Optimized);
  CHECK(std::string(to_string(MatchMode::Optimized)) == "optimized");
  CHECK_THROWS_AS(parse_match_mode("fast"), UsageError);
}
