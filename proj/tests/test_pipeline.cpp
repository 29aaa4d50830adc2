#include <doctest.h>

#include <filesystem>
#include <random>

#include "sdm/core/errors.hpp"
#include "sdm/pipeline/evaluate.hpp"
#include "sdm/train/synthetic.hpp"

using namespace sdm;

namespace {

std::vector<EvalPair> synthetic_pairs(std::size_t count, std::uint64_t seed, std::size_t size = 64) {
  std::mt19937_64 rng(seed);
  SynthOptions opt;
  opt.size = size;
  std::vector<EvalPair> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto p = make_synthetic_pair(rng, opt);
    out.push_back({"p" + std::to_string(i), p.a, p.b, p.h});
  }
  return out;
}

struct Fixture {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet<float> params = init_model<float>(cfg, 3, 2);
  Matcher<float> matcher{cfg, params};
};

}  // namespace

TEST_CASE("padding and valid cells") {
  const Tensor<float> img({1, 5, 7}, 1.f);
  const auto p = pad_image(img, 8);
  CHECK(p.shape() == Shape{1, 8, 8});
  CHECK(p.storage()[7] == 0.f);
  CHECK(p.storage()[6] == 1.f);
  CHECK(p.storage()[5 * 8] == 0.f);
  CHECK(pad_image(Tensor<float>({1, 16, 16}), 8).shape() == Shape{1, 16, 16});
  CHECK(valid_cells(8) == 1);
  CHECK(valid_cells(12) == 1);
  CHECK(valid_cells(13) == 2);
  CHECK(valid_cells(64) == 8);
}

TEST_CASE("matcher handles sizes that are not multiples of the stride") {
  Fixture f;
  std::mt19937_64 rng(1);
  const auto imgs = texture_images(2, 80, 9);
  Tensor<float> a({1, 50, 70}), b({1, 61, 45});
  for (std::size_t y = 0; y < 50; ++y)
    for (std::size_t x = 0; x < 70; ++x) a.storage()[y * 70 + x] = imgs[0].storage()[y * 80 + x];
  for (std::size_t y = 0; y < 61; ++y)
    for (std::size_t x = 0; x < 45; ++x) b.storage()[y * 45 + x] = imgs[1].storage()[y * 80 + x];
  MatchOptions opt;
  opt.tau = 0.0;
  const auto out = f.matcher.match(a, b, opt);
  CHECK(out.image_a.w == 70);
  CHECK(out.image_b.h == 61);
  CHECK(out.grid_a.w * 8 % (8 * f.cfg.transform.agg_range) == 0);
  CHECK_FALSE(out.coarse.empty());
  for (const auto& m : out.fine) {
    CHECK(m.xa >= 0);
    CHECK(m.xa < 70);
    CHECK(m.ya < 50);
    CHECK(m.xb >= 0);
    CHECK(m.xb <= 44);
    CHECK(m.yb >= 0);
    CHECK(m.yb <= 60);
    CHECK(m.confidence >= 0);
    CHECK(m.confidence <= 1);
  }
  CHECK_THROWS_AS(f.matcher.match(Tensor<float>({1, 4, 4}), b, opt), ShapeError);
}

TEST_CASE("matching is deterministic and stage toggles work") {
  Fixture f;
  const auto pairs = synthetic_pairs(1, 5);
  MatchOptions opt;
  opt.tau = 0.0;
  const auto a = f.matcher.match(pairs[0].a, pairs[0].b, opt);
  const auto b = f.matcher.match(pairs[0].a, pairs[0].b, opt);
  REQUIRE(a.fine.size() == b.fine.size());
  for (std::size_t i = 0; i < a.fine.size(); ++i) {
    CHECK(a.fine[i].xb == b.fine[i].xb);
    CHECK(a.fine[i].yb == b.fine[i].yb);
  }
  opt.second_stage = false;
  const auto s1 = f.matcher.match(pairs[0].a, pairs[0].b, opt);
  for (const auto& m : s1.fine) {
    CHECK(m.xb == std::floor(m.xb));
    CHECK(m.yb == std::floor(m.yb));
  }
}

TEST_CASE("stage times add up") {
  Fixture f;
  const auto pairs = synthetic_pairs(1, 6, 128);
  MatchOptions opt;
  const auto bench = bench_pipeline(f.matcher, pairs[0].a, pairs[0].b, opt, 5, 1);
  CHECK(bench.samples.size() == 5);
  for (const auto& t : bench.samples) {
    const double sum = t.backbone + t.transform + t.coarse + t.fine_fusion + t.refinement;
    CHECK(sum <= t.total * 1.0 + 1e-9);
    CHECK(sum >= 0.9 * t.total);
  }
  CHECK(bench.median.total > 0);
  CHECK(bench_pipeline(f.matcher, pairs[0].a, pairs[0].b, opt, 1, 0).samples.size() == 1);
  CHECK_THROWS_AS(bench_pipeline(f.matcher, pairs[0].a, pairs[0].b, opt, 0, 0), UsageError);
  const std::string text = format_bench_report(bench);
  CHECK(text.find("total") != std::string::npos);
}

TEST_CASE("homography evaluation report") {
  Fixture f;
  const auto pairs = synthetic_pairs(3, 7);
  MatchOptions opt;
  opt.tau = 0.0;
  const auto report = evaluate_homography(f.matcher, pairs, opt);
  CHECK(report.names.size() == 3);
  CHECK(report.corner_errors.size() == 3);
  REQUIRE(report.auc.size() == 3);
  CHECK(report.auc[0] <= report.auc[1]);
  CHECK(report.auc[1] <= report.auc[2]);
  for (double a : report.auc) {
    CHECK(a >= 0);
    CHECK(a <= 1);
  }
  const std::string text = format_eval_report(report);
  CHECK(text.find("# auc@3") != std::string::npos);
  CHECK(text.find("p2") != std::string::npos);
  CHECK_THROWS_AS(evaluate_homography(f.matcher, {}, opt), UsageError);
}

TEST_CASE("pair directory round trip") {
  const auto pairs = synthetic_pairs(2, 8);
  const auto dir = std::filesystem::temp_directory_path() / "sdm_test_pairs";
  std::filesystem::remove_all(dir);
  write_pair_dir(dir.string(), pairs);
  const auto back = load_pair_dir(dir.string());
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "p0");
  CHECK(back[1].h == pairs[1].h);
  CHECK(back[0].a.shape() == pairs[0].a.shape());
  for (std::size_t i = 0; i < pairs[0].a.size(); ++i)
    CHECK(std::abs(back[0].a.storage()[i] - pairs[0].a.storage()[i]) <= 0.5f / 255.f + 1e-6f);
  CHECK_THROWS_AS(load_pair_dir((dir / "nothing").string()), IoError);
}

TEST_CASE("toy metrics on exact warps") {
  Fixture f;
  const auto pairs = synthetic_pairs(2, 9);
  const auto m = evaluate_toy(f.matcher, pairs, MatchMode::Full);
  CHECK(m.coarse_within_one_cell <= m.coarse_matches);
  CHECK(m.fine_errors.size() == m.stage1_errors.size());
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 2, 3}) == 2.5);
}
