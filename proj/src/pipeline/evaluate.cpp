#include "sdm/pipeline/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "sdm/core/errors.hpp"
#include "sdm/io/files.hpp"

namespace sdm {

namespace fs = std::filesystem;

std::vector<EvalPair> load_pair_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string f = entry.path().filename().string();
    const std::string suffix = "_H.csv";
    if (f.size() > suffix.size() && f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0) {
      names.push_back(f.substr(0, f.size() - suffix.size()));
    }
  }
  std::sort(names.begin(), names.end());
  std::vector<EvalPair> out;
  for (const auto& n : names) {
    const fs::path base = fs::path(dir) / n;
    out.push_back({n, load_image(base.string() + "_a.pgm"), load_image(base.string() + "_b.pgm"),
                   decode_homography(read_file(base.string() + "_H.csv"))});
  }
  return out;
}

void write_pair_dir(const std::string& dir, const std::vector<EvalPair>& pairs) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create directory '" + dir + "'");
  for (const auto& p : pairs) {
    const std::string base = (fs::path(dir) / p.name).string();
    save_pgm(base + "_a.pgm", p.a);
    save_pgm(base + "_b.pgm", p.b);
    write_file_atomic(base + "_H.csv", encode_homography(p.h));
  }
}

RansacResult ransac_homography(const std::vector<FineMatch>& matches, const RansacOptions& opt) {
  std::vector<Vec2> src, dst;
  for (const auto& m : matches) {
    src.emplace_back(m.xa, m.ya);
    dst.emplace_back(m.xb, m.yb);
  }
  return ransac_homography(src, dst, opt);
}

namespace {

void accumulate(StageTimes& acc, const StageTimes& t, double w) {
  acc.backbone += w * t.backbone;
  acc.transform += w * t.transform;
  acc.coarse += w * t.coarse;
  acc.fine_fusion += w * t.fine_fusion;
  acc.refinement += w * t.refinement;
  acc.total += w * t.total;
}

std::string ms(double seconds) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", seconds * 1e3);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string stage_rows(const std::string& prefix, const StageTimes& t) {
  return prefix + "backbone_ms," + ms(t.backbone) + "\n" + prefix + "transform_ms," + ms(t.transform) + "\n" +
         prefix + "coarse_match_ms," + ms(t.coarse) + "\n" + prefix + "fine_fusion_ms," + ms(t.fine_fusion) + "\n" +
         prefix + "refinement_ms," + ms(t.refinement) + "\n" + prefix + "total_ms," + ms(t.total) + "\n";
}

}  // namespace

EvalReport evaluate_homography(const Matcher<float>& matcher, const std::vector<EvalPair>& pairs,
                               const MatchOptions& opt, const RansacOptions& ransac) {
  if (pairs.empty()) throw UsageError("evaluation needs at least one pair");
  EvalReport r;
  for (const auto& p : pairs) {
    const MatchOutput out = matcher.match(p.a, p.b, opt);
    accumulate(r.mean_times, out.times, 1.0 / double(pairs.size()));
    double err = std::numeric_limits<double>::infinity();
    try {
      if (out.fine.size() >= 4) {
        const auto est = ransac_homography(out.fine, ransac);
        err = corner_error(est.h, p.h, double(p.a.dim(2)), double(p.a.dim(1)));
      }
    } catch (const DegenerateError&) {
    }
    if (!std::isfinite(err)) ++r.failures;
    r.names.push_back(p.name);
    r.corner_errors.push_back(err);
    r.match_counts.push_back(out.fine.size());
  }
  r.auc = corner_auc(r.corner_errors);
  return r;
}

std::string format_eval_report(const EvalReport& r) {
  std::string s = "pair,matches,corner_error_px\n";
  for (std::size_t k = 0; k < r.names.size(); ++k) {
    s += r.names[k] + "," + std::to_string(r.match_counts[k]) + "," +
         (std::isfinite(r.corner_errors[k]) ? fixed(r.corner_errors[k]) : std::string("inf")) + "\n";
  }
  s += "# pairs," + std::to_string(r.names.size()) + "\n# failures," + std::to_string(r.failures) + "\n";
  s += "# auc@3," + fixed(r.auc[0]) + "\n# auc@5," + fixed(r.auc[1]) + "\n# auc@10," + fixed(r.auc[2]) + "\n";
  s += stage_rows("# mean_", r.mean_times);
  return s;
}

double median(std::vector<double> v) {
  if (v.empty()) throw DegenerateError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

BenchReport bench_pipeline(const Matcher<float>& matcher, const Tensor<float>& a, const Tensor<float>& b,
                           const MatchOptions& opt, std::size_t repetitions, std::size_t warmup) {
  if (repetitions == 0) throw UsageError("repetitions must be at least 1");
  for (std::size_t k = 0; k < warmup; ++k) matcher.match(a, b, opt);
  BenchReport r;
  for (std::size_t k = 0; k < repetitions; ++k) {
    const MatchOutput out = matcher.match(a, b, opt);
    r.samples.push_back(out.times);
    r.matches = out.fine.size();
    accumulate(r.mean, out.times, 1.0 / double(repetitions));
  }
  auto med = [&](double StageTimes::*field) {
    std::vector<double> v;
    for (const auto& t : r.samples) v.push_back(t.*field);
    return median(v);
  };
  r.median = {med(&StageTimes::backbone),    med(&StageTimes::transform),  med(&StageTimes::coarse),
              med(&StageTimes::fine_fusion), med(&StageTimes::refinement), med(&StageTimes::total)};
  return r;
}

std::string format_bench_report(const BenchReport& r) {
  std::string s = "stage,median_ms,mean_ms\n";
  auto row = [&](const char* name, double StageTimes::*field) {
    s += std::string(name) + "," + ms(r.median.*field) + "," + ms(r.mean.*field) + "\n";
  };
  row("backbone", &StageTimes::backbone);
  row("transform", &StageTimes::transform);
  row("coarse_match", &StageTimes::coarse);
  row("fine_fusion", &StageTimes::fine_fusion);
  row("refinement", &StageTimes::refinement);
  row("total", &StageTimes::total);
  s += "# repetitions," + std::to_string(r.samples.size()) + "\n# matches," + std::to_string(r.matches) + "\n";
  return s;
}

double ToyMetrics::coarse_fraction() const {
  return coarse_matches ? double(coarse_within_one_cell) / double(coarse_matches) : 0.0;
}

ToyMetrics evaluate_toy(const Matcher<float>& matcher, const std::vector<EvalPair>& pairs, MatchMode mode) {
  ToyMetrics m;
  const double s = double(kCoarseStride), half = s / 2;
  auto fine_errors = [](const MatchOutput& out, const Mat3& h, std::vector<double>& dst) {
    for (const auto& f : out.fine) {
      if (const auto q = apply_homography(h, Vec2{f.xa, f.ya})) dst.push_back((*q - Vec2{f.xb, f.yb}).norm());
    }
  };
  for (const auto& p : pairs) {
    MatchOptions opt;
    opt.mode = mode;
    opt.tau = matcher.config().tau;
    const MatchOutput out = matcher.match(p.a, p.b, opt);
    for (const auto& c : out.coarse) {
      ++m.coarse_matches;
      const auto q = apply_homography(p.h, Vec2{double(c.i % out.grid_a.w) * s + half, double(c.i / out.grid_a.w) * s + half});
      if (!q) continue;
      const double gx = std::floor(q->x() / s), gy = std::floor(q->y() / s);
      const double jx = double(c.j % out.grid_b.w), jy = double(c.j / out.grid_b.w);
      if (std::abs(gx - jx) <= 1 && std::abs(gy - jy) <= 1) ++m.coarse_within_one_cell;
    }
    fine_errors(out, p.h, m.fine_errors);
    opt.second_stage = false;
    fine_errors(matcher.match(p.a, p.b, opt), p.h, m.stage1_errors);
  }
  return m;
}

}  // namespace sdm
