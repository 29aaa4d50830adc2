#pragma once

#include <array>
#include <string>
#include <vector>

#include "sdm/geometry/homography.hpp"
#include "sdm/pipeline/model.hpp"

namespace sdm {

struct EvalPair {
  std::string name;
  Tensor<float> a, b;
  Mat3 h;
};

/// Reads every `<name>_a.pgm`, `<name>_b.pgm`, `<name>_H.csv` triple in `dir`, sorted by name.
std::vector<EvalPair> load_pair_dir(const std::string& dir);
/// Writes pair_0000_a.pgm, pair_0000_b.pgm, pair_0000_H.csv, ...
void write_pair_dir(const std::string& dir, const std::vector<EvalPair>& pairs);

/// RANSAC on the (pt_A, pt_B) coordinates of fine matches.
RansacResult ransac_homography(const std::vector<FineMatch>& matches, const RansacOptions& opt);

struct EvalReport {
  std::vector<std::string> names;
  std::vector<double> corner_errors;  // +inf when no homography could be estimated
  std::vector<std::size_t> match_counts;
  std::vector<double> auc;            // at 3, 5, 10 px
  StageTimes mean_times;
  std::size_t failures = 0;
};

EvalReport evaluate_homography(const Matcher<float>& matcher, const std::vector<EvalPair>& pairs,
                               const MatchOptions& opt, const RansacOptions& ransac = {});
/// Per-pair CSV rows followed by a `#`-prefixed summary block.
std::string format_eval_report(const EvalReport& report);

struct BenchReport {
  std::vector<StageTimes> samples;
  StageTimes median, mean;
  std::size_t matches = 0;
};

BenchReport bench_pipeline(const Matcher<float>& matcher, const Tensor<float>& a, const Tensor<float>& b,
                           const MatchOptions& opt, std::size_t repetitions, std::size_t warmup);
std::string format_bench_report(const BenchReport& report);

struct ToyMetrics {
  std::size_t coarse_matches = 0, coarse_within_one_cell = 0;
  std::vector<double> fine_errors, stage1_errors;  // |pt_B - H(pt_A)| in pixels
  double coarse_fraction() const;
};

/// Coarse matches within one cell (Chebyshev) of the cell containing the
/// warped A cell center, and fine errors with and without the second stage.
ToyMetrics evaluate_toy(const Matcher<float>& matcher, const std::vector<EvalPair>& pairs, MatchMode mode);

double median(std::vector<double> v);

}  // namespace sdm
