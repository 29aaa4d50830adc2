#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "sdm/core/errors.hpp"
#include "sdm/io/files.hpp"
#include "sdm/pipeline/evaluate.hpp"
#include "sdm/train/trainer.hpp"

namespace {

using namespace sdm;

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

struct MatchArgs {
  std::string image_a, image_b, weights, mode = "full", out = "matches.csv", viz;
  double tau = -1;
  bool stage1_only = false;
};

MatchOptions match_options(const std::string& mode, double tau, const ModelConfig& cfg) {
  MatchOptions opt;
  opt.mode = parse_match_mode(mode);
  opt.tau = tau >= 0 ? tau : cfg.tau;
  return opt;
}

int run_match(const MatchArgs& a) {
  const WeightFile wf = load_weights(a.weights);
  const Tensor<float> img_a = load_image(a.image_a), img_b = load_image(a.image_b);
  MatchOptions opt = match_options(a.mode, a.tau, wf.config);
  opt.second_stage = !a.stage1_only;
  const Matcher<float> matcher(wf.config, wf.params);
  const MatchOutput out = matcher.match(img_a, img_b, opt);
  MatchDump dump{out.image_a, out.image_b, to_string(opt.mode), hex64(wf.hash), out.fine};
  write_file_atomic(a.out, encode_match_dump(dump));
  if (!a.viz.empty()) write_file_atomic(a.viz, encode_ppm(render_matches(img_a, img_b, out.fine)));
  std::printf("%zu coarse matches, %zu fine matches -> %s (%.1f ms)\n", out.coarse.size(), out.fine.size(),
              a.out.c_str(), out.times.total * 1e3);
  return kOk;
}

int run_synth(std::size_t count, std::size_t size, std::uint64_t seed, const std::string& dir) {
  SynthOptions opt;
  opt.size = size;
  std::mt19937_64 rng(seed);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw IoError("cannot create directory '" + dir + "'");
  for (std::size_t k = 0; k < count; ++k) {
    SyntheticPair p = make_synthetic_pair(rng, opt);
    char name[32];
    std::snprintf(name, sizeof name, "pair_%04zu", k);
    write_pair_dir(dir, {{name, std::move(p.a), std::move(p.b), p.h}});
  }
  std::printf("wrote %zu pairs to %s\n", count, dir.c_str());
  return kOk;
}

struct TrainArgs {
  std::string data, config, out, curve;
  long steps = -1;
  long seed = -1;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
  if (a.steps >= 0) cfg.train.steps = std::size_t(a.steps);
  if (a.seed >= 0) cfg.train.seed = std::uint64_t(a.seed);
  std::vector<SyntheticPair> data;
  for (auto& p : load_pair_dir(a.data)) data.push_back({std::move(p.a), std::move(p.b), p.h});
  if (data.empty()) throw UsageError("no training pairs found in '" + a.data + "'");
  const auto result = train_toy<float>(cfg, data, [&](const LossRecord& r) {
    if (!a.quiet && (r.step % 100 == 0 || r.step + 1 == cfg.train.steps)) {
      std::fprintf(stderr, "step %zu  l_c %.4f  l_f1 %.4f  l_f2 %.4f  total %.4f\n", r.step, r.l_c, r.l_f1, r.l_f2,
                   r.total);
    }
  });
  save_weights(a.out, cfg.model, result.params);
  const std::string curve = a.curve.empty() ? a.out + ".loss.csv" : a.curve;
  write_file_atomic(curve, encode_loss_curve(result.curve));
  std::printf("trained %zu steps (%zu pairs skipped) -> %s, loss curve %s\n", result.curve.size(), result.skipped,
              a.out.c_str(), curve.c_str());
  return kOk;
}

struct EvalArgs {
  std::string data, weights, mode = "full", out;
  double tau = -1, threshold = 3.0;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  const WeightFile wf = load_weights(a.weights);
  const auto pairs = load_pair_dir(a.data);
  const Matcher<float> matcher(wf.config, wf.params);
  RansacOptions ransac;
  ransac.threshold_px = a.threshold;
  ransac.seed = a.seed;
  const EvalReport report = evaluate_homography(matcher, pairs, match_options(a.mode, a.tau, wf.config), ransac);
  const std::string text = format_eval_report(report);
  if (!a.out.empty()) write_file_atomic(a.out, text);
  std::fputs(text.c_str(), stdout);
  return kOk;
}

struct BenchArgs {
  std::string image_a, image_b, weights, mode = "full";
  double tau = -1;
  std::size_t repetitions = 10, warmup = 2;
};

int run_bench(const BenchArgs& a) {
  const WeightFile wf = load_weights(a.weights);
  const Tensor<float> img_a = load_image(a.image_a), img_b = load_image(a.image_b);
  const Matcher<float> matcher(wf.config, wf.params);
  const BenchReport r =
      bench_pipeline(matcher, img_a, img_b, match_options(a.mode, a.tau, wf.config), a.repetitions, a.warmup);
  std::fputs(format_bench_report(r).c_str(), stdout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-dense image matching with aggregated attention"};
  app.require_subcommand(1);

  MatchArgs ma;
  auto* match = app.add_subcommand("match", "Match two images");
  match->add_option("--image-a", ma.image_a, "First image (PGM/PPM)")->required();
  match->add_option("--image-b", ma.image_b, "Second image (PGM/PPM)")->required();
  match->add_option("--weights", ma.weights, "Weight file")->required();
  match->add_option("--mode", ma.mode, "full or optimized")->check(CLI::IsMember({"full", "optimized"}));
  match->add_option("--tau", ma.tau, "Coarse confidence threshold (full mode; default from weights)");
  match->add_option("--out", ma.out, "Match CSV");
  match->add_option("--viz", ma.viz, "Side-by-side visualization (PPM)");
  match->add_flag("--stage1-only", ma.stage1_only, "Skip the sub-pixel stage");

  std::size_t count = 0, size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate synthetic homography pairs");
  synth->add_option("--count", count, "Number of pairs")->required();
  synth->add_option("--size", size, "Image side in pixels")->check(CLI::Range(std::size_t(8), std::size_t(4096)));
  synth->add_option("--seed", synth_seed, "Random seed");
  synth->add_option("--out", synth_out, "Output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train-toy", "Train a model on synthetic pairs");
  train->add_option("--data", ta.data, "Directory written by synth")->required();
  train->add_option("--config", ta.config, "key = value configuration file");
  train->add_option("--out", ta.out, "Output weight file")->required();
  train->add_option("--steps", ta.steps, "Training steps (overrides the config)");
  train->add_option("--seed", ta.seed, "Seed (overrides the config)");
  train->add_option("--curve", ta.curve, "Loss curve CSV (default <out>.loss.csv)");
  train->add_flag("--quiet", ta.quiet, "No progress output");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval-homography", "Homography estimation accuracy on a pair directory");
  eval->add_option("--data", ea.data, "Directory written by synth")->required();
  eval->add_option("--weights", ea.weights, "Weight file")->required();
  eval->add_option("--mode", ea.mode, "full or optimized")->check(CLI::IsMember({"full", "optimized"}));
  eval->add_option("--tau", ea.tau, "Coarse confidence threshold");
  eval->add_option("--threshold", ea.threshold, "RANSAC inlier threshold in pixels");
  eval->add_option("--seed", ea.seed, "RANSAC seed");
  eval->add_option("--out", ea.out, "Also write the report here");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Per-stage timing on one image pair");
  bench->add_option("--image-a", ba.image_a, "First image")->required();
  bench->add_option("--image-b", ba.image_b, "Second image")->required();
  bench->add_option("--weights", ba.weights, "Weight file")->required();
  bench->add_option("--mode", ba.mode, "full or optimized")->check(CLI::IsMember({"full", "optimized"}));
  bench->add_option("--tau", ba.tau, "Coarse confidence threshold");
  bench->add_option("--repetitions", ba.repetitions, "Timed runs")->check(CLI::PositiveNumber);
  bench->add_option("--warmup", ba.warmup, "Untimed runs before timing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*match) return run_match(ma);
    if (*synth) return run_synth(count, size, synth_seed, synth_out);
    if (*train) return run_train(ta);
    if (*eval) return run_eval(ea);
    if (*bench) return run_bench(ba);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DegenerateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}
