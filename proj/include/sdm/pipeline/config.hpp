#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sdm/match/refine.hpp"
#include "sdm/model/attention.hpp"
#include "sdm/model/backbone.hpp"

namespace sdm {

struct ModelConfig {
  BackboneConfig backbone;
  TransformConfig transform;  // transform.d_model follows the last backbone width
  FineConfig fine;
  double coarse_inv_temperature = 10;
  double tau = 0.2;

  /// Full-size model: widths [64, 64, 128, 256], N = 4, s = 4, d_fine 64.
  static ModelConfig standard();
  /// Desk-scale model: widths [8, 8, 16, 32], N = 2, s = 4, d_fine 16.
  static ModelConfig toy();

  void validate() const;
  /// Images are padded to a multiple of this (8 * s) before the backbone.
  std::size_t pad_multiple() const { return kCoarseStride * transform.agg_range; }
};

struct TrainConfig {
  double alpha = 1.0;
  double beta = 0.25;
  double lr = 4e-3;
  double weight_decay = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 2000;
  std::size_t max_fine_matches = 64;  // GT pairs supervised by the fine losses per step
  std::uint64_t seed = 0;
  std::size_t calibration_images = 8;

  void validate() const;
};

struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;
};

/// Flat `key = value` text; `#` starts a comment. A `preset = toy|standard`
/// line, wherever it appears, is applied before the other keys.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

/// Model keys only, in a fixed order (stored in weight files).
std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& cfg);
ModelConfig model_config_from_entries(const std::vector<std::pair<std::string, std::string>>& entries);

std::string format_config(const RunConfig& cfg);

}  // namespace sdm
