#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdm/geometry/homography.hpp"
#include "sdm/io/image.hpp"
#include "sdm/match/coarse.hpp"
#include "sdm/model/params.hpp"
#include "sdm/pipeline/config.hpp"
#include "sdm/pipeline/model.hpp"
#include "sdm/train/trainer.hpp"

namespace sdm {

std::string read_file(const std::string& path);
/// Writes to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& content);

std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

struct WeightFile {
  ModelConfig config;
  ParamSet<float> params;
  std::uint64_t hash = 0;  // FNV-1a of the whole file
};

/// Text manifest ("sdm-weights 1", config lines, one line per tensor with
/// name, dtype, shape, byte offset and length, "end") followed by the raw
/// little-endian float32 payload.
std::string encode_weights(const ModelConfig& cfg, const ParamSet<float>& params);
/// Validates every tensor name and shape against the configured model before
/// returning; throws FormatError on any mismatch.
WeightFile decode_weights(const std::string& bytes);
void save_weights(const std::string& path, const ModelConfig& cfg, const ParamSet<float>& params);
WeightFile load_weights(const std::string& path);

constexpr int kMatchSchemaVersion = 1;

struct MatchDump {
  GridDims image_a, image_b;
  std::string mode;
  std::string model_hash;
  std::vector<FineMatch> matches;
};

std::string encode_match_dump(const MatchDump& dump);
MatchDump decode_match_dump(const std::string& text);

std::string encode_loss_curve(const std::vector<LossRecord>& curve);

/// Three comma-separated rows.
std::string encode_homography(const Mat3& h);
Mat3 decode_homography(const std::string& text);

/// Side-by-side A | B with one line per match, colored from red (lowest
/// confidence relative to the strongest match) to green.
RgbImage render_matches(const Tensor<float>& image_a, const Tensor<float>& image_b,
                        const std::vector<FineMatch>& matches);

}  // namespace sdm
