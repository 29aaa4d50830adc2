#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "sdm/core/autodiff.hpp"
#include "sdm/model/params.hpp"

namespace sdm {

struct BackboneConfig {
  std::vector<std::size_t> widths{64, 64, 128, 256};
  std::vector<std::size_t> blocks{1, 2, 4, 14};
  std::vector<std::size_t> strides{1, 2, 2, 2};

  void validate() const;
  std::size_t coarse_dim() const { return widths.back(); }
  /// Stage widths multiplied by `factor`, each at least 4 and a multiple of 4.
  BackboneConfig scaled(double factor) const;
};

constexpr double kBatchNormEps = 1e-5;

/// Parameter-name prefix of block `b` in stage `s`.
std::string block_prefix(std::size_t stage, std::size_t block);

/// Layout of one block, derived from the config.
struct BlockSpec {
  std::size_t stage, index, in_c, out_c, stride;
  bool identity;
};
std::vector<BlockSpec> block_specs(const BackboneConfig& cfg);

template <typename T>
void init_backbone(ParamSet<T>& params, const BackboneConfig& cfg, std::mt19937_64& rng);

template <typename T>
struct Pyramid {
  Var<T> half;     // stride 2
  Var<T> quarter;  // stride 4
  Var<T> coarse;   // stride 8
};

/// Multi-branch forward. `image` is [1, H, W] with H, W divisible by 8.
template <typename T>
Pyramid<T> backbone_train(Binder<T>& bind, Var<T> image, const BackboneConfig& cfg);

/// One multi-branch block on the tape (pre-activation sum of branches followed by ReLU).
template <typename T>
Var<T> repvgg_block(Binder<T>& bind, Var<T> x, const BlockSpec& spec);

/// Sets each branch's stored normalisation statistics to the channel mean and
/// variance it produces on `images`, block by block, so activations start
/// near unit scale.
template <typename T>
void calibrate_backbone(ParamSet<T>& params, const BackboneConfig& cfg, const std::vector<Tensor<T>>& images);

template <typename T>
struct FusedBlock {
  Tensor<T> kernel;  // [out, in, 3, 3]
  Tensor<T> bias;    // [out]
  std::size_t stride = 1;
};

/// Folds normalisation into each branch and sums the branches into one 3x3 conv.
template <typename T>
FusedBlock<T> fuse_block(const ParamSet<T>& params, const BlockSpec& spec);

template <typename T>
struct DeployBackbone {
  BackboneConfig config;
  std::vector<std::vector<FusedBlock<T>>> stages;
};

template <typename T>
DeployBackbone<T> fuse_backbone(const ParamSet<T>& params, const BackboneConfig& cfg);

template <typename T>
struct PyramidTensors {
  Tensor<T> half, quarter, coarse;
};

/// Single-branch forward: exactly one convolution per block.
template <typename T>
PyramidTensors<T> backbone_deploy(const DeployBackbone<T>& net, const Tensor<T>& image);

}  // namespace sdm
