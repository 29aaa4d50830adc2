#include "sdm/model/backbone.hpp"

#include <cmath>

#include "sdm/core/kernels.hpp"

namespace sdm {

void BackboneConfig::validate() const {
  if (widths.size() != 4 || blocks.size() != 4 || strides.size() != 4) {
    throw UsageError("backbone needs exactly four stages");
  }
  std::size_t total = 1;
  for (std::size_t s = 0; s < 4; ++s) {
    if (widths[s] == 0 || blocks[s] == 0) throw UsageError("backbone stage widths and block counts must be positive");
    if (strides[s] != 1 && strides[s] != 2) throw UsageError("backbone strides must be 1 or 2");
    total *= strides[s];
  }
  if (total != 8) throw UsageError("backbone strides must multiply to 8");
  if (strides[0] * strides[1] != 2 || strides[0] * strides[1] * strides[2] != 4) {
    throw UsageError("backbone stages 1, 2, 3 must end at strides 2, 4, 8");
  }
}

BackboneConfig BackboneConfig::scaled(double factor) const {
  BackboneConfig out = *this;
  for (auto& w : out.widths) {
    const auto v = std::size_t(std::lround(double(w) * factor / 4.0)) * 4;
    w = std::max<std::size_t>(4, v);
  }
  return out;
}

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "backbone.stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

std::vector<BlockSpec> block_specs(const BackboneConfig& cfg) {
  cfg.validate();
  std::vector<BlockSpec> out;
  std::size_t in_c = 1;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      const std::size_t stride = b == 0 ? cfg.strides[s] : 1;
      out.push_back({s, b, in_c, cfg.widths[s], stride, in_c == cfg.widths[s] && stride == 1});
      in_c = cfg.widths[s];
    }
  }
  return out;
}

namespace {

const char* kStats[] = {"bn_mean", "bn_var", "bn_scale", "bn_shift"};

template <typename T>
void add_bn(ParamSet<T>& params, const std::string& branch, std::size_t c) {
  params.add(branch + ".bn_mean", Tensor<T>({c}), false);
  params.add(branch + ".bn_var", Tensor<T>({c}, T(1)), false);
  params.add(branch + ".bn_scale", Tensor<T>({c}, T(1)));
  params.add(branch + ".bn_shift", Tensor<T>({c}));
}

template <typename T>
Var<T> bn(Binder<T>& bind, Var<T> x, const std::string& branch) {
  return ag::batch_norm(x, bind(branch + ".bn_mean"), bind(branch + ".bn_var"), bind(branch + ".bn_scale"),
                        bind(branch + ".bn_shift"), T(kBatchNormEps));
}

template <typename T>
Var<T> conv_branch(Binder<T>& bind, Var<T> x, const std::string& branch, std::size_t stride, std::size_t pad) {
  return ag::add_channel_bias(ag::conv2d(x, bind(branch + ".kernel"), stride, pad), bind(branch + ".bias"));
}

template <typename T>
std::vector<Var<T>> branch_outputs(Binder<T>& bind, Var<T> x, const BlockSpec& spec) {
  const std::string p = block_prefix(spec.stage, spec.index);
  std::vector<Var<T>> out;
  out.push_back(conv_branch(bind, x, p + ".conv3x3", spec.stride, 1));
  out.push_back(conv_branch(bind, x, p + ".conv1x1", spec.stride, 0));
  if (spec.identity) out.push_back(x);
  return out;
}

const char* branch_name(std::size_t k) {
  static const char* names[] = {"conv3x3", "conv1x1", "identity"};
  return names[k];
}

}  // namespace

template <typename T>
void init_backbone(ParamSet<T>& params, const BackboneConfig& cfg, std::mt19937_64& rng) {
  for (const auto& spec : block_specs(cfg)) {
    const std::string p = block_prefix(spec.stage, spec.index);
    params.add(p + ".conv3x3.kernel", he_normal<T>({spec.out_c, spec.in_c, 3, 3}, spec.in_c * 9, rng));
    params.add(p + ".conv3x3.bias", Tensor<T>({spec.out_c}));
    add_bn(params, p + ".conv3x3", spec.out_c);
    params.add(p + ".conv1x1.kernel", he_normal<T>({spec.out_c, spec.in_c, 1, 1}, spec.in_c, rng));
    params.add(p + ".conv1x1.bias", Tensor<T>({spec.out_c}));
    add_bn(params, p + ".conv1x1", spec.out_c);
    if (spec.identity) add_bn(params, p + ".identity", spec.out_c);
  }
}

template <typename T>
Var<T> repvgg_block(Binder<T>& bind, Var<T> x, const BlockSpec& spec) {
  const std::string p = block_prefix(spec.stage, spec.index);
  auto branches = branch_outputs(bind, x, spec);
  Var<T> sum = bn(bind, branches[0], p + ".conv3x3");
  sum = ag::add(sum, bn(bind, branches[1], p + ".conv1x1"));
  if (spec.identity) sum = ag::add(sum, bn(bind, branches[2], p + ".identity"));
  return ag::relu(sum);
}

template <typename T>
Pyramid<T> backbone_train(Binder<T>& bind, Var<T> image, const BackboneConfig& cfg) {
  if (image.value().rank() != 3 || image.dim(0) != 1) throw ShapeError("backbone expects a [1, H, W] image");
  if (image.dim(1) % 8 || image.dim(2) % 8) throw ShapeError("backbone input dims must be divisible by 8");
  Pyramid<T> out;
  Var<T> x = image;
  const auto specs = block_specs(cfg);
  for (std::size_t k = 0; k < specs.size(); ++k) {
    x = repvgg_block(bind, x, specs[k]);
    const bool stage_end = k + 1 == specs.size() || specs[k + 1].stage != specs[k].stage;
    if (!stage_end) continue;
    if (specs[k].stage == 1) out.half = x;
    if (specs[k].stage == 2) out.quarter = x;
    if (specs[k].stage == 3) out.coarse = x;
  }
  return out;
}

template <typename T>
void calibrate_backbone(ParamSet<T>& params, const BackboneConfig& cfg, const std::vector<Tensor<T>>& images) {
  if (images.empty()) return;
  std::vector<Tensor<T>> acts = images;
  for (const auto& spec : block_specs(cfg)) {
    const std::string p = block_prefix(spec.stage, spec.index);
    const std::size_t nb = spec.identity ? 3 : 2;
    std::vector<std::vector<double>> sum(nb, std::vector<double>(spec.out_c)), sq = sum;
    std::size_t count = 0;
    for (const auto& a : acts) {
      Tape<T> tape(false);
      Binder<T> bind(tape, params);
      auto outs = branch_outputs(bind, tape.input(a), spec);
      const std::size_t plane = outs[0].dim(1) * outs[0].dim(2);
      count += plane;
      for (std::size_t k = 0; k < nb; ++k) {
        const auto& v = outs[k].value();
        for (std::size_t c = 0; c < spec.out_c; ++c) {
          for (std::size_t i = 0; i < plane; ++i) {
            const double e = v[c * plane + i];
            sum[k][c] += e;
            sq[k][c] += e * e;
          }
        }
      }
    }
    for (std::size_t k = 0; k < nb; ++k) {
      const std::string br = p + "." + branch_name(k);
      auto& mean = params.get(br + ".bn_mean");
      auto& var = params.get(br + ".bn_var");
      for (std::size_t c = 0; c < spec.out_c; ++c) {
        const double m = sum[k][c] / double(count);
        mean[c] = T(m);
        var[c] = T(std::max(sq[k][c] / double(count) - m * m, 1e-4));
      }
    }
    for (auto& a : acts) {
      Tape<T> tape(false);
      Binder<T> bind(tape, params);
      a = repvgg_block(bind, tape.input(a), spec).value();
    }
  }
}

template <typename T>
FusedBlock<T> fuse_block(const ParamSet<T>& params, const BlockSpec& spec) {
  const std::string p = block_prefix(spec.stage, spec.index);
  const std::size_t O = spec.out_c, C = spec.in_c;
  FusedBlock<T> out{Tensor<T>({O, C, 3, 3}), Tensor<T>({O}), spec.stride};
  auto fold = [&](const std::string& br, std::size_t c, double& a, double& shift) {
    for (const char* s : kStats) {
      if (!params.contains(br + "." + s)) throw ShapeError("missing normalisation statistic " + br + "." + s);
    }
    const double var = params.get(br + ".bn_var")[c];
    if (!(var + kBatchNormEps > 0)) throw NumericError("nonpositive variance in " + br);
    a = double(params.get(br + ".bn_scale")[c]) / std::sqrt(var + kBatchNormEps);
    shift = double(params.get(br + ".bn_shift")[c]) - double(params.get(br + ".bn_mean")[c]) * a;
  };
  const auto& k3 = params.get(p + ".conv3x3.kernel");
  const auto& b3 = params.get(p + ".conv3x3.bias");
  const auto& k1 = params.get(p + ".conv1x1.kernel");
  const auto& b1 = params.get(p + ".conv1x1.bias");
  for (std::size_t o = 0; o < O; ++o) {
    double a3, s3, a1, s1;
    fold(p + ".conv3x3", o, a3, s3);
    fold(p + ".conv1x1", o, a1, s1);
    double bias = a3 * double(b3[o]) + s3 + a1 * double(b1[o]) + s1;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t u = 0; u < 3; ++u) {
        for (std::size_t v = 0; v < 3; ++v) out.kernel.at(o, c, u, v) = T(a3 * double(k3.at(o, c, u, v)));
      }
      out.kernel.at(o, c, 1, 1) += T(a1 * double(k1.at(o, c, 0, 0)));
    }
    if (spec.identity) {
      double ai, si;
      fold(p + ".identity", o, ai, si);
      out.kernel.at(o, o, 1, 1) += T(ai);
      bias += si;
    }
    out.bias[o] = T(bias);
  }
  return out;
}

template <typename T>
DeployBackbone<T> fuse_backbone(const ParamSet<T>& params, const BackboneConfig& cfg) {
  DeployBackbone<T> net{cfg, std::vector<std::vector<FusedBlock<T>>>(4)};
  for (const auto& spec : block_specs(cfg)) net.stages[spec.stage].push_back(fuse_block(params, spec));
  return net;
}

template <typename T>
PyramidTensors<T> backbone_deploy(const DeployBackbone<T>& net, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 1) throw ShapeError("backbone expects a [1, H, W] image");
  if (image.dim(1) % 8 || image.dim(2) % 8) throw ShapeError("backbone input dims must be divisible by 8");
  PyramidTensors<T> out;
  Tensor<T> x = image;
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    for (const auto& blk : net.stages[s]) {
      if (blk.kernel.dim(1) != x.dim(0)) throw ShapeError("deploy backbone does not match its input channels");
      x = kernels::conv2d(x, blk.kernel, blk.stride, 1);
      const std::size_t plane = x.dim(1) * x.dim(2);
      for (std::size_t c = 0; c < x.dim(0); ++c) {
        T* p = x.ptr() + c * plane;
        const T b = blk.bias[c];
        for (std::size_t i = 0; i < plane; ++i) p[i] = std::max(p[i] + b, T(0));
      }
    }
    if (s == 1) out.half = x;
    if (s == 2) out.quarter = x;
    if (s == 3) out.coarse = x;
  }
  return out;
}

#define SDM_INSTANTIATE_BACKBONE(T)                                                                    \
  template void init_backbone(ParamSet<T>&, const BackboneConfig&, std::mt19937_64&);                  \
  template Pyramid<T> backbone_train(Binder<T>&, Var<T>, const BackboneConfig&);                       \
  template Var<T> repvgg_block(Binder<T>&, Var<T>, const BlockSpec&);                                  \
  template void calibrate_backbone(ParamSet<T>&, const BackboneConfig&, const std::vector<Tensor<T>>&); \
  template FusedBlock<T> fuse_block(const ParamSet<T>&, const BlockSpec&);                             \
  template DeployBackbone<T> fuse_backbone(const ParamSet<T>&, const BackboneConfig&);                 \
  template PyramidTensors<T> backbone_deploy(const DeployBackbone<T>&, const Tensor<T>&);

SDM_INSTANTIATE_BACKBONE(float)
SDM_INSTANTIATE_BACKBONE(double)

}  // namespace sdm
