#include "sdm/pipeline/model.hpp"

#include <chrono>
#include <cmath>

#include "sdm/model/attention.hpp"
#include "sdm/train/synthetic.hpp"

namespace sdm {

template <typename T>
ParamSet<T> init_model(const ModelConfig& cfg, std::uint64_t seed, std::size_t calibration_images,
                       std::size_t calibration_size) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet<T> params;
  init_backbone(params, cfg.backbone, rng);
  init_transform(params, cfg.transform, rng);
  init_fine(params, cfg.backbone.coarse_dim(), cfg.backbone.widths[2], cfg.backbone.widths[1], cfg.fine.d_fine, rng);
  if (calibration_images) {
    std::vector<Tensor<T>> imgs;
    for (auto& img : texture_images(calibration_images, calibration_size, seed ^ 0x5eedULL)) {
      imgs.push_back(img.template cast<T>());
    }
    calibrate_backbone(params, cfg.backbone, imgs);
  }
  return params;
}

template <typename T>
TrainForward<T> forward_train(Binder<T>& bind, Var<T> image_a, Var<T> image_b, const ModelConfig& cfg) {
  TrainForward<T> out;
  out.pyr_a = backbone_train(bind, image_a, cfg.backbone);
  out.pyr_b = backbone_train(bind, image_b, cfg.backbone);
  std::tie(out.coarse_a, out.coarse_b) = transform(bind, out.pyr_a.coarse, out.pyr_b.coarse, cfg.transform);
  out.fine_a = fuse_fine_features(bind, out.coarse_a, out.pyr_a.quarter, out.pyr_a.half);
  out.fine_b = fuse_fine_features(bind, out.coarse_b, out.pyr_b.quarter, out.pyr_b.half);
  return out;
}

template <typename T>
Var<T> coarse_scores(Var<T> coarse_a, Var<T> coarse_b, const ModelConfig& cfg) {
  const double k = cfg.coarse_inv_temperature / double(coarse_a.dim(0));
  return ag::scale(ag::matmul(ag::map_to_tokens(coarse_a), ag::map_to_tokens(coarse_b), false, true), T(k));
}

template <typename T>
Tensor<T> pad_image(const Tensor<T>& image, std::size_t multiple) {
  require_rank(image, 3, "pad_image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t hp = (h + multiple - 1) / multiple * multiple, wp = (w + multiple - 1) / multiple * multiple;
  if (hp == h && wp == w) return image;
  Tensor<T> out({c, hp, wp});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) std::copy_n(&image.at(ch, y, 0), w, &out.at(ch, y, 0));
  }
  return out;
}

std::size_t valid_cells(std::size_t extent) {
  const std::size_t half = kCoarseStride / 2;
  return extent <= half ? 0 : (extent - half - 1) / kCoarseStride + 1;
}

template <typename T>
Matcher<T>::Matcher(const ModelConfig& cfg, const ParamSet<T>& params)
    : cfg_(cfg), params_(params), backbone_(fuse_backbone(params, cfg.backbone)) {
  cfg_.validate();
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Tokens of the valid (unpadded) cells, with their flat indices in the padded grid.
template <typename T>
Tensor<T> valid_tokens(const Tensor<T>& map, std::size_t vh, std::size_t vw, std::vector<std::size_t>& index) {
  const std::size_t d = map.dim(0), gw = map.dim(2);
  Tensor<T> out({vh * vw, d});
  index.clear();
  for (std::size_t y = 0; y < vh; ++y) {
    for (std::size_t x = 0; x < vw; ++x) {
      const std::size_t t = index.size();
      index.push_back(y * gw + x);
      for (std::size_t c = 0; c < d; ++c) out[t * d + c] = map.at(c, y, x);
    }
  }
  return out;
}

}  // namespace

template <typename T>
MatchOutput Matcher<T>::match(const Tensor<T>& image_a, const Tensor<T>& image_b, const MatchOptions& opt) const {
  require_rank(image_a, 3, "match image A");
  require_rank(image_b, 3, "match image B");
  if (image_a.dim(0) != 1 || image_b.dim(0) != 1) throw ShapeError("match expects grayscale [1, H, W] images");
  MatchOutput out;
  out.image_a = {image_a.dim(2), image_a.dim(1)};
  out.image_b = {image_b.dim(2), image_b.dim(1)};
  if (out.image_a.w < kCoarseStride || out.image_a.h < kCoarseStride || out.image_b.w < kCoarseStride ||
      out.image_b.h < kCoarseStride) {
    throw ShapeError("images must be at least 8 x 8 pixels");
  }
  const auto t_total = Clock::now();

  auto t0 = Clock::now();
  const auto pa = backbone_deploy(backbone_, pad_image(image_a, cfg_.pad_multiple()));
  const auto pb = backbone_deploy(backbone_, pad_image(image_b, cfg_.pad_multiple()));
  out.times.backbone = since(t0);
  out.grid_a = {pa.coarse.dim(2), pa.coarse.dim(1)};
  out.grid_b = {pb.coarse.dim(2), pb.coarse.dim(1)};

  // One short-lived tape per block keeps inference memory at a single block's activations.
  t0 = Clock::now();
  Tensor<T> ca = pa.coarse, cb = pb.coarse;
  auto run_block = [&](const std::string& prefix, const Tensor<T>& tgt, const Tensor<T>& src, AttentionKind kind) {
    Tape<T> tape(false);
    Binder<T> bind(tape, params_);
    Var<T> t = tape.input(tgt);
    Var<T> s = kind == AttentionKind::Self ? t : tape.input(src);
    return agg_attention_block(bind, prefix, t, s, kind, cfg_.transform).value();
  };
  for (std::size_t layer = 0; layer < cfg_.transform.n_layers; ++layer) {
    const std::string ps = attention_prefix(layer, AttentionKind::Self);
    const std::string pc = attention_prefix(layer, AttentionKind::Cross);
    ca = run_block(ps, ca, ca, AttentionKind::Self);
    cb = run_block(ps, cb, cb, AttentionKind::Self);
    Tensor<T> ca2 = run_block(pc, ca, cb, AttentionKind::Cross);
    Tensor<T> cb2 = run_block(pc, cb, ca, AttentionKind::Cross);
    ca = std::move(ca2);
    cb = std::move(cb2);
  }
  out.times.transform = since(t0);

  t0 = Clock::now();
  std::vector<std::size_t> ia, ib;
  const Tensor<T> ta = valid_tokens(ca, valid_cells(out.image_a.h), valid_cells(out.image_a.w), ia);
  const Tensor<T> tb = valid_tokens(cb, valid_cells(out.image_b.h), valid_cells(out.image_b.w), ib);
  const T inv_temp = T(cfg_.coarse_inv_temperature / double(ca.dim(0)));
  out.coarse = match_coarse_tokens(ta, tb, opt.mode, opt.tau, inv_temp);
  for (auto& m : out.coarse) {
    m.i = ia[m.i];
    m.j = ib[m.j];
  }
  out.times.coarse = since(t0);

  t0 = Clock::now();
  Tensor<T> fa, fb;
  {
    Tape<T> tape(false);
    Binder<T> bind(tape, params_);
    fa = fuse_fine_features(bind, tape.input(ca), tape.input(pa.quarter), tape.input(pa.half)).value();
    fb = fuse_fine_features(bind, tape.input(cb), tape.input(pb.quarter), tape.input(pb.half)).value();
  }
  out.times.fine_fusion = since(t0);

  t0 = Clock::now();
  auto fine = refine(out.coarse, fa, fb, out.grid_a, out.grid_b, out.image_a, out.image_b, cfg_.fine,
                     opt.second_stage);
  for (const auto& m : fine) {
    const bool inside = m.xa >= 0 && m.ya >= 0 && m.xa <= double(out.image_a.w - 1) &&
                        m.ya <= double(out.image_a.h - 1) && m.xb >= 0 && m.yb >= 0 &&
                        m.xb <= double(out.image_b.w - 1) && m.yb <= double(out.image_b.h - 1);
    if (inside) out.fine.push_back(m);
  }
  out.times.refinement = since(t0);
  out.times.total = since(t_total);
  return out;
}

#define SDM_INSTANTIATE_MODEL(T)                                                                        \
  template ParamSet<T> init_model(const ModelConfig&, std::uint64_t, std::size_t, std::size_t);         \
  template TrainForward<T> forward_train(Binder<T>&, Var<T>, Var<T>, const ModelConfig&);               \
  template Var<T> coarse_scores(Var<T>, Var<T>, const ModelConfig&);                                    \
  template Tensor<T> pad_image(const Tensor<T>&, std::size_t);                                          \
  template class Matcher<T>;

SDM_INSTANTIATE_MODEL(float)
SDM_INSTANTIATE_MODEL(double)

}  // namespace sdm
