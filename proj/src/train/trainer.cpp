#include "sdm/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sdm/core/errors.hpp"
#include "sdm/match/coarse.hpp"
#include "sdm/pipeline/model.hpp"

namespace sdm {

namespace {

bool decays(const std::string& name) {
  auto ends = [&](const std::string& s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends(".kernel") || ends(".weight");
}

std::vector<std::size_t> strided_subset(std::size_t n, std::size_t k) {
  std::vector<std::size_t> out;
  if (n <= k) {
    out.resize(n);
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  for (std::size_t t = 0; t < k; ++t) out.push_back(t * n / k);
  return out;
}

}  // namespace

template <typename T>
Var<T> pair_loss(Binder<T>& bind, const Tensor<T>& image_a, const Tensor<T>& image_b, const Mat3& h,
                 const ModelConfig& model, const TrainConfig& train, LossBreakdown* breakdown) {
  Tape<T>& tape = bind.tape();
  const GridDims dims_a{image_a.dim(2), image_a.dim(1)}, dims_b{image_b.dim(2), image_b.dim(1)};
  const GroundTruth gt = build_gt_homography(h, dims_a, dims_b);

  const auto fwd = forward_train(bind, tape.input(image_a), tape.input(image_b), model);
  if (fwd.coarse_a.dim(1) != gt.grid_a.h || fwd.coarse_a.dim(2) != gt.grid_a.w ||
      fwd.coarse_b.dim(1) != gt.grid_b.h || fwd.coarse_b.dim(2) != gt.grid_b.w) {
    throw ShapeError("training images must be a multiple of the padding size");
  }
  Var<T> l_c = ag::coarse_loss(ag::dual_softmax(coarse_scores(fwd.coarse_a, fwd.coarse_b, model)), gt);

  const std::size_t w = model.fine.patch_width, d = fwd.fine_a.dim(0);
  const T local_scale = T(model.fine.inv_temperature / double(d));
  const T window_scale = T(1.0 / std::sqrt(double(d)));
  Tensor<T> offsets({9, 2});
  for (int k = 0; k < 9; ++k) {
    offsets[2 * k] = T(window_offsets()[k][0]);
    offsets[2 * k + 1] = T(window_offsets()[k][1]);
  }
  Var<T> offsets_v = tape.input(offsets);

  std::vector<Var<T>> f1_terms, f2_terms;
  for (std::size_t k : strided_subset(gt.coarse_pairs.size(), train.max_fine_matches)) {
    const GtPair& g = gt.coarse_pairs[k];
    const auto oa = patch_origin(g.i, gt.grid_a.w, w), ob = patch_origin(g.j, gt.grid_b.w, w);
    Var<T> ta = ag::map_to_tokens(ag::crop2d(fwd.fine_a, oa[1], oa[0], w, w));
    Var<T> tb = ag::map_to_tokens(ag::crop2d(fwd.fine_b, ob[1], ob[0], w, w));
    Var<T> s = ag::scale(ag::matmul(ta, tb, false, true), local_scale);

    const PixelPairs targets = fine_pixel_targets(h, oa[0], oa[1], ob[0], ob[1], w, dims_a, dims_b);
    if (!targets.empty()) f1_terms.push_back(ag::fine_match_loss_stage1(s, targets));

    // Stage 2 is teacher-forced: the window is centered on the rounded GT warp
    // of the stage-1 pixel of A.
    std::vector<unsigned char> row_mask(w * w), col_mask(w * w);
    for (std::size_t p = 0; p < w * w; ++p) {
      const long xa = oa[0] + long(p % w), ya = oa[1] + long(p / w);
      const long xb = ob[0] + long(p % w), yb = ob[1] + long(p / w);
      row_mask[p] = xa >= 0 && ya >= 0 && xa < long(dims_a.w) && ya < long(dims_a.h);
      col_mask[p] = xb >= 0 && yb >= 0 && xb < long(dims_b.w) && yb < long(dims_b.h);
    }
    const auto pick = stage1_select(s.value(), &row_mask, &col_mask);
    if (!pick) continue;
    const long xa = oa[0] + long(pick->a % w), ya = oa[1] + long(pick->a / w);
    const auto target = apply_homography(h, Vec2{double(xa), double(ya)});
    if (!target || target->x() < 0 || target->y() < 0 || target->x() > double(dims_b.w - 1) ||
        target->y() > double(dims_b.h - 1)) {
      continue;
    }
    const long cx = std::lround(target->x()), cy = std::lround(target->y());
    std::vector<unsigned char> valid(9);
    for (int c = 0; c < 9; ++c) {
      const long x = cx + window_offsets()[c][0], y = cy + window_offsets()[c][1];
      valid[c] = x >= 0 && y >= 0 && x < long(dims_b.w) && y < long(dims_b.h);
    }
    Var<T> feat = ag::map_to_tokens(ag::crop2d(fwd.fine_a, ya, xa, 1, 1));
    Var<T> window = ag::map_to_tokens(ag::crop2d(fwd.fine_b, cy - 1, cx - 1, 3, 3));
    Var<T> probs = ag::masked_softmax(ag::scale(ag::matmul(feat, window, false, true), window_scale), 1, valid);
    Var<T> center = tape.input(Tensor<T>({1, 2}, std::vector<T>{T(cx), T(cy)}));
    f2_terms.push_back(ag::squared_distance(ag::add(ag::matmul(probs, offsets_v), center), *target));
  }
  if (f1_terms.empty()) throw DegenerateError("fine stage-1 loss: every match has its target outside the patch");
  if (f2_terms.empty()) throw DegenerateError("fine stage-2 loss without matches");
  Var<T> l_f1 = ag::mean(ag::concat(f1_terms, 0));
  Var<T> l_f2 = ag::mean(ag::concat(f2_terms, 0));
  const LossWeights weights{train.alpha, train.beta};
  Var<T> total = ag::total_loss(l_c, l_f1, l_f2, weights);
  if (breakdown) {
    *breakdown = {double(l_c.value()[0]),  double(l_f1.value()[0]), double(l_f2.value()[0]),
                  double(total.value()[0]), gt.coarse_pairs.size(),  f1_terms.size(),
                  f2_terms.size()};
  }
  return total;
}

template <typename T>
AdamW<T>::AdamW(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
}

template <typename T>
void AdamW<T>::step(ParamSet<T>& params, const Binder<T>& bind) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, double(t_));
  for (const auto& [name, var] : bind.bound()) {
    if (!params.trainable(name)) continue;
    const Tensor<T>* g = bind.tape().grad(var);
    if (!g) continue;
    Tensor<T>& p = params.get(name);
    Moments& mo = moments_[name];
    if (mo.m.empty()) {
      mo.m.assign(p.size(), 0.0);
      mo.v.assign(p.size(), 0.0);
    }
    const double wd = decays(name) ? cfg_.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = double((*g)[k]);
      mo.m[k] = cfg_.adam_beta1 * mo.m[k] + (1 - cfg_.adam_beta1) * gk;
      mo.v[k] = cfg_.adam_beta2 * mo.v[k] + (1 - cfg_.adam_beta2) * gk * gk;
      const double update = (mo.m[k] / bc1) / (std::sqrt(mo.v[k] / bc2) + cfg_.adam_eps);
      const double pk = double(p[k]);
      p[k] = T(pk - cfg_.lr * (update + wd * pk));
    }
  }
}

std::vector<SyntheticPair> make_dataset(std::size_t count, std::uint64_t seed, const SynthOptions& opt) {
  std::mt19937_64 rng(seed);
  std::vector<SyntheticPair> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(make_synthetic_pair(rng, opt));
  return out;
}

template <typename T>
TrainResult<T> train_toy(const RunConfig& cfg, const std::vector<SyntheticPair>& data, const TrainProgress& progress) {
  cfg.model.validate();
  cfg.train.validate();
  if (data.empty()) throw UsageError("training needs at least one image pair");
  TrainResult<T> out{init_model<T>(cfg.model, cfg.train.seed, cfg.train.calibration_images), {}, 0};
  AdamW<T> opt(cfg.train);
  std::mt19937_64 rng(cfg.train.seed + 1);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < cfg.train.steps; ++step) {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const SyntheticPair& pair = data[order[cursor++]];
    Tape<T> tape;
    Binder<T> bind(tape, out.params);
    LossBreakdown lb;
    Var<T> loss;
    try {
      loss = pair_loss(bind, pair.a.template cast<T>(), pair.b.template cast<T>(), pair.h, cfg.model, cfg.train, &lb);
    } catch (const DegenerateError&) {
      ++out.skipped;
      continue;
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    tape.backward(loss);
    opt.step(out.params, bind);
    const LossRecord rec{step, lb.l_c, lb.l_f1, lb.l_f2, lb.total};
    out.curve.push_back(rec);
    if (progress) progress(rec);
  }
  return out;
}

#define SDM_INSTANTIATE_TRAINER(T)                                                                            \
  template Var<T> pair_loss(Binder<T>&, const Tensor<T>&, const Tensor<T>&, const Mat3&, const ModelConfig&,  \
                            const TrainConfig&, LossBreakdown*);                                              \
  template class AdamW<T>;                                                                                    \
  template TrainResult<T> train_toy(const RunConfig&, const std::vector<SyntheticPair>&, const TrainProgress&);

SDM_INSTANTIATE_TRAINER(float)
SDM_INSTANTIATE_TRAINER(double)

}  // namespace sdm
