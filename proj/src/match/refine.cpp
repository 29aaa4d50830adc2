#include "sdm/match/refine.hpp"

#include <cmath>
#include <limits>

#include "sdm/core/kernels.hpp"

namespace sdm {

template <typename T>
void init_fine(ParamSet<T>& params, std::size_t coarse_dim, std::size_t quarter_dim, std::size_t half_dim,
               std::size_t d_fine, std::mt19937_64& rng) {
  params.add("fine.lat_quarter.kernel", he_normal<T>({coarse_dim, quarter_dim, 1, 1}, quarter_dim, rng, 1.0));
  params.add("fine.lat_quarter.bias", Tensor<T>({coarse_dim}));
  params.add("fine.conv1.kernel", he_normal<T>({d_fine, coarse_dim, 3, 3}, coarse_dim * 9, rng));
  params.add("fine.conv1.bias", Tensor<T>({d_fine}));
  params.add("fine.lat_half.kernel", he_normal<T>({d_fine, half_dim, 1, 1}, half_dim, rng, 1.0));
  params.add("fine.lat_half.bias", Tensor<T>({d_fine}));
  params.add("fine.conv2.kernel", he_normal<T>({d_fine, d_fine, 3, 3}, d_fine * 9, rng, 0.1));
  params.add("fine.conv2.bias", Tensor<T>({d_fine}));
}

template <typename T>
Var<T> fuse_fine_features(Binder<T>& bind, Var<T> coarse, Var<T> quarter, Var<T> half) {
  require_rank(coarse.value(), 3, "fuse_fine_features coarse");
  const std::size_t h = coarse.dim(1), w = coarse.dim(2);
  if (quarter.value().rank() != 3 || quarter.dim(1) != 2 * h || quarter.dim(2) != 2 * w || half.value().rank() != 3 ||
      half.dim(1) != 4 * h || half.dim(2) != 4 * w) {
    throw ShapeError("fuse_fine_features: pyramid levels " + to_string(quarter.shape()) + ", " +
                     to_string(half.shape()) + " do not fit coarse map " + to_string(coarse.shape()));
  }
  auto conv = [&](Var<T> x, const std::string& name, std::size_t pad) {
    return ag::add_channel_bias(ag::conv2d(x, bind(name + ".kernel"), 1, pad), bind(name + ".bias"));
  };
  Var<T> y = ag::add(ag::bilinear_upsample(coarse, 2), conv(quarter, "fine.lat_quarter", 0));
  y = ag::relu(conv(y, "fine.conv1", 1));
  y = ag::add(ag::bilinear_upsample(y, 2), conv(half, "fine.lat_half", 0));
  y = conv(y, "fine.conv2", 1);
  return ag::bilinear_upsample(y, 2);
}

std::array<long, 2> patch_origin(std::size_t cell, std::size_t grid_w, std::size_t w) {
  const long cx = long(cell % grid_w), cy = long(cell / grid_w);
  const long half = long(w / 2), stride = long(kCoarseStride);
  return {cx * stride + stride / 2 - half, cy * stride + stride / 2 - half};
}

namespace {

template <typename T>
bool crop(const Tensor<T>& fine, long x0, long y0, std::size_t w, GridDims image, Tensor<T>& out) {
  const std::size_t d = fine.dim(0);
  out = Tensor<T>({d, w, w});
  bool padded = false;
  for (std::size_t i = 0; i < w; ++i) {
    const long y = y0 + long(i);
    for (std::size_t j = 0; j < w; ++j) {
      const long x = x0 + long(j);
      if (x < 0 || y < 0 || x >= long(image.w) || y >= long(image.h)) {
        padded = true;
        continue;
      }
      for (std::size_t c = 0; c < d; ++c) out.at(c, i, j) = fine.at(c, std::size_t(y), std::size_t(x));
    }
  }
  return padded;
}

std::vector<unsigned char> inside_mask(long x0, long y0, std::size_t w, GridDims image) {
  std::vector<unsigned char> m(w * w);
  for (std::size_t i = 0; i < w; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const long x = x0 + long(j), y = y0 + long(i);
      m[i * w + j] = x >= 0 && y >= 0 && x < long(image.w) && y < long(image.h);
    }
  }
  return m;
}

void check_fine_maps(const Shape& a, const Shape& b, GridDims ga, GridDims gb) {
  if (a.size() != 3 || b.size() != 3 || a[0] != b[0]) throw ShapeError("refine: fine maps must be [d, H, W] with equal d");
  if (a[1] != ga.h * kCoarseStride || a[2] != ga.w * kCoarseStride || b[1] != gb.h * kCoarseStride ||
      b[2] != gb.w * kCoarseStride) {
    throw ShapeError("refine: fine maps do not match the coarse grids");
  }
}

}  // namespace

template <typename T>
std::vector<FinePatchPair<T>> crop_patches(const Tensor<T>& fine_a, const Tensor<T>& fine_b,
                                           const std::vector<CoarseMatch>& matches, GridDims grid_a,
                                           GridDims grid_b, GridDims image_a, GridDims image_b, std::size_t w) {
  check_fine_maps(fine_a.shape(), fine_b.shape(), grid_a, grid_b);
  if (w == 0 || w % 2) throw UsageError("patch width must be even and positive");
  std::vector<FinePatchPair<T>> out;
  out.reserve(matches.size());
  for (const auto& m : matches) {
    FinePatchPair<T> p;
    const auto oa = patch_origin(m.i, grid_a.w, w), ob = patch_origin(m.j, grid_b.w, w);
    p.ax0 = oa[0];
    p.ay0 = oa[1];
    p.bx0 = ob[0];
    p.by0 = ob[1];
    const bool pa = crop(fine_a, p.ax0, p.ay0, w, image_a, p.a);
    const bool pb = crop(fine_b, p.bx0, p.by0, w, image_b, p.b);
    p.padded = pa || pb;
    out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
Tensor<T> local_scores(const Tensor<T>& patch_a, const Tensor<T>& patch_b, double inv_temperature) {
  require_rank(patch_a, 3, "local_scores");
  if (patch_a.shape() != patch_b.shape()) throw ShapeError("local_scores: patch shapes differ");
  const std::size_t d = patch_a.dim(0), n = patch_a.dim(1) * patch_a.dim(2);
  Tensor<T> s = kernels::matmul(patch_a.reshaped({d, n}), patch_b.reshaped({d, n}), true, false);
  const T k = T(inv_temperature / double(d));
  for (auto& v : s.storage()) v *= k;
  return s;
}

template <typename T>
std::optional<Stage1Pick> stage1_select(const Tensor<T>& scores, const std::vector<unsigned char>* row_mask,
                                        const std::vector<unsigned char>* col_mask) {
  require_rank(scores, 2, "stage1_select");
  const std::size_t na = scores.dim(0), nb = scores.dim(1);
  std::optional<Stage1Pick> best;
  T best_v = -std::numeric_limits<T>::infinity();
  for (std::size_t a = 0; a < na; ++a) {
    if (row_mask && !(*row_mask)[a]) continue;
    const T* row = scores.ptr() + a * nb;
    for (std::size_t b = 0; b < nb; ++b) {
      if (col_mask && !(*col_mask)[b]) continue;
      if (!best || row[b] > best_v) {
        best_v = row[b];
        best = Stage1Pick{a, b, double(row[b])};
      }
    }
  }
  return best;
}

const std::array<std::array<int, 2>, 9>& window_offsets() {
  static const std::array<std::array<int, 2>, 9> off = [] {
    std::array<std::array<int, 2>, 9> o{};
    for (int v = -1, k = 0; v <= 1; ++v) {
      for (int u = -1; u <= 1; ++u, ++k) o[k] = {u, v};
    }
    return o;
  }();
  return off;
}

Offset expectation_from_scores(const std::array<double, 9>& scores, const std::array<bool, 9>& valid) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < 9; ++k) {
    if (valid[k]) mx = std::max(mx, scores[k]);
  }
  if (!std::isfinite(mx)) {
    if (mx == -std::numeric_limits<double>::infinity()) throw DegenerateError("stage-2 window has no valid cell");
    throw NumericError("non-finite stage-2 score");
  }
  // Per axis: (mass at +1) - (mass at -1) over a normalizer built from the same
  // partial sums, so |offset| <= 1 survives rounding.
  std::array<double, 3> x{}, y{};  // mass at offset -1, 0, +1
  for (int k = 0; k < 9; ++k) {
    if (!valid[k]) continue;
    const double p = std::exp(scores[k] - mx);
    x[std::size_t(window_offsets()[k][0] + 1)] += p;
    y[std::size_t(window_offsets()[k][1] + 1)] += p;
  }
  auto axis = [](const std::array<double, 3>& m) { return (m[2] - m[0]) / ((m[2] + m[0]) + m[1]); };
  return {axis(x), axis(y)};
}

template <typename T>
Offset stage2_expectation(const Tensor<T>& feat_a, const Tensor<T>& window_b, const std::array<bool, 9>& valid) {
  const std::size_t d = feat_a.size();
  if (window_b.rank() != 3 || window_b.dim(0) != d || window_b.dim(1) != 3 || window_b.dim(2) != 3) {
    throw ShapeError("stage2_expectation: window must be [d, 3, 3]");
  }
  std::array<double, 9> s{};
  const double k = 1.0 / std::sqrt(double(d));
  for (int cell = 0; cell < 9; ++cell) {
    double dot = 0;
    for (std::size_t c = 0; c < d; ++c) dot += double(feat_a[c]) * double(window_b[c * 9 + cell]);
    s[cell] = dot * k;
  }
  return expectation_from_scores(s, valid);
}

template <typename T>
std::vector<FineMatch> refine(const std::vector<CoarseMatch>& matches, const Tensor<T>& fine_a,
                              const Tensor<T>& fine_b, GridDims grid_a, GridDims grid_b, GridDims image_a,
                              GridDims image_b, const FineConfig& cfg, bool second_stage, RefineStats* stats) {
  const std::size_t w = cfg.patch_width, d = fine_a.dim(0);
  auto patches = crop_patches(fine_a, fine_b, matches, grid_a, grid_b, image_a, image_b, w);
  std::vector<FineMatch> out;
  RefineStats local;
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const auto& p = patches[k];
    if (p.padded) ++local.padded;
    const auto ma = inside_mask(p.ax0, p.ay0, w, image_a), mb = inside_mask(p.bx0, p.by0, w, image_b);
    const auto pick = stage1_select(local_scores(p.a, p.b, cfg.inv_temperature), &ma, &mb);
    if (!pick) {
      ++local.discarded;
      continue;
    }
    const long xa = p.ax0 + long(pick->a % w), ya = p.ay0 + long(pick->a / w);
    const long xb = p.bx0 + long(pick->b % w), yb = p.by0 + long(pick->b / w);
    FineMatch fm{double(xa), double(ya), double(xb), double(yb), matches[k].confidence, k};
    if (second_stage) {
      Tensor<T> feat({d}), window({d, 3, 3});
      std::array<bool, 9> valid{};
      for (std::size_t c = 0; c < d; ++c) feat[c] = fine_a.at(c, std::size_t(ya), std::size_t(xa));
      for (int cell = 0; cell < 9; ++cell) {
        const long x = xb + window_offsets()[cell][0], y = yb + window_offsets()[cell][1];
        valid[cell] = x >= 0 && y >= 0 && x < long(image_b.w) && y < long(image_b.h);
        if (!valid[cell]) continue;
        for (std::size_t c = 0; c < d; ++c) window[c * 9 + cell] = fine_b.at(c, std::size_t(y), std::size_t(x));
      }
      const Offset o = stage2_expectation(feat, window, valid);
      fm.xb += o.dx;
      fm.yb += o.dy;
    }
    out.push_back(fm);
  }
  if (stats) *stats = local;
  return out;
}

#define SDM_INSTANTIATE_REFINE(T)                                                                                \
  template void init_fine(ParamSet<T>&, std::size_t, std::size_t, std::size_t, std::size_t, std::mt19937_64&);   \
  template Var<T> fuse_fine_features(Binder<T>&, Var<T>, Var<T>, Var<T>);                                        \
  template std::vector<FinePatchPair<T>> crop_patches(const Tensor<T>&, const Tensor<T>&,                        \
                                                      const std::vector<CoarseMatch>&, GridDims, GridDims,       \
                                                      GridDims, GridDims, std::size_t);                          \
  template Tensor<T> local_scores(const Tensor<T>&, const Tensor<T>&, double);                                   \
  template std::optional<Stage1Pick> stage1_select(const Tensor<T>&, const std::vector<unsigned char>*,          \
                                                   const std::vector<unsigned char>*);                           \
  template Offset stage2_expectation(const Tensor<T>&, const Tensor<T>&, const std::array<bool, 9>&);            \
  template std::vector<FineMatch> refine(const std::vector<CoarseMatch>&, const Tensor<T>&, const Tensor<T>&,    \
                                         GridDims, GridDims, GridDims, GridDims, const FineConfig&, bool,        \
                                         RefineStats*);

SDM_INSTANTIATE_REFINE(float)
SDM_INSTANTIATE_REFINE(double)

}  // namespace sdm
