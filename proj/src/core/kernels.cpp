#include "sdm/core/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "sdm/core/counters.hpp"

namespace sdm::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRow = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Keeps the im2col buffer bounded on large maps.
constexpr std::size_t kMaxColumnElements = std::size_t(1) << 23;

struct ConvGeometry {
  std::size_t c, h, w, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t rows_per_chunk() const {
    const std::size_t per_row = std::max<std::size_t>(1, patch() * wo);
    return std::clamp<std::size_t>(kMaxColumnElements / per_row, 1, ho);
  }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeometry make_geometry(const Shape& in, std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad) {
  ConvGeometry g{in[0], in[1], in[2], kh, kw, stride, pad, 0, 0};
  g.ho = conv_out_dim(g.h, kh, stride, pad);
  g.wo = conv_out_dim(g.w, kw, stride, pad);
  return g;
}

// Columns for output rows [r0, r1): col[(c*kh+i)*kw+j, (r-r0)*wo + x].
template <typename T>
void im2col(const T* in, const ConvGeometry& g, std::size_t r0, std::size_t r1, T* col) {
  const std::size_t cols = (r1 - r0) * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* plane = in + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t r = r0; r < r1; ++r) {
          const long y = long(r * g.stride + i) - long(g.pad);
          T* row = dst + (r - r0) * g.wo;
          if (y < 0 || y >= long(g.h)) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          const T* src = plane + std::size_t(y) * g.w;
          for (std::size_t x = 0; x < g.wo; ++x) {
            const long xx = long(x * g.stride + j) - long(g.pad);
            row[x] = (xx < 0 || xx >= long(g.w)) ? T(0) : src[xx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t r0, std::size_t r1, T* in) {
  const std::size_t cols = (r1 - r0) * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    T* plane = in + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t r = r0; r < r1; ++r) {
          const long y = long(r * g.stride + i) - long(g.pad);
          if (y < 0 || y >= long(g.h)) continue;
          const T* row = src + (r - r0) * g.wo;
          T* dst = plane + std::size_t(y) * g.w;
          for (std::size_t x = 0; x < g.wo; ++x) {
            const long xx = long(x * g.stride + j) - long(g.pad);
            if (xx >= 0 && xx < long(g.w)) dst[xx] += row[x];
          }
        }
      }
    }
  }
}

void check_conv_args(const Shape& in, const Shape& kernel, std::size_t stride, const char* what) {
  if (in.size() != 3) throw ShapeError(std::string(what) + ": input must be [C, H, W], got " + to_string(in));
  if (kernel.size() != 4) throw ShapeError(std::string(what) + ": kernel must be [O, C, kh, kw]");
  if (kernel[1] != in[0]) {
    throw ShapeError(std::string(what) + ": kernel expects " + std::to_string(kernel[1]) + " input channels, got " +
                     std::to_string(in[0]));
  }
  if (kernel[2] % 2 == 0 || kernel[3] % 2 == 0) throw ShapeError(std::string(what) + ": kernel size must be odd");
  if (stride == 0) throw ShapeError(std::string(what) + ": stride must be >= 1");
}

}  // namespace

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ShapeError("window larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  check_conv_args(input.shape(), kernel.shape(), stride, "conv2d");
  bump(op_counters().conv2d);
  const auto g = make_geometry(input.shape(), kernel.dim(2), kernel.dim(3), stride, pad);
  const std::size_t oc = kernel.dim(0);
  const std::size_t k = g.patch();
  const std::size_t plane = g.ho * g.wo;
  Tensor<T> out({oc, g.ho, g.wo});
  CMapRow<T> w(kernel.ptr(), oc, k);
  if (g.is_pointwise()) {
    MapRow<T>(out.ptr(), oc, plane).noalias() = w * CMapRow<T>(input.ptr(), k, plane);
    return out;
  }
  const std::size_t chunk = g.rows_per_chunk();
  std::vector<T> col(k * chunk * g.wo);
  for (std::size_t r0 = 0; r0 < g.ho; r0 += chunk) {
    const std::size_t r1 = std::min(g.ho, r0 + chunk);
    const std::size_t cols = (r1 - r0) * g.wo;
    im2col(input.ptr(), g, r0, r1, col.data());
    StridedMap<T> dst(out.ptr() + r0 * g.wo, oc, cols, Eigen::OuterStride<>(plane));
    dst.noalias() = w * CMapRow<T>(col.data(), k, cols);
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& kernel, const Shape& input_shape,
                            std::size_t stride, std::size_t pad) {
  check_conv_args(input_shape, kernel.shape(), stride, "conv2d_grad_input");
  const auto g = make_geometry(input_shape, kernel.dim(2), kernel.dim(3), stride, pad);
  const std::size_t oc = kernel.dim(0);
  const std::size_t k = g.patch();
  const std::size_t plane = g.ho * g.wo;
  Tensor<T> grad_in(input_shape);
  CMapRow<T> w(kernel.ptr(), oc, k);
  if (g.is_pointwise()) {
    MapRow<T>(grad_in.ptr(), k, plane).noalias() = w.transpose() * CMapRow<T>(grad_out.ptr(), oc, plane);
    return grad_in;
  }
  const std::size_t chunk = g.rows_per_chunk();
  std::vector<T> col(k * chunk * g.wo);
  for (std::size_t r0 = 0; r0 < g.ho; r0 += chunk) {
    const std::size_t r1 = std::min(g.ho, r0 + chunk);
    const std::size_t cols = (r1 - r0) * g.wo;
    CStridedMap<T> go(grad_out.ptr() + r0 * g.wo, oc, cols, Eigen::OuterStride<>(plane));
    MapRow<T>(col.data(), k, cols).noalias() = w.transpose() * go;
    col2im_add(col.data(), g, r0, r1, grad_in.ptr());
  }
  return grad_in;
}

template <typename T>
Tensor<T> conv2d_grad_kernel(const Tensor<T>& grad_out, const Tensor<T>& input, const Shape& kernel_shape,
                             std::size_t stride, std::size_t pad) {
  check_conv_args(input.shape(), kernel_shape, stride, "conv2d_grad_kernel");
  const auto g = make_geometry(input.shape(), kernel_shape[2], kernel_shape[3], stride, pad);
  const std::size_t oc = kernel_shape[0];
  const std::size_t k = g.patch();
  const std::size_t plane = g.ho * g.wo;
  Tensor<T> grad_k(kernel_shape);
  MapRow<T> gk(grad_k.ptr(), oc, k);
  if (g.is_pointwise()) {
    gk.noalias() = CMapRow<T>(grad_out.ptr(), oc, plane) * CMapRow<T>(input.ptr(), k, plane).transpose();
    return grad_k;
  }
  const std::size_t chunk = g.rows_per_chunk();
  std::vector<T> col(k * chunk * g.wo);
  for (std::size_t r0 = 0; r0 < g.ho; r0 += chunk) {
    const std::size_t r1 = std::min(g.ho, r0 + chunk);
    const std::size_t cols = (r1 - r0) * g.wo;
    im2col(input.ptr(), g, r0, r1, col.data());
    CStridedMap<T> go(grad_out.ptr() + r0 * g.wo, oc, cols, Eigen::OuterStride<>(plane));
    gk.noalias() += go * CMapRow<T>(col.data(), k, cols).transpose();
  }
  return grad_k;
}

namespace {

void check_depthwise(const Shape& in, const Shape& kernel, std::size_t stride) {
  if (in.size() != 3) throw ShapeError("depthwise_conv2d: input must be [C, H, W], got " + to_string(in));
  if (kernel.size() != 3) throw ShapeError("depthwise_conv2d: kernel must be [C, kh, kw]");
  if (kernel[0] != in[0]) {
    throw ShapeError("depthwise_conv2d: kernel has " + std::to_string(kernel[0]) + " channels, input has " +
                     std::to_string(in[0]));
  }
  if (stride == 0) throw ShapeError("depthwise_conv2d: stride must be >= 1");
}

}  // namespace

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  check_depthwise(input.shape(), kernel.shape(), stride);
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t kh = kernel.dim(1), kw = kernel.dim(2);
  const std::size_t ho = conv_out_dim(h, kh, stride, pad), wo = conv_out_dim(w, kw, stride, pad);
  Tensor<T> out({c, ho, wo});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        T acc = 0;
        for (std::size_t i = 0; i < kh; ++i) {
          const long yy = long(y * stride + i) - long(pad);
          if (yy < 0 || yy >= long(h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const long xx = long(x * stride + j) - long(pad);
            if (xx < 0 || xx >= long(w)) continue;
            acc += kernel.at(ch, i, j) * input.at(ch, std::size_t(yy), std::size_t(xx));
          }
        }
        out.at(ch, y, x) = acc;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& kernel, const Shape& input_shape,
                                      std::size_t stride, std::size_t pad) {
  check_depthwise(input_shape, kernel.shape(), stride);
  const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  const std::size_t kh = kernel.dim(1), kw = kernel.dim(2);
  const std::size_t ho = grad_out.dim(1), wo = grad_out.dim(2);
  Tensor<T> grad_in(input_shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        const T g = grad_out.at(ch, y, x);
        for (std::size_t i = 0; i < kh; ++i) {
          const long yy = long(y * stride + i) - long(pad);
          if (yy < 0 || yy >= long(h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const long xx = long(x * stride + j) - long(pad);
            if (xx < 0 || xx >= long(w)) continue;
            grad_in.at(ch, std::size_t(yy), std::size_t(xx)) += kernel.at(ch, i, j) * g;
          }
        }
      }
    }
  }
  return grad_in;
}

template <typename T>
Tensor<T> depthwise_conv2d_grad_kernel(const Tensor<T>& grad_out, const Tensor<T>& input,
                                       const Shape& kernel_shape, std::size_t stride, std::size_t pad) {
  check_depthwise(input.shape(), kernel_shape, stride);
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t kh = kernel_shape[1], kw = kernel_shape[2];
  const std::size_t ho = grad_out.dim(1), wo = grad_out.dim(2);
  Tensor<T> grad_k(kernel_shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        const T g = grad_out.at(ch, y, x);
        for (std::size_t i = 0; i < kh; ++i) {
          const long yy = long(y * stride + i) - long(pad);
          if (yy < 0 || yy >= long(h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const long xx = long(x * stride + j) - long(pad);
            if (xx < 0 || xx >= long(w)) continue;
            grad_k.at(ch, i, j) += input.at(ch, std::size_t(yy), std::size_t(xx)) * g;
          }
        }
      }
    }
  }
  return grad_k;
}

template <typename T>
PoolResult<T> maxpool2d(const Tensor<T>& input, std::size_t k, std::size_t stride) {
  require_rank(input, 3, "maxpool2d");
  if (k == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be >= 1");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (k > h || k > w) throw ShapeError("maxpool2d: window larger than input " + to_string(input.shape()));
  const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  PoolResult<T> r{Tensor<T>({c, ho, wo}), std::vector<std::size_t>(c * ho * wo)};
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x, ++o) {
        std::size_t best = (ch * h + y * stride) * w + x * stride;
        T best_v = input[best];
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = (ch * h + y * stride + i) * w + x * stride + j;
            if (input[idx] > best_v) {
              best_v = input[idx];
              best = idx;
            }
          }
        }
        r.values[o] = best_v;
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2d_grad(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax, const Shape& input_shape) {
  Tensor<T> grad_in(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) grad_in[argmax[o]] += grad_out[o];
  return grad_in;
}

namespace {

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range for shape " + to_string(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, const std::vector<unsigned char>* mask) {
  const AxisSplit a = split_axis(x.shape(), axis);
  if (mask && mask->size() != x.size()) throw ShapeError("softmax: mask size does not match input");
  bump(op_counters().softmax);
  Tensor<T> y(x.shape());
  const T* in = x.ptr();
  T* out = y.ptr();
  if (a.inner == 1 && !mask) {
    for (std::size_t o = 0; o < a.outer; ++o) {
      const T* row = in + o * a.n;
      T* dst = out + o * a.n;
      const T m = *std::max_element(row, row + a.n);
      T sum = 0;
      for (std::size_t j = 0; j < a.n; ++j) {
        dst[j] = std::exp(row[j] - m);
        sum += dst[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < a.n; ++j) dst[j] *= inv;
    }
    return y;
  }
  if (!mask) {
    // Reduce across rows of a [outer, n, inner] block with contiguous inner loops.
    std::vector<T> m(a.inner), sum(a.inner);
    for (std::size_t o = 0; o < a.outer; ++o) {
      const T* blk = in + o * a.n * a.inner;
      T* dst = out + o * a.n * a.inner;
      std::fill(m.begin(), m.end(), -std::numeric_limits<T>::infinity());
      std::fill(sum.begin(), sum.end(), T(0));
      for (std::size_t j = 0; j < a.n; ++j) {
        const T* row = blk + j * a.inner;
        for (std::size_t i = 0; i < a.inner; ++i) m[i] = std::max(m[i], row[i]);
      }
      for (std::size_t j = 0; j < a.n; ++j) {
        const T* row = blk + j * a.inner;
        T* d = dst + j * a.inner;
        for (std::size_t i = 0; i < a.inner; ++i) {
          d[i] = std::exp(row[i] - m[i]);
          sum[i] += d[i];
        }
      }
      for (std::size_t i = 0; i < a.inner; ++i) sum[i] = T(1) / sum[i];
      for (std::size_t j = 0; j < a.n; ++j) {
        T* d = dst + j * a.inner;
        for (std::size_t i = 0; i < a.inner; ++i) d[i] *= sum[i];
      }
    }
    return y;
  }
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.inner; ++i) {
      const std::size_t base = o * a.n * a.inner + i;
      T m = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < a.n; ++j) {
        const std::size_t idx = base + j * a.inner;
        if (!(*mask)[idx]) continue;
        any = true;
        m = std::max(m, in[idx]);
      }
      if (!any) throw DegenerateError("softmax: every entry along the axis is masked");
      T sum = 0;
      for (std::size_t j = 0; j < a.n; ++j) {
        const std::size_t idx = base + j * a.inner;
        out[idx] = (*mask)[idx] ? std::exp(in[idx] - m) : T(0);
        sum += out[idx];
      }
      for (std::size_t j = 0; j < a.n; ++j) out[base + j * a.inner] /= sum;
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_grad(const Tensor<T>& y, const Tensor<T>& grad_y, std::size_t axis) {
  const AxisSplit a = split_axis(y.shape(), axis);
  Tensor<T> gx(y.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.inner; ++i) {
      const std::size_t base = o * a.n * a.inner + i;
      T dot = 0;
      for (std::size_t j = 0; j < a.n; ++j) dot += y[base + j * a.inner] * grad_y[base + j * a.inner];
      for (std::size_t j = 0; j < a.n; ++j) {
        const std::size_t idx = base + j * a.inner;
        gx[idx] = y[idx] * (grad_y[idx] - dot);
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + (transpose_a ? "^T" : "") + " x " +
                     to_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor<T> out({m, n});
  CMapRow<T> am(a.ptr(), a.dim(0), a.dim(1));
  CMapRow<T> bm(b.ptr(), b.dim(0), b.dim(1));
  MapRow<T> om(out.ptr(), m, n);
  if (transpose_a && transpose_b) {
    om.noalias() = am.transpose() * bm.transpose();
  } else if (transpose_a) {
    om.noalias() = am.transpose() * bm;
  } else if (transpose_b) {
    om.noalias() = am * bm.transpose();
  } else {
    om.noalias() = am * bm;
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r});
  MapRow<T>(out.ptr(), c, r) = CMapRow<T>(a.ptr(), r, c).transpose();
  return out;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> upsample_taps(std::size_t in, std::size_t factor) {
  std::vector<Tap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (double(o) + 0.5) / double(factor) - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = std::min<std::size_t>(std::size_t(src), in - 1);
    std::size_t i1 = std::min<std::size_t>(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - double(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::size_t factor) {
  require_rank(input, 3, "bilinear_upsample");
  if (factor == 0) throw ShapeError("bilinear_upsample: factor must be >= 1");
  if (factor == 1) return input;
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto ty = upsample_taps(h, factor), tx = upsample_taps(w, factor);
  Tensor<T> out({c, h * factor, w * factor});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ty.size(); ++y) {
      const T wy = T(ty[y].w1);
      const T* r0 = input.ptr() + (ch * h + ty[y].i0) * w;
      const T* r1 = input.ptr() + (ch * h + ty[y].i1) * w;
      T* dst = out.ptr() + (ch * ty.size() + y) * tx.size();
      for (std::size_t x = 0; x < tx.size(); ++x) {
        const T wx = T(tx[x].w1);
        const T top = r0[tx[x].i0] * (T(1) - wx) + r0[tx[x].i1] * wx;
        const T bot = r1[tx[x].i0] * (T(1) - wx) + r1[tx[x].i1] * wx;
        dst[x] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_upsample_grad(const Tensor<T>& grad_out, const Shape& input_shape, std::size_t factor) {
  if (factor == 1) return grad_out;
  const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  const auto ty = upsample_taps(h, factor), tx = upsample_taps(w, factor);
  Tensor<T> grad_in(input_shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ty.size(); ++y) {
      const T wy = T(ty[y].w1);
      T* r0 = grad_in.ptr() + (ch * h + ty[y].i0) * w;
      T* r1 = grad_in.ptr() + (ch * h + ty[y].i1) * w;
      const T* src = grad_out.ptr() + (ch * ty.size() + y) * tx.size();
      for (std::size_t x = 0; x < tx.size(); ++x) {
        const T wx = T(tx[x].w1);
        const T g = src[x];
        r0[tx[x].i0] += g * (T(1) - wy) * (T(1) - wx);
        r0[tx[x].i1] += g * (T(1) - wy) * wx;
        r1[tx[x].i0] += g * wy * (T(1) - wx);
        r1[tx[x].i1] += g * wy * wx;
      }
    }
  }
  return grad_in;
}

namespace {

template <typename T>
void check_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  require_rank(q, 2, "attention Q");
  require_rank(k, 2, "attention K");
  require_rank(v, 2, "attention V");
  if (q.dim(1) != k.dim(1)) throw ShapeError("attention: Q and K feature dimensions differ");
  if (k.dim(0) != v.dim(0)) throw ShapeError("attention: K and V token counts differ");
}

}  // namespace

template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T scale) {
  check_attention(q, k, v);
  Tensor<T> s = matmul(q, k, false, true);
  bump(op_counters().attention_score_entries, s.size());
  for (auto& x : s.data()) x *= scale;
  return matmul(softmax(s, 1), v);
}

template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  require_rank(q, 2, "attention Q");
  return vanilla_attention(q, k, v, T(1) / std::sqrt(T(q.dim(1))));
}

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : std::expm1(x[i]);
  return y;
}

template <typename T>
Tensor<T> linear_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, LinearAttentionForm form) {
  check_attention(q, k, v);
  auto phi = [](const Tensor<T>& x) {
    Tensor<T> y = elu(x);
    for (auto& e : y.data()) e += T(1);
    return y;
  };
  const Tensor<T> fq = phi(q), fk = phi(k);
  if (form == LinearAttentionForm::Literal) return matmul(fq, matmul(fk, phi(v), true, false));
  Tensor<T> out = matmul(fq, matmul(fk, v, true, false));
  const std::size_t n = q.dim(0), d = q.dim(1), dv = v.dim(1);
  std::vector<T> ksum(d, T(0));
  for (std::size_t j = 0; j < fk.dim(0); ++j) {
    for (std::size_t c = 0; c < d; ++c) ksum[c] += fk.at(j, c);
  }
  for (std::size_t i = 0; i < n; ++i) {
    T z = 0;
    for (std::size_t c = 0; c < d; ++c) z += fq.at(i, c) * ksum[c];
    for (std::size_t c = 0; c < dv; ++c) out.at(i, c) /= z;
  }
  return out;
}

#define SDM_INSTANTIATE_KERNELS(T)                                                                                 \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);                        \
  template Tensor<T> conv2d_grad_input(const Tensor<T>&, const Tensor<T>&, const Shape&, std::size_t, std::size_t); \
  template Tensor<T> conv2d_grad_kernel(const Tensor<T>&, const Tensor<T>&, const Shape&, std::size_t,             \
                                        std::size_t);                                                              \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> depthwise_conv2d_grad_input(const Tensor<T>&, const Tensor<T>&, const Shape&, std::size_t,    \
                                                 std::size_t);                                                     \
  template Tensor<T> depthwise_conv2d_grad_kernel(const Tensor<T>&, const Tensor<T>&, const Shape&, std::size_t,   \
                                                  std::size_t);                                                    \
  template PoolResult<T> maxpool2d(const Tensor<T>&, std::size_t, std::size_t);                                    \
  template Tensor<T> maxpool2d_grad(const Tensor<T>&, const std::vector<std::size_t>&, const Shape&);              \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t, const std::vector<unsigned char>*);                    \
  template Tensor<T> softmax_grad(const Tensor<T>&, const Tensor<T>&, std::size_t);                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                                       \
  template Tensor<T> transpose(const Tensor<T>&);                                                                  \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> bilinear_upsample_grad(const Tensor<T>&, const Shape&, std::size_t);                          \
  template Tensor<T> vanilla_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                   \
  template Tensor<T> vanilla_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> linear_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, LinearAttentionForm);  \
  template Tensor<T> elu(const Tensor<T>&);

SDM_INSTANTIATE_KERNELS(float)
SDM_INSTANTIATE_KERNELS(double)

}  // namespace sdm::kernels
