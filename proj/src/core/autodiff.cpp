#include "sdm/core/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "sdm/core/counters.hpp"

namespace sdm {

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  if (!nodes_.at(id).requires_grad) return;
  Tensor<T>& dst = grads_.at(id);
  if (dst.empty()) {
    dst = g;
    return;
  }
  T* d = dst.ptr();
  const T* s = g.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, Tensor<T>&& g) {
  if (!nodes_.at(id).requires_grad) return;
  Tensor<T>& dst = grads_.at(id);
  if (dst.empty()) {
    dst = std::move(g);
    return;
  }
  T* d = dst.ptr();
  const T* s = g.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
Tensor<T>* Tape<T>::grad_buffer(std::size_t id) {
  if (!nodes_.at(id).requires_grad) return nullptr;
  Tensor<T>& dst = grads_.at(id);
  if (dst.empty()) dst = Tensor<T>(value(id).shape());
  return &dst;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ShapeError("backward: variable belongs to a different tape");
  if (value(loss.id).size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(value(loss.id).shape()));
  }
  if (!nodes_.at(loss.id).requires_grad) throw ShapeError("backward: loss is detached from every variable");
  grads_.assign(nodes_.size(), Tensor<T>());
  grads_[loss.id] = Tensor<T>(value(loss.id).shape(), T(1));
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || grads_[id].empty()) continue;
    n.backward(*this, id);
  }
}

template class Tape<float>;
template class Tape<double>;

namespace ag {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRow = Eigen::Map<const RowMat<T>>;

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.tape) throw ShapeError("variable is not attached to a tape");
  return *a.tape;
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ShapeError("operands live on different tapes");
}

template <typename T>
void same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename F, typename T>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  same_shape(av, bv, "add");
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad_out(self));
    t.accumulate(ib, t.grad_out(self));
  }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  same_shape(av, bv, "sub");
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    t.accumulate(ia, t.grad_out(self));
    t.accumulate(ib, map_unary(t.grad_out(self), [](T g) { return -g; }));
  }, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  same_shape(av, bv, "mul");
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T> ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
      t.accumulate(ia, std::move(ga));
    }
    if (t.requires_grad(ib)) {
      Tensor<T> gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
      t.accumulate(ib, std::move(gb));
    }
  }, "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  const std::size_t ia = a.id;
  return tape_of(a).record(map_unary(a.value(), [factor](T x) { return x * factor; }), {a},
                           [ia, factor](Tape<T>& t, std::size_t self) {
                             t.accumulate(ia, map_unary(t.grad_out(self), [factor](T g) { return g * factor; }));
                           },
                           "scale");
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  const std::size_t ia = a.id;
  return tape_of(a).record(map_unary(a.value(), [offset](T x) { return x + offset; }), {a},
                           [ia](Tape<T>& t, std::size_t self) { t.accumulate(ia, t.grad_out(self)); }, "add_scalar");
}

template <typename T>
Var<T> square(Var<T> a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(map_unary(a.value(), [](T x) { return x * x; }), {a},
                           [ia](Tape<T>& t, std::size_t self) {
                             const auto& g = t.grad_out(self);
                             const auto& x = t.value(ia);
                             Tensor<T> gx(g.shape());
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] = T(2) * x[i] * g[i];
                             t.accumulate(ia, std::move(gx));
                           },
                           "square");
}

template <typename T>
Var<T> reciprocal(Var<T> a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(map_unary(a.value(), [](T x) { return T(1) / x; }), {a},
                           [ia](Tape<T>& t, std::size_t self) {
                             const auto& g = t.grad_out(self);
                             const auto& y = t.value(self);
                             Tensor<T> gx(g.shape());
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] = -g[i] * y[i] * y[i];
                             t.accumulate(ia, std::move(gx));
                           },
                           "reciprocal");
}

template <typename T>
Var<T> relu(Var<T> a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(map_unary(a.value(), [](T x) { return x > T(0) ? x : T(0); }), {a},
                           [ia](Tape<T>& t, std::size_t self) {
                             const auto& g = t.grad_out(self);
                             const auto& x = t.value(ia);
                             Tensor<T> gx(g.shape());
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x[i] > T(0) ? g[i] : T(0);
                             t.accumulate(ia, std::move(gx));
                           },
                           "relu");
}

template <typename T>
Var<T> elu_plus_one(Var<T> a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(map_unary(a.value(), [](T x) { return x > T(0) ? x + T(1) : std::exp(x); }), {a},
                           [ia](Tape<T>& t, std::size_t self) {
                             const auto& g = t.grad_out(self);
                             const auto& x = t.value(ia);
                             const auto& y = t.value(self);
                             Tensor<T> gx(g.shape());
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x[i] > T(0) ? g[i] : g[i] * y[i];
                             t.accumulate(ia, std::move(gx));
                           },
                           "elu_plus_one");
}

template <typename T>
Var<T> log(Var<T> a, T floor) {
  const std::size_t ia = a.id;
  return tape_of(a).record(map_unary(a.value(), [floor](T x) { return std::log(std::max(x, floor)); }), {a},
                           [ia, floor](Tape<T>& t, std::size_t self) {
                             const auto& g = t.grad_out(self);
                             const auto& x = t.value(ia);
                             Tensor<T> gx(g.shape());
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x[i] > floor ? g[i] / x[i] : T(0);
                             t.accumulate(ia, std::move(gx));
                           },
                           "log");
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T x : a.value().data()) s += x;
  const std::size_t ia = a.id;
  return tape_of(a).record(Tensor<T>({1}, s), {a},
                           [ia](Tape<T>& t, std::size_t self) {
                             t.accumulate(ia, Tensor<T>(t.value(ia).shape(), t.grad_out(self)[0]));
                           },
                           "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T(1) / T(n));
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b) {
  same_tape(a, b);
  Tensor<T> y = kernels::matmul(a.value(), b.value(), transpose_a, transpose_b);
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(std::move(y), {a, b}, [ia, ib, transpose_a, transpose_b](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    // Y = op(A) op(B);  dop(A) = G op(B)^T,  dop(B) = op(A)^T G.
    if (t.requires_grad(ia)) {
      t.accumulate(ia, transpose_a ? kernels::matmul(bv, g, transpose_b, true)
                                   : kernels::matmul(g, bv, false, !transpose_b));
    }
    if (t.requires_grad(ib)) {
      t.accumulate(ib, transpose_b ? kernels::matmul(g, av, true, transpose_a)
                                   : kernels::matmul(av, g, !transpose_a, false));
    }
  }, "matmul");
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(kernels::transpose(a.value()), {a},
                           [ia](Tape<T>& t, std::size_t self) { t.accumulate(ia, kernels::transpose(t.grad_out(self))); },
                           "transpose");
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  const std::size_t ia = a.id;
  const Shape in_shape = a.shape();
  return tape_of(a).record(a.value().reshaped(std::move(shape)), {a},
                           [ia, in_shape](Tape<T>& t, std::size_t self) {
                             t.accumulate(ia, t.grad_out(self).reshaped(in_shape));
                           },
                           "reshape");
}

template <typename T>
Var<T> add_channel_bias(Var<T> map, Var<T> bias) {
  same_tape(map, bias);
  const auto& x = map.value();
  const auto& b = bias.value();
  require_rank(x, 3, "add_channel_bias");
  if (b.size() != x.dim(0)) throw ShapeError("add_channel_bias: bias size does not match channel count");
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor<T> y = x;
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    T* p = y.ptr() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
  }
  const std::size_t im = map.id, ib = bias.id;
  return tape_of(map).record(std::move(y), {map, bias}, [im, ib, plane](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    t.accumulate(im, g);
    if (t.requires_grad(ib)) {
      const std::size_t c = g.dim(0);
      Tensor<T> gb({c});
      for (std::size_t ch = 0; ch < c; ++ch) {
        T s = 0;
        const T* p = g.ptr() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        gb[ch] = s;
      }
      t.accumulate(ib, std::move(gb));
    }
  }, "add_channel_bias");
}

template <typename T>
Var<T> add_row_bias(Var<T> tokens, Var<T> bias) {
  same_tape(tokens, bias);
  const auto& x = tokens.value();
  const auto& b = bias.value();
  require_rank(x, 2, "add_row_bias");
  if (b.size() != x.dim(1)) throw ShapeError("add_row_bias: bias size does not match feature dimension");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> y = x;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] += b[j];
  }
  const std::size_t it = tokens.id, ib = bias.id;
  return tape_of(tokens).record(std::move(y), {tokens, bias}, [it, ib, n, d](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    t.accumulate(it, g);
    if (t.requires_grad(ib)) {
      Tensor<T> gb({d});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
      t.accumulate(ib, std::move(gb));
    }
  }, "add_row_bias");
}

template <typename T>
Var<T> row_scale(Var<T> tokens, Var<T> s) {
  same_tape(tokens, s);
  const auto& x = tokens.value();
  const auto& sv = s.value();
  require_rank(x, 2, "row_scale");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (sv.size() != n) throw ShapeError("row_scale: one scale per row required");
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] * sv[i];
  }
  const std::size_t it = tokens.id, is = s.id;
  return tape_of(tokens).record(std::move(y), {tokens, s}, [it, is, n, d](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    const auto& x = t.value(it);
    const auto& sv = t.value(is);
    if (t.requires_grad(it)) {
      Tensor<T> gx(g.shape());
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] = g[i * d + j] * sv[i];
      }
      t.accumulate(it, std::move(gx));
    }
    if (t.requires_grad(is)) {
      Tensor<T> gs(sv.shape());
      for (std::size_t i = 0; i < n; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j] * x[i * d + j];
        gs[i] = acc;
      }
      t.accumulate(is, std::move(gs));
    }
  }, "row_scale");
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t stride, std::size_t pad) {
  same_tape(input, kernel);
  Tensor<T> y = kernels::conv2d(input.value(), kernel.value(), stride, pad);
  const std::size_t ii = input.id, ik = kernel.id;
  return tape_of(input).record(std::move(y), {input, kernel}, [ii, ik, stride, pad](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    const auto& x = t.value(ii);
    const auto& k = t.value(ik);
    if (t.requires_grad(ii)) t.accumulate(ii, kernels::conv2d_grad_input(g, k, x.shape(), stride, pad));
    if (t.requires_grad(ik)) t.accumulate(ik, kernels::conv2d_grad_kernel(g, x, k.shape(), stride, pad));
  }, "conv2d");
}

template <typename T>
Var<T> depthwise_conv2d(Var<T> input, Var<T> kernel, std::size_t stride, std::size_t pad) {
  same_tape(input, kernel);
  Tensor<T> y = kernels::depthwise_conv2d(input.value(), kernel.value(), stride, pad);
  const std::size_t ii = input.id, ik = kernel.id;
  return tape_of(input).record(std::move(y), {input, kernel}, [ii, ik, stride, pad](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    const auto& x = t.value(ii);
    const auto& k = t.value(ik);
    if (t.requires_grad(ii)) t.accumulate(ii, kernels::depthwise_conv2d_grad_input(g, k, x.shape(), stride, pad));
    if (t.requires_grad(ik)) t.accumulate(ik, kernels::depthwise_conv2d_grad_kernel(g, x, k.shape(), stride, pad));
  }, "depthwise_conv2d");
}

template <typename T>
Var<T> maxpool2d(Var<T> input, std::size_t k, std::size_t stride) {
  auto r = kernels::maxpool2d(input.value(), k, stride);
  const std::size_t ii = input.id;
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
  return tape_of(input).record(std::move(r.values), {input}, [ii, argmax](Tape<T>& t, std::size_t self) {
    t.accumulate(ii, kernels::maxpool2d_grad(t.grad_out(self), *argmax, t.value(ii).shape()));
  }, "maxpool2d");
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const std::size_t ix = x.id;
  return tape_of(x).record(kernels::softmax(x.value(), axis), {x},
                           [ix, axis](Tape<T>& t, std::size_t self) {
                             t.accumulate(ix, kernels::softmax_grad(t.value(self), t.grad_out(self), axis));
                           },
                           "softmax");
}

template <typename T>
Var<T> masked_softmax(Var<T> x, std::size_t axis, std::vector<unsigned char> mask) {
  const std::size_t ix = x.id;
  return tape_of(x).record(kernels::softmax(x.value(), axis, &mask), {x},
                           [ix, axis](Tape<T>& t, std::size_t self) {
                             t.accumulate(ix, kernels::softmax_grad(t.value(self), t.grad_out(self), axis));
                           },
                           "masked_softmax");
}

template <typename T>
Var<T> bilinear_upsample(Var<T> input, std::size_t factor) {
  const std::size_t ii = input.id;
  return tape_of(input).record(kernels::bilinear_upsample(input.value(), factor), {input},
                               [ii, factor](Tape<T>& t, std::size_t self) {
                                 t.accumulate(ii, kernels::bilinear_upsample_grad(t.grad_out(self),
                                                                                 t.value(ii).shape(), factor));
                               },
                               "bilinear_upsample");
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const auto& xv = x.value();
  require_rank(xv, 2, "layer_norm");
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm: gamma/beta must have the feature dimension");
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(n);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.ptr() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      (*xhat)[i * d + j] = h;
      y[i * d + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return tape_of(x).record(std::move(y), {x, gamma, beta},
                           [ix, ig, ib, n, d, xhat, inv_std](Tape<T>& t, std::size_t self) {
                             const auto& g = t.grad_out(self);
                             const auto& gv = t.value(ig);
                             if (t.requires_grad(ig) || t.requires_grad(ib)) {
                               Tensor<T> gg({d}), gb({d});
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < d; ++j) {
                                   gg[j] += g[i * d + j] * (*xhat)[i * d + j];
                                   gb[j] += g[i * d + j];
                                 }
                               }
                               t.accumulate(ig, std::move(gg));
                               t.accumulate(ib, std::move(gb));
                             }
                             if (t.requires_grad(ix)) {
                               Tensor<T> gx({n, d});
                               for (std::size_t i = 0; i < n; ++i) {
                                 T m1 = 0, m2 = 0;
                                 for (std::size_t j = 0; j < d; ++j) {
                                   const T gh = g[i * d + j] * gv[j];
                                   m1 += gh;
                                   m2 += gh * (*xhat)[i * d + j];
                                 }
                                 m1 /= T(d);
                                 m2 /= T(d);
                                 for (std::size_t j = 0; j < d; ++j) {
                                   const T gh = g[i * d + j] * gv[j];
                                   gx[i * d + j] = (*inv_std)[i] * (gh - m1 - (*xhat)[i * d + j] * m2);
                                 }
                               }
                               t.accumulate(ix, std::move(gx));
                             }
                           },
                           "layer_norm");
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> mean, Var<T> var, Var<T> scale_v, Var<T> shift, T eps) {
  const auto& xv = x.value();
  require_rank(xv, 3, "batch_norm");
  const std::size_t c = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
  for (Var<T> p : {mean, var, scale_v, shift}) {
    same_tape(x, p);
    if (p.value().size() != c) throw ShapeError("batch_norm: statistics must have one entry per channel");
  }
  const auto& mv = mean.value();
  const auto& vv = var.value();
  const auto& sv = scale_v.value();
  const auto& hv = shift.value();
  Tensor<T> y(xv.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (!(vv[ch] + eps > T(0))) throw NumericError("batch_norm: variance + eps must be positive");
    const T a = sv[ch] / std::sqrt(vv[ch] + eps);
    const T b = hv[ch] - mv[ch] * a;
    const T* src = xv.ptr() + ch * plane;
    T* dst = y.ptr() + ch * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * a + b;
  }
  const std::size_t ix = x.id, im = mean.id, iv = var.id, is = scale_v.id, ih = shift.id;
  return tape_of(x).record(std::move(y), {x, mean, var, scale_v, shift},
                           [=](Tape<T>& t, std::size_t self) {
                             const auto& g = t.grad_out(self);
                             const auto& xv = t.value(ix);
                             const auto& mv = t.value(im);
                             const auto& vv = t.value(iv);
                             const auto& sv = t.value(is);
                             Tensor<T> gx(xv.shape()), gm({c}), gvar({c}), gs({c}), gh({c});
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               const T inv = T(1) / std::sqrt(vv[ch] + eps);
                               const T a = sv[ch] * inv;
                               const T* gp = g.ptr() + ch * plane;
                               const T* xp = xv.ptr() + ch * plane;
                               T sum_g = 0, sum_gx = 0;
                               for (std::size_t i = 0; i < plane; ++i) {
                                 gx[ch * plane + i] = gp[i] * a;
                                 sum_g += gp[i];
                                 sum_gx += gp[i] * (xp[i] - mv[ch]);
                               }
                               gh[ch] = sum_g;
                               gs[ch] = sum_gx * inv;
                               gm[ch] = -sum_g * a;
                               gvar[ch] = -T(0.5) * sv[ch] * sum_gx * inv * inv * inv;
                             }
                             t.accumulate(ix, std::move(gx));
                             t.accumulate(im, std::move(gm));
                             t.accumulate(iv, std::move(gvar));
                             t.accumulate(is, std::move(gs));
                             t.accumulate(ih, std::move(gh));
                           },
                           "batch_norm");
}

namespace {

struct Split {
  std::size_t outer, n, inner;
};

Split split(const Shape& s, std::size_t axis) {
  Split r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    Shape s = p.shape();
    Shape ref = parts[0].shape();
    s[axis] = ref[axis] = 0;
    if (s != ref) throw ShapeError("concat: shapes differ outside the concatenation axis");
    out_shape[axis] += p.shape()[axis];
  }
  Tensor<T> y(out_shape);
  const Split os = split(out_shape, axis);
  std::vector<std::size_t> offsets, ids, lens;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto& v = p.value();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(v.ptr() + o * len * os.inner, len * os.inner, y.ptr() + (o * os.n + off) * os.inner);
    }
    offsets.push_back(off);
    ids.push_back(p.id);
    lens.push_back(len);
    off += len;
  }
  return tape_of(parts[0]).record(std::move(y), parts, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor<T> gp(t.value(ids[k]).shape());
      for (std::size_t o = 0; o < os.outer; ++o) {
        std::copy_n(g.ptr() + (o * os.n + offsets[k]) * os.inner, lens[k] * os.inner, gp.ptr() + o * lens[k] * os.inner);
      }
      t.accumulate(ids[k], std::move(gp));
    }
  }, "concat");
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape in_shape = x.shape();
  if (axis >= in_shape.size() || begin > end || end > in_shape[axis]) throw ShapeError("slice: range out of bounds");
  Shape out_shape = in_shape;
  out_shape[axis] = end - begin;
  const Split is = split(in_shape, axis);
  const std::size_t len = end - begin;
  Tensor<T> y(out_shape);
  const auto& v = x.value();
  for (std::size_t o = 0; o < is.outer; ++o) {
    std::copy_n(v.ptr() + (o * is.n + begin) * is.inner, len * is.inner, y.ptr() + o * len * is.inner);
  }
  const std::size_t ix = x.id;
  return tape_of(x).record(std::move(y), {x}, [=](Tape<T>& t, std::size_t self) {
    Tensor<T>* gb = t.grad_buffer(ix);
    if (!gb) return;
    const auto& g = t.grad_out(self);
    for (std::size_t o = 0; o < is.outer; ++o) {
      const T* src = g.ptr() + o * len * is.inner;
      T* dst = gb->ptr() + (o * is.n + begin) * is.inner;
      for (std::size_t i = 0; i < len * is.inner; ++i) dst[i] += src[i];
    }
  }, "slice");
}

template <typename T>
Var<T> crop2d(Var<T> map, long y0, long x0, std::size_t h, std::size_t w) {
  const auto& v = map.value();
  require_rank(v, 3, "crop2d");
  const std::size_t c = v.dim(0), H = v.dim(1), W = v.dim(2);
  Tensor<T> y({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) {
      const long yy = y0 + long(i);
      if (yy < 0 || yy >= long(H)) continue;
      for (std::size_t j = 0; j < w; ++j) {
        const long xx = x0 + long(j);
        if (xx < 0 || xx >= long(W)) continue;
        y.at(ch, i, j) = v.at(ch, std::size_t(yy), std::size_t(xx));
      }
    }
  }
  const std::size_t im = map.id;
  return tape_of(map).record(std::move(y), {map}, [=](Tape<T>& t, std::size_t self) {
    Tensor<T>* gb = t.grad_buffer(im);
    if (!gb) return;
    const auto& g = t.grad_out(self);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < h; ++i) {
        const long yy = y0 + long(i);
        if (yy < 0 || yy >= long(H)) continue;
        for (std::size_t j = 0; j < w; ++j) {
          const long xx = x0 + long(j);
          if (xx < 0 || xx >= long(W)) continue;
          gb->at(ch, std::size_t(yy), std::size_t(xx)) += g.at(ch, i, j);
        }
      }
    }
  }, "crop2d");
}

template <typename T>
Var<T> gather(Var<T> x, std::vector<std::size_t> indices) {
  const auto& v = x.value();
  Tensor<T> y({indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v.size()) throw ShapeError("gather: index out of range");
    y[i] = v[indices[i]];
  }
  const std::size_t ix = x.id;
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return tape_of(x).record(std::move(y), {x}, [ix, idx](Tape<T>& t, std::size_t self) {
    Tensor<T>* gb = t.grad_buffer(ix);
    if (!gb) return;
    const auto& g = t.grad_out(self);
    for (std::size_t i = 0; i < idx->size(); ++i) (*gb)[(*idx)[i]] += g[i];
  }, "gather");
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, T scale_factor) {
  same_tape(q, k);
  same_tape(q, v);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  require_rank(qv, 2, "attention Q");
  require_rank(kv, 2, "attention K");
  require_rank(vv, 2, "attention V");
  if (qv.dim(1) != kv.dim(1)) throw ShapeError("attention: Q and K feature dimensions differ");
  if (kv.dim(0) != vv.dim(0)) throw ShapeError("attention: K and V token counts differ");
  if (heads == 0 || qv.dim(1) % heads || vv.dim(1) % heads) {
    throw ShapeError("attention: feature dimensions must divide into heads");
  }
  const std::size_t n = qv.dim(0), m = kv.dim(0), dqk = qv.dim(1) / heads, dv = vv.dim(1) / heads;
  CMapRow<T> Q(qv.ptr(), n, qv.dim(1)), K(kv.ptr(), m, kv.dim(1)), V(vv.ptr(), m, vv.dim(1));
  Tensor<T> out({n, vv.dim(1)});
  MapRow<T> O(out.ptr(), n, vv.dim(1));
  auto probs = std::make_shared<std::vector<RowMat<T>>>(heads);
  bump(op_counters().attention_score_entries, heads * n * m);
  bump(op_counters().softmax, heads);
  for (std::size_t h = 0; h < heads; ++h) {
    RowMat<T> s = scale_factor * (Q.middleCols(h * dqk, dqk) * K.middleCols(h * dqk, dqk).transpose());
    for (std::size_t i = 0; i < n; ++i) {
      auto row = s.row(i);
      const T mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
    }
    O.middleCols(h * dv, dv).noalias() = s * V.middleCols(h * dv, dv);
    (*probs)[h] = std::move(s);
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return tape_of(q).record(std::move(out), {q, k, v}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_out(self);
    const auto& qv = t.value(iq);
    const auto& kv = t.value(ik);
    const auto& vv = t.value(iv);
    CMapRow<T> Q(qv.ptr(), n, qv.dim(1)), K(kv.ptr(), m, kv.dim(1)), V(vv.ptr(), m, vv.dim(1));
    CMapRow<T> G(g.ptr(), n, vv.dim(1));
    Tensor<T> gq(qv.shape()), gk(kv.shape()), gvv(vv.shape());
    MapRow<T> GQ(gq.ptr(), n, qv.dim(1)), GK(gk.ptr(), m, kv.dim(1)), GV(gvv.ptr(), m, vv.dim(1));
    for (std::size_t h = 0; h < heads; ++h) {
      const RowMat<T>& p = (*probs)[h];
      auto gh = G.middleCols(h * dv, dv);
      GV.middleCols(h * dv, dv).noalias() = p.transpose() * gh;
      RowMat<T> dp = gh * V.middleCols(h * dv, dv).transpose();
      for (std::size_t i = 0; i < n; ++i) {
        const T dot = (dp.row(i).array() * p.row(i).array()).sum();
        dp.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
      }
      GQ.middleCols(h * dqk, dqk).noalias() = scale_factor * (dp * K.middleCols(h * dqk, dqk));
      GK.middleCols(h * dqk, dqk).noalias() = scale_factor * (dp.transpose() * Q.middleCols(h * dqk, dqk));
    }
    t.accumulate(iq, std::move(gq));
    t.accumulate(ik, std::move(gk));
    t.accumulate(iv, std::move(gvv));
  }, "attention");
}

template <typename T>
Var<T> linear_attention(Var<T> q, Var<T> k, Var<T> v, kernels::LinearAttentionForm form) {
  same_tape(q, k);
  same_tape(q, v);
  require_rank(q.value(), 2, "linear_attention Q");
  require_rank(k.value(), 2, "linear_attention K");
  require_rank(v.value(), 2, "linear_attention V");
  if (q.dim(1) != k.dim(1)) throw ShapeError("linear_attention: Q and K feature dimensions differ");
  if (k.dim(0) != v.dim(0)) throw ShapeError("linear_attention: K and V token counts differ");
  Var<T> fq = elu_plus_one(q);
  Var<T> fk = elu_plus_one(k);
  if (form == kernels::LinearAttentionForm::Literal) return matmul(fq, matmul(fk, elu_plus_one(v), true, false));
  Var<T> num = matmul(fq, matmul(fk, v, true, false));
  Var<T> ones = tape_of(q).input(Tensor<T>({1, k.dim(0)}, T(1)));
  Var<T> ksum = matmul(ones, fk);                      // [1, d]
  Var<T> z = matmul(fq, ksum, false, true);            // [n, 1]
  return row_scale(num, reciprocal(reshape(z, {q.dim(0)})));
}

template <typename T>
Var<T> map_to_tokens(Var<T> map) {
  require_rank(map.value(), 3, "map_to_tokens");
  const std::size_t c = map.dim(0), hw = map.dim(1) * map.dim(2);
  return transpose(reshape(map, {c, hw}));
}

template <typename T>
Var<T> tokens_to_map(Var<T> tokens, std::size_t h, std::size_t w) {
  require_rank(tokens.value(), 2, "tokens_to_map");
  if (tokens.dim(0) != h * w) throw ShapeError("tokens_to_map: token count does not match grid");
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

#define SDM_INSTANTIATE_AG(T)                                                                      \
  template Var<T> add(Var<T>, Var<T>);                                                             \
  template Var<T> sub(Var<T>, Var<T>);                                                             \
  template Var<T> mul(Var<T>, Var<T>);                                                             \
  template Var<T> scale(Var<T>, T);                                                                \
  template Var<T> add_scalar(Var<T>, T);                                                           \
  template Var<T> square(Var<T>);                                                                  \
  template Var<T> reciprocal(Var<T>);                                                              \
  template Var<T> relu(Var<T>);                                                                    \
  template Var<T> elu_plus_one(Var<T>);                                                            \
  template Var<T> log(Var<T>, T);                                                                  \
  template Var<T> sum(Var<T>);                                                                     \
  template Var<T> mean(Var<T>);                                                                    \
  template Var<T> matmul(Var<T>, Var<T>, bool, bool);                                              \
  template Var<T> transpose(Var<T>);                                                               \
  template Var<T> reshape(Var<T>, Shape);                                                          \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                                                \
  template Var<T> add_row_bias(Var<T>, Var<T>);                                                    \
  template Var<T> row_scale(Var<T>, Var<T>);                                                       \
  template Var<T> conv2d(Var<T>, Var<T>, std::size_t, std::size_t);                                \
  template Var<T> depthwise_conv2d(Var<T>, Var<T>, std::size_t, std::size_t);                      \
  template Var<T> maxpool2d(Var<T>, std::size_t, std::size_t);                                     \
  template Var<T> softmax(Var<T>, std::size_t);                                                    \
  template Var<T> masked_softmax(Var<T>, std::size_t, std::vector<unsigned char>);                 \
  template Var<T> bilinear_upsample(Var<T>, std::size_t);                                          \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                           \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, T);                           \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                 \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                            \
  template Var<T> crop2d(Var<T>, long, long, std::size_t, std::size_t);                            \
  template Var<T> gather(Var<T>, std::vector<std::size_t>);                                        \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, std::size_t, T);                               \
  template Var<T> linear_attention(Var<T>, Var<T>, Var<T>, kernels::LinearAttentionForm);          \
  template Var<T> map_to_tokens(Var<T>);                                                           \
  template Var<T> tokens_to_map(Var<T>, std::size_t, std::size_t);

SDM_INSTANTIATE_AG(float)
SDM_INSTANTIATE_AG(double)

}  // namespace ag
}  // namespace sdm
