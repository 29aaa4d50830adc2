#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "sdm/core/kernels.hpp"
#include "sdm/core/tensor.hpp"

namespace sdm {

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Reverse-mode differentiation record. Nodes are appended in evaluation
/// order, which is a topological order, so the backward sweep walks ids
/// downwards and visits each node once.
///
/// With grad disabled the tape only stores values; no closures are kept.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Constant input; never receives a gradient.
  Var<T> input(Tensor<T> value) { return push(std::move(value), nullptr, false, nullptr, "input"); }
  /// Owned leaf that receives a gradient.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), nullptr, grad_enabled_, nullptr, "variable"); }
  /// Leaf borrowing external storage (model parameters). `value` must outlive the tape.
  Var<T> parameter(const Tensor<T>& value, bool requires_grad = true) {
    return push(Tensor<T>(), &value, grad_enabled_ && requires_grad, nullptr, "parameter");
  }

  /// Appends the result of an op. `fn` runs during backward if any input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn, const char* op) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var<T>& v : inputs) needs = needs || requires_grad(v.id);
    }
    return record_impl(std::move(value), needs, std::move(fn), op);
  }
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn, const char* op) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var<T>& v : inputs) needs = needs || requires_grad(v.id);
    }
    return record_impl(std::move(value), needs, std::move(fn), op);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient flowing into node `id` (valid inside a Backward callback).
  const Tensor<T>& grad_out(std::size_t id) const { return grads_.at(id); }
  /// Adds `g` to the gradient of `id` if that node takes gradients.
  void accumulate(std::size_t id, const Tensor<T>& g);
  void accumulate(std::size_t id, Tensor<T>&& g);
  /// Zero-initialised gradient buffer for scatter-style accumulation, or
  /// nullptr when `id` takes no gradient.
  Tensor<T>* grad_buffer(std::size_t id);

  /// Runs the backward sweep from a scalar node.
  void backward(Var<T> loss);
  /// Gradient of a node after backward(); nullptr if none reached it.
  const Tensor<T>* grad(Var<T> v) const {
    if (v.id >= grads_.size() || grads_[v.id].empty()) return nullptr;
    return &grads_[v.id];
  }

  /// Reject non-finite op results (default on).
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> value, const Tensor<T>* external, bool requires_grad, Backward fn, const char*) {
    nodes_.push_back(Node{std::move(value), external, requires_grad, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }
  Var<T> record_impl(Tensor<T> value, bool needs, Backward fn, const char* op) {
    if (check_finite_ && !value.all_finite()) throw NumericError(std::string("non-finite result in ") + op);
    return push(std::move(value), nullptr, needs, needs ? std::move(fn) : Backward{}, op);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool grad_enabled_ = true;
  bool check_finite_ = true;
};

/// Differentiable operations. Each forwards through sdm::kernels and records
/// its vector-Jacobian product.
namespace ag {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
template <typename T> Var<T> square(Var<T> a);
template <typename T> Var<T> reciprocal(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
/// elu(x) + 1, the positive feature map of linear attention.
template <typename T> Var<T> elu_plus_one(Var<T> a);
/// log(max(x, floor)); gradient is zero where the floor is active.
template <typename T> Var<T> log(Var<T> a, T floor = T(0));
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a = false, bool transpose_b = false);
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

/// map [C, H, W] + bias [C].
template <typename T> Var<T> add_channel_bias(Var<T> map, Var<T> bias);
/// tokens [n, d] + bias [d].
template <typename T> Var<T> add_row_bias(Var<T> tokens, Var<T> bias);
/// tokens [n, d] scaled per row by s [n].
template <typename T> Var<T> row_scale(Var<T> tokens, Var<T> s);

template <typename T> Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t stride, std::size_t pad);
template <typename T> Var<T> depthwise_conv2d(Var<T> input, Var<T> kernel, std::size_t stride, std::size_t pad);
template <typename T> Var<T> maxpool2d(Var<T> input, std::size_t k, std::size_t stride);
template <typename T> Var<T> softmax(Var<T> x, std::size_t axis);
template <typename T> Var<T> masked_softmax(Var<T> x, std::size_t axis, std::vector<unsigned char> mask);
template <typename T> Var<T> bilinear_upsample(Var<T> input, std::size_t factor);

/// Per-row normalisation of tokens [n, d] with affine gamma/beta [d].
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
/// Channel-wise (x - mean) / sqrt(var + eps) * scale + shift on maps [C, H, W], using
/// stored statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> mean, Var<T> var, Var<T> scale, Var<T> shift, T eps);

template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end);
/// Window [h, w] of a map [C, H, W] at top-left (y0, x0); outside cells read zero.
template <typename T> Var<T> crop2d(Var<T> map, long y0, long x0, std::size_t h, std::size_t w);
/// Flat gather -> [indices.size()].
template <typename T> Var<T> gather(Var<T> x, std::vector<std::size_t> indices);

/// Multi-head scaled dot-product attention, heads split along feature columns.
template <typename T> Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, T scale);
template <typename T>
Var<T> linear_attention(Var<T> q, Var<T> k, Var<T> v,
                        kernels::LinearAttentionForm form = kernels::LinearAttentionForm::Normalized);

/// [C, H, W] -> [H*W, C] and back.
template <typename T> Var<T> map_to_tokens(Var<T> map);
template <typename T> Var<T> tokens_to_map(Var<T> tokens, std::size_t h, std::size_t w);

}  // namespace ag
}  // namespace sdm
