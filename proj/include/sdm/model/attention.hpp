#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sdm/core/autodiff.hpp"
#include "sdm/model/params.hpp"

namespace sdm {

struct Position {
  double x = 0, y = 0;
};

/// Rotation frequencies theta_k = 1 / 10000^(4k/d), k = 1..d/4.
std::vector<double> rope_frequencies(std::size_t d);

/// 2D rotary encoding of tokens [n, d]. Channels are processed in blocks of
/// `block_dim` (the head dimension); inside a block, sub-block k covers
/// channels [4(k-1), 4k): its first pair rotates by theta_k * x, its second
/// by theta_k * y. `inverse` applies the transposed rotation.
template <typename T>
Tensor<T> rope_encode(const Tensor<T>& tokens, const std::vector<Position>& positions, std::size_t block_dim = 0,
                      bool inverse = false);

namespace ag {
template <typename T>
Var<T> rope(Var<T> tokens, const std::vector<Position>& positions, std::size_t block_dim);
}

enum class AttentionKind { Self, Cross };

struct TransformConfig {
  std::size_t d_model = 256;
  std::size_t n_layers = 4;
  std::size_t agg_range = 4;  // s
  std::size_t heads = 0;      // 0: one head per 32 channels
  std::size_t ffn_expansion = 2;

  std::size_t head_count() const;
  void validate() const;
};

/// Positions (coarse-grid units) of the tokens of an aggregated h x w grid:
/// token (u, v) covers cells [u*s, u*s + s) and sits at their center.
std::vector<Position> aggregated_positions(std::size_t h, std::size_t w, std::size_t s, Position origin = {});

template <typename T>
void init_transform(ParamSet<T>& params, const TransformConfig& cfg, std::mt19937_64& rng);

std::string attention_prefix(std::size_t layer, AttentionKind kind);

template <typename T>
struct AggregatedTokens {
  Var<T> queries;  // [h*w/s^2, d] from the strided depthwise conv
  Var<T> kv;       // [h*w/s^2, d] from max-pooling
  std::size_t grid_h, grid_w;
};

/// Token reduction: strided depthwise s x s conv of `target` for queries,
/// s x s max-pool of `source` for keys/values. `agg_kernel` is [d, s, s].
template <typename T>
AggregatedTokens<T> aggregate_tokens(Var<T> target, Var<T> source, Var<T> agg_kernel, Var<T> agg_bias, std::size_t s);

/// Attention of aggregated target queries over aggregated source tokens,
/// returned as a map at aggregated resolution [d, h/s, w/s]. RoPE on q and k
/// only for self-attention; `origin` offsets every position (coarse units).
template <typename T>
Var<T> aggregated_attention(Binder<T>& bind, const std::string& prefix, Var<T> target, Var<T> source,
                            AttentionKind kind, const TransformConfig& cfg, Position origin = {});

/// Full block: aggregated attention, bilinear upsample by s, concat with the
/// target and project, residual, then pre-norm feed-forward with residual.
template <typename T>
Var<T> agg_attention_block(Binder<T>& bind, const std::string& prefix, Var<T> target, Var<T> source,
                           AttentionKind kind, const TransformConfig& cfg, Position origin = {});

/// N rounds of self(A), self(B), cross(A<-B), cross(B<-A). Both cross updates
/// read the maps from before the round's cross step.
template <typename T>
std::pair<Var<T>, Var<T>> transform(Binder<T>& bind, Var<T> a, Var<T> b, const TransformConfig& cfg);

}  // namespace sdm
