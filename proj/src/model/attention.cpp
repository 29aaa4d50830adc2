#include "sdm/model/attention.hpp"

#include <cmath>
#include <memory>

#include "sdm/core/counters.hpp"

namespace sdm {

std::vector<double> rope_frequencies(std::size_t d) {
  if (d == 0 || d % 4) throw ShapeError("rope: feature dimension must be a positive multiple of 4");
  std::vector<double> theta(d / 4);
  for (std::size_t k = 1; k <= d / 4; ++k) theta[k - 1] = 1.0 / std::pow(10000.0, 4.0 * double(k) / double(d));
  return theta;
}

template <typename T>
Tensor<T> rope_encode(const Tensor<T>& tokens, const std::vector<Position>& positions, std::size_t block_dim,
                      bool inverse) {
  require_rank(tokens, 2, "rope_encode");
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  if (block_dim == 0) block_dim = d;
  if (d % block_dim) throw ShapeError("rope: block dimension must divide the feature dimension");
  if (positions.size() != n) throw ShapeError("rope: one position per token required");
  const auto theta = rope_frequencies(block_dim);
  bump(op_counters().rope_applications);
  const double sign = inverse ? -1.0 : 1.0;
  Tensor<T> out(tokens.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = tokens.ptr() + i * d;
    T* dst = out.ptr() + i * d;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double ax = sign * theta[k] * positions[i].x, ay = sign * theta[k] * positions[i].y;
      const double cx = std::cos(ax), sx = std::sin(ax), cy = std::cos(ay), sy = std::sin(ay);
      for (std::size_t base = 4 * k; base < d; base += block_dim) {
        const double a = src[base], b = src[base + 1], c = src[base + 2], e = src[base + 3];
        dst[base] = T(a * cx - b * sx);
        dst[base + 1] = T(a * sx + b * cx);
        dst[base + 2] = T(c * cy - e * sy);
        dst[base + 3] = T(c * sy + e * cy);
      }
    }
  }
  return out;
}

namespace ag {
template <typename T>
Var<T> rope(Var<T> tokens, const std::vector<Position>& positions, std::size_t block_dim) {
  const std::size_t it = tokens.id;
  auto pos = std::make_shared<std::vector<Position>>(positions);
  return tokens.tape->record(rope_encode(tokens.value(), positions, block_dim), {tokens},
                             [it, pos, block_dim](Tape<T>& t, std::size_t self) {
                               t.accumulate(it, rope_encode(t.grad_out(self), *pos, block_dim, true));
                             },
                             "rope");
}
}  // namespace ag

std::size_t TransformConfig::head_count() const { return heads ? heads : std::max<std::size_t>(1, d_model / 32); }

void TransformConfig::validate() const {
  if (d_model == 0 || d_model % 4) throw UsageError("d_model must be a positive multiple of 4");
  if (agg_range == 0) throw UsageError("aggregation range must be >= 1");
  const std::size_t h = head_count();
  if (d_model % h || (d_model / h) % 4) throw UsageError("head dimension must be a multiple of 4");
  if (ffn_expansion == 0) throw UsageError("feed-forward expansion must be >= 1");
}

std::vector<Position> aggregated_positions(std::size_t h, std::size_t w, std::size_t s, Position origin) {
  std::vector<Position> out;
  out.reserve(h * w);
  const double half = (double(s) - 1.0) / 2.0;
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) {
      out.push_back({origin.x + double(v * s) + half, origin.y + double(u * s) + half});
    }
  }
  return out;
}

std::string attention_prefix(std::size_t layer, AttentionKind kind) {
  return "transform.layer" + std::to_string(layer) + (kind == AttentionKind::Self ? ".self" : ".cross");
}

template <typename T>
void init_transform(ParamSet<T>& params, const TransformConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model, s = cfg.agg_range, e = cfg.ffn_expansion * d;
  std::normal_distribution<double> jitter(0.0, 0.1 / double(s * s));
  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    for (auto kind : {AttentionKind::Self, AttentionKind::Cross}) {
      const std::string p = attention_prefix(layer, kind);
      Tensor<T> agg({d, s, s});
      for (auto& v : agg.storage()) v = T(1.0 / double(s * s) + jitter(rng));
      params.add(p + ".agg_conv.kernel", std::move(agg));
      params.add(p + ".agg_conv.bias", Tensor<T>({d}));
      params.add(p + ".norm.gamma", Tensor<T>({d}, T(1)));
      params.add(p + ".norm.beta", Tensor<T>({d}));
      params.add(p + ".q_proj.weight", he_normal<T>({d, d}, d, rng, 1.0));
      params.add(p + ".k_proj.weight", he_normal<T>({d, d}, d, rng, 1.0));
      params.add(p + ".v_proj.weight", he_normal<T>({d, d}, d, rng, 1.0));
      params.add(p + ".out_proj.weight", he_normal<T>({2 * d, d}, 2 * d, rng, 0.05));
      params.add(p + ".ffn.norm.gamma", Tensor<T>({d}, T(1)));
      params.add(p + ".ffn.norm.beta", Tensor<T>({d}));
      params.add(p + ".ffn.fc1.weight", he_normal<T>({d, e}, d, rng));
      params.add(p + ".ffn.fc1.bias", Tensor<T>({e}));
      params.add(p + ".ffn.fc2.weight", he_normal<T>({e, d}, e, rng, 0.05));
      params.add(p + ".ffn.fc2.bias", Tensor<T>({d}));
    }
  }
}

template <typename T>
AggregatedTokens<T> aggregate_tokens(Var<T> target, Var<T> source, Var<T> agg_kernel, Var<T> agg_bias,
                                     std::size_t s) {
  require_rank(target.value(), 3, "aggregate_tokens target");
  require_rank(source.value(), 3, "aggregate_tokens source");
  if (target.dim(1) % s || target.dim(2) % s || source.dim(1) % s || source.dim(2) % s) {
    throw ShapeError("aggregate_tokens: grid " + to_string(target.shape()) + " / " + to_string(source.shape()) +
                     " is not divisible by the aggregation range " + std::to_string(s));
  }
  AggregatedTokens<T> out;
  Var<T> q = ag::add_channel_bias(ag::depthwise_conv2d(target, agg_kernel, s, 0), agg_bias);
  out.grid_h = q.dim(1);
  out.grid_w = q.dim(2);
  out.queries = ag::map_to_tokens(q);
  out.kv = ag::map_to_tokens(s == 1 ? source : ag::maxpool2d(source, s, s));
  return out;
}

namespace {

template <typename T>
Var<T> norm_map(Binder<T>& bind, const std::string& prefix, Var<T> map) {
  const std::size_t h = map.dim(1), w = map.dim(2);
  Var<T> t = ag::layer_norm(ag::map_to_tokens(map), bind(prefix + ".gamma"), bind(prefix + ".beta"));
  return ag::tokens_to_map(t, h, w);
}

}  // namespace

template <typename T>
Var<T> aggregated_attention(Binder<T>& bind, const std::string& p, Var<T> target, Var<T> source, AttentionKind kind,
                            const TransformConfig& cfg, Position origin) {
  if (target.dim(0) != cfg.d_model || source.dim(0) != cfg.d_model) {
    throw ShapeError("attention block: feature maps must have d_model channels");
  }
  const std::size_t s = cfg.agg_range;
  Var<T> tn = norm_map(bind, p + ".norm", target);
  Var<T> sn = kind == AttentionKind::Self && source.id == target.id ? tn : norm_map(bind, p + ".norm", source);
  auto tok = aggregate_tokens(tn, sn, bind(p + ".agg_conv.kernel"), bind(p + ".agg_conv.bias"), s);
  Var<T> q = ag::matmul(tok.queries, bind(p + ".q_proj.weight"));
  Var<T> k = ag::matmul(tok.kv, bind(p + ".k_proj.weight"));
  Var<T> v = ag::matmul(tok.kv, bind(p + ".v_proj.weight"));
  const std::size_t heads = cfg.head_count(), head_dim = cfg.d_model / heads;
  if (kind == AttentionKind::Self) {
    const auto qpos = aggregated_positions(tok.grid_h, tok.grid_w, s, origin);
    const auto kpos = aggregated_positions(source.dim(1) / s, source.dim(2) / s, s, origin);
    q = ag::rope(q, qpos, head_dim);
    k = ag::rope(k, kpos, head_dim);
  }
  Var<T> att = ag::attention(q, k, v, heads, T(1.0 / std::sqrt(double(head_dim))));
  return ag::tokens_to_map(att, tok.grid_h, tok.grid_w);
}

template <typename T>
Var<T> agg_attention_block(Binder<T>& bind, const std::string& p, Var<T> target, Var<T> source, AttentionKind kind,
                           const TransformConfig& cfg, Position origin) {
  const std::size_t h = target.dim(1), w = target.dim(2);
  Var<T> msg = aggregated_attention(bind, p, target, source, kind, cfg, origin);
  Var<T> up = ag::bilinear_upsample(msg, cfg.agg_range);
  Var<T> merged = ag::matmul(ag::map_to_tokens(ag::concat<T>({target, up}, 0)), bind(p + ".out_proj.weight"));
  Var<T> y = ag::add(ag::map_to_tokens(target), merged);
  Var<T> f = ag::layer_norm(y, bind(p + ".ffn.norm.gamma"), bind(p + ".ffn.norm.beta"));
  f = ag::relu(ag::add_row_bias(ag::matmul(f, bind(p + ".ffn.fc1.weight")), bind(p + ".ffn.fc1.bias")));
  f = ag::add_row_bias(ag::matmul(f, bind(p + ".ffn.fc2.weight")), bind(p + ".ffn.fc2.bias"));
  return ag::tokens_to_map(ag::add(y, f), h, w);
}

template <typename T>
std::pair<Var<T>, Var<T>> transform(Binder<T>& bind, Var<T> a, Var<T> b, const TransformConfig& cfg) {
  if (a.dim(0) != b.dim(0)) throw ShapeError("transform: feature maps have different channel counts");
  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string ps = attention_prefix(layer, AttentionKind::Self);
    const std::string pc = attention_prefix(layer, AttentionKind::Cross);
    a = agg_attention_block(bind, ps, a, a, AttentionKind::Self, cfg);
    b = agg_attention_block(bind, ps, b, b, AttentionKind::Self, cfg);
    Var<T> a2 = agg_attention_block(bind, pc, a, b, AttentionKind::Cross, cfg);
    Var<T> b2 = agg_attention_block(bind, pc, b, a, AttentionKind::Cross, cfg);
    a = a2;
    b = b2;
  }
  return {a, b};
}

#define SDM_INSTANTIATE_ATTENTION(T)                                                                             \
  template Tensor<T> rope_encode(const Tensor<T>&, const std::vector<Position>&, std::size_t, bool);             \
  template Var<T> ag::rope(Var<T>, const std::vector<Position>&, std::size_t);                                   \
  template void init_transform(ParamSet<T>&, const TransformConfig&, std::mt19937_64&);                          \
  template AggregatedTokens<T> aggregate_tokens(Var<T>, Var<T>, Var<T>, Var<T>, std::size_t);                    \
  template Var<T> aggregated_attention(Binder<T>&, const std::string&, Var<T>, Var<T>, AttentionKind,            \
                                       const TransformConfig&, Position);                                        \
  template Var<T> agg_attention_block(Binder<T>&, const std::string&, Var<T>, Var<T>, AttentionKind,             \
                                      const TransformConfig&, Position);                                         \
  template std::pair<Var<T>, Var<T>> transform(Binder<T>&, Var<T>, Var<T>, const TransformConfig&);

SDM_INSTANTIATE_ATTENTION(float)
SDM_INSTANTIATE_ATTENTION(double)

}  // namespace sdm
