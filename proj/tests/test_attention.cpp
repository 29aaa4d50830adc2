#include <doctest.h>

#include <complex>

#include "sdm/core/counters.hpp"
#include "sdm/core/kernels.hpp"
#include "sdm/model/attention.hpp"
#include "support/test_support.hpp"

using namespace sdm;
using sdm::testing::max_abs_diff;
using sdm::testing::random_tensor;

namespace {

TransformConfig tiny_transform(std::size_t s = 2) {
  TransformConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.agg_range = s;
  c.heads = 2;
  return c;
}

/// Perturbs every parameter so no block starts near the identity.
void shake(ParamSet<double>& params, std::mt19937_64& rng, double amount = 0.3) {
  std::normal_distribution<double> n(0.0, amount);
  for (auto& [name, e] : params.entries()) {
    for (auto& v : e.value.storage()) v += n(rng);
  }
}

using Mat = std::vector<std::vector<double>>;

Mat tokens_of(const Tensor<double>& map) {
  const std::size_t d = map.dim(0), h = map.dim(1), w = map.dim(2);
  Mat out(h * w, std::vector<double>(d));
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t i = 0; i < h * w; ++i) out[i][c] = map[c * h * w + i];
  }
  return out;
}

Mat layer_norm_ref(const Mat& x, const Tensor<double>& g, const Tensor<double>& b) {
  Mat out = x;
  for (auto& row : out) {
    double m = 0, v = 0;
    for (double e : row) m += e;
    m /= row.size();
    for (double e : row) v += (e - m) * (e - m);
    v /= row.size();
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - m) / std::sqrt(v + 1e-5) * g[c] + b[c];
  }
  return out;
}

Mat project_ref(const Mat& x, const Tensor<double>& w) {
  Mat out(x.size(), std::vector<double>(w.dim(1), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t o = 0; o < w.dim(1); ++o) {
      for (std::size_t c = 0; c < w.dim(0); ++c) out[i][o] += x[i][c] * w[c * w.dim(1) + o];
    }
  }
  return out;
}

/// Rotates channel pairs as complex numbers: in every head block, sub-block k
/// (channels 4k..4k+3) turns its first pair by theta_k * x and its second by theta_k * y.
void rope_ref(Mat& x, const std::vector<Position>& pos, std::size_t head_dim) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t c = 0; c < x[i].size(); c += 2) {
      const std::size_t local = c % head_dim, k = local / 4 + 1;
      const double theta = std::pow(10000.0, -4.0 * double(k) / double(head_dim));
      const double angle = theta * (local % 4 == 0 ? pos[i].x : pos[i].y);
      const std::complex<double> z = std::complex<double>(x[i][c], x[i][c + 1]) * std::polar(1.0, angle);
      x[i][c] = z.real();
      x[i][c + 1] = z.imag();
    }
  }
}

/// Direct loop implementation of the aggregated attention message at reduced resolution.
Tensor<double> aggregated_reference(const ParamSet<double>& p, const std::string& pre, const Tensor<double>& target,
                                    const Tensor<double>& source, bool self, const TransformConfig& cfg) {
  const std::size_t d = cfg.d_model, s = cfg.agg_range, heads = cfg.head_count(), hd = d / heads;
  const Mat tn = layer_norm_ref(tokens_of(target), p.get(pre + ".norm.gamma"), p.get(pre + ".norm.beta"));
  const Mat sn = layer_norm_ref(tokens_of(source), p.get(pre + ".norm.gamma"), p.get(pre + ".norm.beta"));
  const std::size_t th = target.dim(1), tw = target.dim(2), sh = source.dim(1), sw = source.dim(2);
  const std::size_t qh = th / s, qw = tw / s, kh = sh / s, kw = sw / s;
  const auto& kern = p.get(pre + ".agg_conv.kernel");
  const auto& bias = p.get(pre + ".agg_conv.bias");
  Mat q(qh * qw, std::vector<double>(d)), kv(kh * kw, std::vector<double>(d, -1e300));
  for (std::size_t u = 0; u < qh; ++u) {
    for (std::size_t v = 0; v < qw; ++v) {
      for (std::size_t c = 0; c < d; ++c) {
        double acc = bias[c];
        for (std::size_t dy = 0; dy < s; ++dy) {
          for (std::size_t dx = 0; dx < s; ++dx) acc += kern[(c * s + dy) * s + dx] * tn[(u * s + dy) * tw + v * s + dx][c];
        }
        q[u * qw + v][c] = acc;
      }
    }
  }
  for (std::size_t u = 0; u < kh; ++u) {
    for (std::size_t v = 0; v < kw; ++v) {
      for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t dy = 0; dy < s; ++dy) {
          for (std::size_t dx = 0; dx < s; ++dx) {
            kv[u * kw + v][c] = std::max(kv[u * kw + v][c], sn[(u * s + dy) * sw + v * s + dx][c]);
          }
        }
      }
    }
  }
  Mat Q = project_ref(q, p.get(pre + ".q_proj.weight"));
  Mat K = project_ref(kv, p.get(pre + ".k_proj.weight"));
  const Mat V = project_ref(kv, p.get(pre + ".v_proj.weight"));
  if (self) {
    auto positions = [s](std::size_t h, std::size_t w) {
      std::vector<Position> out;
      for (std::size_t u = 0; u < h; ++u) {
        for (std::size_t v = 0; v < w; ++v) out.push_back({v * s + (s - 1) / 2.0, u * s + (s - 1) / 2.0});
      }
      return out;
    };
    rope_ref(Q, positions(qh, qw), hd);
    rope_ref(K, positions(kh, kw), hd);
  }
  Tensor<double> out({d, qh, qw});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < Q.size(); ++i) {
      std::vector<double> sc(K.size());
      double mx = -1e300, z = 0;
      for (std::size_t j = 0; j < K.size(); ++j) {
        double dot = 0;
        for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) dot += Q[i][c] * K[j][c];
        sc[j] = dot / std::sqrt(double(hd));
        mx = std::max(mx, sc[j]);
      }
      for (auto& e : sc) z += (e = std::exp(e - mx));
      for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) {
        double acc = 0;
        for (std::size_t j = 0; j < K.size(); ++j) acc += sc[j] / z * V[j][c];
        out[c * qh * qw + i] = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("rope frequencies") {
  const auto t = rope_frequencies(8);
  REQUIRE(t.size() == 2);
  CHECK(t[0] == doctest::Approx(0.01).epsilon(1e-14));
  CHECK(t[1] == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK_THROWS_AS(rope_frequencies(6), ShapeError);
}

TEST_CASE("rope matches a complex-rotation reference and inverts") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-20, 20);
  const auto x = random_tensor<double>({5, 16}, rng);
  std::vector<Position> pos;
  for (int i = 0; i < 5; ++i) pos.push_back({u(rng), u(rng)});
  for (std::size_t block : {8u, 16u}) {
    const auto y = rope_encode(x, pos, block);
    Mat ref = tokens_of(Tensor<double>({16, 5, 1}, [&] {
      std::vector<double> t(80);
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 16; ++c) t[c * 5 + i] = x[i * 16 + c];
      return t;
    }()));
    rope_ref(ref, pos, block);
    double err = 0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 16; ++c) err = std::max(err, std::abs(ref[i][c] - y[i * 16 + c]));
    CHECK(err < 1e-12);
    CHECK(max_abs_diff(rope_encode(y, pos, block, true), x) < 1e-12);
  }
}

TEST_CASE("rope scores depend only on relative position") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = random_tensor<double>({1, 32}, rng), k = random_tensor<double>({1, 32}, rng);
    const Position pq{u(rng), u(rng)}, pk{u(rng), u(rng)}, shift{u(rng), u(rng)};
    auto score = [&](Position a, Position b) {
      const auto rq = rope_encode(q, {a}, 32), rk = rope_encode(k, {b}, 32);
      double s = 0;
      for (std::size_t c = 0; c < 32; ++c) s += rq[c] * rk[c];
      return s;
    };
    CHECK(score(pq, pk) == doctest::Approx(score({pq.x + shift.x, pq.y + shift.y}, {pk.x + shift.x, pk.y + shift.y}))
                               .epsilon(1e-9));
  }
}

TEST_CASE("aggregated token positions sit at block centers") {
  const auto p = aggregated_positions(2, 3, 4, {1, 2});
  REQUIRE(p.size() == 6);
  CHECK(p[0].x == 2.5);
  CHECK(p[0].y == 3.5);
  CHECK(p[2].x == 10.5);
  CHECK(p[5].y == 7.5);
}

TEST_CASE("token reduction: strided depthwise queries, max-pooled keys") {
  std::mt19937_64 rng(2);
  Tape<double> tape(false);
  const auto t = random_tensor<double>({3, 8, 4}, rng), s = random_tensor<double>({3, 4, 8}, rng);
  const auto k = random_tensor<double>({3, 2, 2}, rng), b = random_tensor<double>({3}, rng);
  const auto tok = aggregate_tokens(tape.input(t), tape.input(s), tape.input(k), tape.input(b), 2);
  CHECK(tok.grid_h == 4);
  CHECK(tok.grid_w == 2);
  CHECK(tok.queries.shape() == Shape{8, 3});
  CHECK(tok.kv.shape() == Shape{8, 3});
  // query (u=1, v=1), channel 2; key (u=1, v=3), channel 0
  double q = b[2];
  for (std::size_t dy = 0; dy < 2; ++dy)
    for (std::size_t dx = 0; dx < 2; ++dx) q += k.at(2, dy, dx) * t.at(2, 2 + dy, 2 + dx);
  CHECK(tok.queries.value()[3 * 3 + 2] == doctest::Approx(q).epsilon(1e-14));
  const double m = std::max({s.at(0, 2, 6), s.at(0, 2, 7), s.at(0, 3, 6), s.at(0, 3, 7)});
  CHECK(tok.kv.value()[7 * 3 + 0] == m);
  CHECK_THROWS_AS(aggregate_tokens(tape.input(t), tape.input(s), tape.input(k), tape.input(b), 3), ShapeError);
}

TEST_CASE("aggregated attention matches a direct-loop reference") {
  for (std::size_t s : {1u, 2u, 4u}) {
    for (auto kind : {AttentionKind::Self, AttentionKind::Cross}) {
      std::mt19937_64 rng(s * 7 + (kind == AttentionKind::Self));
      const TransformConfig cfg = tiny_transform(s);
      ParamSet<double> params;
      init_transform(params, cfg, rng);
      shake(params, rng);
      const auto a = random_tensor<double>({16, 8, 8}, rng);
      const auto b = random_tensor<double>({16, 4, 12}, rng);
      const bool self = kind == AttentionKind::Self;
      const std::string pre = attention_prefix(0, kind);
      Tape<double> tape(false);
      Binder<double> bind(tape, params);
      Var<double> va = tape.input(a);
      const auto got = aggregated_attention(bind, pre, va, self ? va : tape.input(b), kind, cfg).value();
      const auto ref = aggregated_reference(params, pre, a, self ? a : b, self, cfg);
      INFO("s=" << s << " self=" << self);
      CHECK(got.shape() == ref.shape());
      CHECK(max_abs_diff(got, ref) < 1e-10);
    }
  }
}

TEST_CASE("attention materializes (n / s^2)^2 score entries per head") {
  std::mt19937_64 rng(1);
  TransformConfig cfg = tiny_transform(4);
  ParamSet<float> params;
  init_transform(params, cfg, rng);
  Tape<float> tape(false);
  Binder<float> bind(tape, params);
  Var<float> x = tape.input(random_tensor<float>({16, 16, 16}, rng));
  op_counters().reset();
  aggregated_attention(bind, attention_prefix(0, AttentionKind::Self), x, x, AttentionKind::Self, cfg);
  CHECK(op_counters().attention_score_entries == 2u * 16u * 16u);
  CHECK(op_counters().rope_applications == 2u);
  op_counters().reset();
  aggregated_attention(bind, attention_prefix(0, AttentionKind::Cross), x, x, AttentionKind::Cross, cfg);
  CHECK(op_counters().rope_applications == 0u);
}

TEST_CASE("block with zero output projection and zero feed-forward is the identity") {
  std::mt19937_64 rng(6);
  const TransformConfig cfg = tiny_transform(2);
  ParamSet<double> params;
  init_transform(params, cfg, rng);
  const std::string pre = attention_prefix(0, AttentionKind::Self);
  params.get(pre + ".out_proj.weight").fill(0);
  params.get(pre + ".ffn.fc2.weight").fill(0);
  params.get(pre + ".ffn.fc2.bias").fill(0);
  const auto x = random_tensor<double>({16, 4, 6}, rng);
  Tape<double> tape(false);
  Binder<double> bind(tape, params);
  Var<double> v = tape.input(x);
  CHECK(max_abs_diff(agg_attention_block(bind, pre, v, v, AttentionKind::Self, cfg).value(), x) == 0.0);
}

TEST_CASE("block output composes upsampled message, merge projection and feed-forward") {
  std::mt19937_64 rng(9);
  const TransformConfig cfg = tiny_transform(2);
  ParamSet<double> params;
  init_transform(params, cfg, rng);
  shake(params, rng, 0.2);
  const std::string pre = attention_prefix(0, AttentionKind::Cross);
  const auto a = random_tensor<double>({16, 4, 4}, rng), b = random_tensor<double>({16, 4, 4}, rng);
  Tape<double> tape(false);
  Binder<double> bind(tape, params);
  const auto got = agg_attention_block(bind, pre, tape.input(a), tape.input(b), AttentionKind::Cross, cfg).value();

  const auto up = kernels::bilinear_upsample(aggregated_reference(params, pre, a, b, false, cfg), 2);
  Mat cat = tokens_of(a);
  const Mat um = tokens_of(up);
  for (std::size_t i = 0; i < cat.size(); ++i) cat[i].insert(cat[i].end(), um[i].begin(), um[i].end());
  Mat y = project_ref(cat, params.get(pre + ".out_proj.weight"));
  const Mat at = tokens_of(a);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t c = 0; c < 16; ++c) y[i][c] += at[i][c];
  Mat f = layer_norm_ref(y, params.get(pre + ".ffn.norm.gamma"), params.get(pre + ".ffn.norm.beta"));
  f = project_ref(f, params.get(pre + ".ffn.fc1.weight"));
  for (auto& row : f)
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = std::max(0.0, row[c] + params.get(pre + ".ffn.fc1.bias")[c]);
  f = project_ref(f, params.get(pre + ".ffn.fc2.weight"));
  double err = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t c = 0; c < 16; ++c) {
      const double expect = y[i][c] + f[i][c] + params.get(pre + ".ffn.fc2.bias")[c];
      err = std::max(err, std::abs(expect - got[c * 16 + i]));
    }
  }
  CHECK(err < 1e-10);
}

TEST_CASE("transform shares weights across images and updates cross blocks simultaneously") {
  std::mt19937_64 rng(4);
  TransformConfig cfg = tiny_transform(2);
  cfg.n_layers = 2;
  ParamSet<double> params;
  init_transform(params, cfg, rng);
  shake(params, rng, 0.2);
  const auto a = random_tensor<double>({16, 4, 4}, rng), b = random_tensor<double>({16, 4, 8}, rng);
  Tape<double> tape(false);
  Binder<double> bind(tape, params);
  const auto [ya, yb] = transform(bind, tape.input(a), tape.input(b), cfg);
  const auto [zb, za] = transform(bind, tape.input(b), tape.input(a), cfg);
  CHECK(max_abs_diff(ya.value(), za.value()) < 1e-12);
  CHECK(max_abs_diff(yb.value(), zb.value()) < 1e-12);

  Var<double> ma = tape.input(a), mb = tape.input(b);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto ps = attention_prefix(l, AttentionKind::Self), pc = attention_prefix(l, AttentionKind::Cross);
    ma = agg_attention_block(bind, ps, ma, ma, AttentionKind::Self, cfg);
    mb = agg_attention_block(bind, ps, mb, mb, AttentionKind::Self, cfg);
    Var<double> na = agg_attention_block(bind, pc, ma, mb, AttentionKind::Cross, cfg);
    mb = agg_attention_block(bind, pc, mb, ma, AttentionKind::Cross, cfg);
    ma = na;
  }
  CHECK(max_abs_diff(ya.value(), ma.value()) == 0.0);
  CHECK(max_abs_diff(yb.value(), mb.value()) == 0.0);
}

TEST_CASE("transform parameter gradients match finite differences") {
  std::mt19937_64 rng(3);
  const TransformConfig cfg = tiny_transform(2);
  ParamSet<double> params;
  init_transform(params, cfg, rng);
  shake(params, rng, 0.2);
  const auto a = random_tensor<double>({16, 4, 4}, rng), b = random_tensor<double>({16, 4, 4}, rng);
  const auto checks = sdm::testing::param_gradcheck(params, [&](Binder<double>& bind) {
    Tape<double>& t = bind.tape();
    auto [ya, yb] = transform(bind, t.input(a), t.input(b), cfg);
    return ag::add(sdm::testing::project(t, ya, 1), sdm::testing::project(t, yb, 2));
  });
  CHECK(checks.size() == params.entries().size());
  for (const auto& c : checks) {
    INFO(c.name << " analytic " << c.analytic << " numeric " << c.numeric);
    CHECK(c.error < 1e-5);
  }
}

TEST_CASE("configuration validation") {
  TransformConfig c;
  CHECK(c.head_count() == 8);
  c.d_model = 32;
  CHECK(c.head_count() == 1);
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c.heads = 0;
  c.agg_range = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
}
