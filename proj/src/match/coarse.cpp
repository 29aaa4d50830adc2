#include "sdm/match/coarse.hpp"

#include <cmath>
#include <string>

#include "sdm/core/counters.hpp"
#include "sdm/core/kernels.hpp"

namespace sdm {

const char* to_string(MatchMode mode) { return mode == MatchMode::Full ? "full" : "optimized"; }

MatchMode parse_match_mode(const std::string& s) {
  if (s == "full") return MatchMode::Full;
  if (s == "optimized") return MatchMode::Optimized;
  throw UsageError("unknown match mode '" + s + "' (expected full or optimized)");
}

template <typename T>
Tensor<T> correlate_tokens(const Tensor<T>& ta, const Tensor<T>& tb, T inv_temperature) {
  require_rank(ta, 2, "correlate");
  require_rank(tb, 2, "correlate");
  if (ta.dim(1) != tb.dim(1)) throw ShapeError("correlate: feature maps have different channel counts");
  Tensor<T> s = kernels::matmul(ta, tb, false, true);
  for (auto& v : s.storage()) v *= inv_temperature;
  return s;
}

template <typename T>
Tensor<T> correlate(const Tensor<T>& fa, const Tensor<T>& fb, T inv_temperature) {
  require_rank(fa, 3, "correlate");
  require_rank(fb, 3, "correlate");
  if (fa.dim(0) != fb.dim(0)) throw ShapeError("correlate: feature maps have different channel counts");
  const std::size_t c = fa.dim(0);
  Tensor<T> ta = fa.reshaped({c, fa.dim(1) * fa.dim(2)});
  Tensor<T> tb = fb.reshaped({c, fb.dim(1) * fb.dim(2)});
  Tensor<T> s = kernels::matmul(ta, tb, true, false);
  for (auto& v : s.storage()) v *= inv_temperature;
  return s;
}

template <typename T>
Tensor<T> dual_softmax(const Tensor<T>& s) {
  require_rank(s, 2, "dual_softmax");
  bump(op_counters().dual_softmax);
  bump(op_counters().probability_matrices);
  Tensor<T> p = kernels::softmax(s, 1);
  const Tensor<T> col = kernels::softmax(s, 0);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] *= col[i];
  return p;
}

namespace ag {
template <typename T>
Var<T> dual_softmax(Var<T> s) {
  bump(op_counters().dual_softmax);
  bump(op_counters().probability_matrices);
  return mul(softmax(s, 1), softmax(s, 0));
}
}  // namespace ag

template <typename T>
std::vector<CoarseMatch> mnn_select(const Tensor<T>& m, double tau) {
  require_rank(m, 2, "mnn_select");
  const std::size_t na = m.dim(0), nb = m.dim(1);
  std::vector<CoarseMatch> out;
  if (na == 0 || nb == 0) return out;
  std::vector<std::size_t> row_arg(na, 0), col_arg(nb, 0);
  std::vector<T> col_max(m.ptr(), m.ptr() + nb);
  for (std::size_t i = 0; i < na; ++i) {
    const T* row = m.ptr() + i * nb;
    std::size_t best = 0;
    for (std::size_t j = 1; j < nb; ++j) {
      if (row[j] > row[best]) best = j;
    }
    row_arg[i] = best;
    if (i == 0) continue;
    for (std::size_t j = 0; j < nb; ++j) {
      if (row[j] > col_max[j]) {
        col_max[j] = row[j];
        col_arg[j] = i;
      }
    }
  }
  for (std::size_t i = 0; i < na; ++i) {
    const std::size_t j = row_arg[i];
    const double v = m[i * nb + j];
    if (col_arg[j] == i && v >= tau) out.push_back({i, j, v});
  }
  return out;
}

template <typename T>
std::vector<CoarseMatch> match_coarse_tokens(const Tensor<T>& ta, const Tensor<T>& tb, MatchMode mode, double tau,
                                             T inv_temperature) {
  Tensor<T> s = correlate_tokens(ta, tb, inv_temperature);
  if (mode == MatchMode::Optimized) return mnn_select(s);
  return mnn_select(dual_softmax(s), tau);
}

template <typename T>
std::vector<CoarseMatch> match_coarse(const Tensor<T>& fa, const Tensor<T>& fb, MatchMode mode, double tau,
                                      T inv_temperature) {
  Tensor<T> s = correlate(fa, fb, inv_temperature);
  if (mode == MatchMode::Optimized) return mnn_select(s);
  return mnn_select(dual_softmax(s), tau);
}

#define SDM_INSTANTIATE_COARSE(T)                                                                           \
  template Tensor<T> correlate(const Tensor<T>&, const Tensor<T>&, T);                                      \
  template Tensor<T> correlate_tokens(const Tensor<T>&, const Tensor<T>&, T);                               \
  template Tensor<T> dual_softmax(const Tensor<T>&);                                                        \
  template Var<T> ag::dual_softmax(Var<T>);                                                                 \
  template std::vector<CoarseMatch> mnn_select(const Tensor<T>&, double);                                   \
  template std::vector<CoarseMatch> match_coarse_tokens(const Tensor<T>&, const Tensor<T>&, MatchMode, double, \
                                                        T);                                                  \
  template std::vector<CoarseMatch> match_coarse(const Tensor<T>&, const Tensor<T>&, MatchMode, double, T);

SDM_INSTANTIATE_COARSE(float)
SDM_INSTANTIATE_COARSE(double)

}  // namespace sdm
