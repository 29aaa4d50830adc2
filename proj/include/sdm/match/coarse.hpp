#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "sdm/core/autodiff.hpp"
#include "sdm/core/tensor.hpp"

namespace sdm {

struct CoarseMatch {
  std::size_t i = 0;  // flat cell index in A
  std::size_t j = 0;  // flat cell index in B
  double confidence = 0;

  bool operator==(const CoarseMatch& o) const { return i == o.i && j == o.j; }
};

enum class MatchMode { Full, Optimized };

const char* to_string(MatchMode mode);
MatchMode parse_match_mode(const std::string& s);

/// s(i, j) = inv_temperature * <f_i, f_j> over the flattened grids of two [C, H, W] maps.
template <typename T>
Tensor<T> correlate(const Tensor<T>& fa, const Tensor<T>& fb, T inv_temperature);

/// Same on token matrices [nA, C] and [nB, C].
template <typename T>
Tensor<T> correlate_tokens(const Tensor<T>& ta, const Tensor<T>& tb, T inv_temperature);

/// Row softmax times column softmax.
template <typename T>
Tensor<T> dual_softmax(const Tensor<T>& s);

namespace ag {
template <typename T>
Var<T> dual_softmax(Var<T> s);
}

/// Mutual argmax pairs with M(i, j) >= tau, sorted by i. Ties go to the smallest index.
template <typename T>
std::vector<CoarseMatch> mnn_select(const Tensor<T>& m, double tau = -std::numeric_limits<double>::infinity());

/// Full: correlate -> dual-softmax -> MNN over probabilities with threshold tau.
/// Optimized: correlate -> MNN over raw scores, no softmax, no threshold.
template <typename T>
std::vector<CoarseMatch> match_coarse_tokens(const Tensor<T>& ta, const Tensor<T>& tb, MatchMode mode, double tau,
                                             T inv_temperature);

template <typename T>
std::vector<CoarseMatch> match_coarse(const Tensor<T>& fa, const Tensor<T>& fb, MatchMode mode, double tau,
                                      T inv_temperature);

}  // namespace sdm
