#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sdm/model/params.hpp"
#include "sdm/pipeline/config.hpp"
#include "sdm/train/supervision.hpp"
#include "sdm/train/synthetic.hpp"

namespace sdm {

struct LossBreakdown {
  double l_c = 0, l_f1 = 0, l_f2 = 0, total = 0;
  std::size_t coarse_pairs = 0, fine1_matches = 0, fine2_matches = 0;
};

/// Full training objective for one image pair with GT homography `h`
/// (images [1, H, W], sizes a multiple of 8 * s). The fine losses use up to
/// `max_fine_matches` GT coarse pairs, evenly strided.
template <typename T>
Var<T> pair_loss(Binder<T>& bind, const Tensor<T>& image_a, const Tensor<T>& image_b, const Mat3& h,
                 const ModelConfig& model, const TrainConfig& train, LossBreakdown* breakdown = nullptr);

/// Adam with decoupled weight decay on ".kernel" / ".weight" tensors.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg);
  /// Updates every trainable parameter bound on `bind` that received a gradient.
  void step(ParamSet<T>& params, const Binder<T>& bind);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

struct LossRecord {
  std::size_t step = 0;
  double l_c = 0, l_f1 = 0, l_f2 = 0, total = 0;
};

template <typename T>
struct TrainResult {
  ParamSet<T> params;
  std::vector<LossRecord> curve;
  std::size_t skipped = 0;  // pairs without usable ground truth
};

std::vector<SyntheticPair> make_dataset(std::size_t count, std::uint64_t seed, const SynthOptions& opt = {});

using TrainProgress = std::function<void(const LossRecord&)>;

/// Seeded training from scratch, cycling through `data` in a per-epoch
/// shuffled order. Throws NumericError when the loss diverges.
template <typename T>
TrainResult<T> train_toy(const RunConfig& cfg, const std::vector<SyntheticPair>& data,
                         const TrainProgress& progress = {});

}  // namespace sdm
