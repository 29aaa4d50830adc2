#pragma once

#include <atomic>
#include <cstdint>

namespace sdm {

/// Process-wide instrumentation used by tests and benchmarks to prove which
/// kernels ran. Counting is relaxed-atomic and never affects results.
struct OpCounters {
  std::atomic<std::uint64_t> conv2d{0};
  std::atomic<std::uint64_t> softmax{0};
  std::atomic<std::uint64_t> dual_softmax{0};
  std::atomic<std::uint64_t> probability_matrices{0};
  std::atomic<std::uint64_t> attention_score_entries{0};
  std::atomic<std::uint64_t> rope_applications{0};

  void reset() {
    conv2d = 0;
    softmax = 0;
    dual_softmax = 0;
    probability_matrices = 0;
    attention_score_entries = 0;
    rope_applications = 0;
  }
};

OpCounters& op_counters();

inline void bump(std::atomic<std::uint64_t>& c, std::uint64_t n = 1) { c.fetch_add(n, std::memory_order_relaxed); }

}  // namespace sdm
