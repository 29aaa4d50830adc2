#include "sdm/core/counters.hpp"

namespace sdm {

OpCounters& op_counters() {
  static OpCounters counters;
  return counters;
}

}  // namespace sdm
