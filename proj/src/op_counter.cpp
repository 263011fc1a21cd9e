#include "lamatch/op_counter.hpp"

#include <algorithm>
#include <limits>

namespace lamatch::ops {
namespace {
thread_local Counters tls_counters;
}

void reset() { tls_counters = Counters{}; }

Counters snapshot() { return tls_counters; }

void add_multiplies_slow(std::uint64_t n) {
  auto& c = tls_counters;
  if (c.multiplies > std::numeric_limits<std::uint64_t>::max() - n) {
    c.multiplies = std::numeric_limits<std::uint64_t>::max();
    c.overflowed = true;
    return;
  }
  c.multiplies += n;
}

void note_buffer_slow(std::uint64_t elements) {
  auto& c = tls_counters;
  ++c.buffers;
  c.largest_buffer = std::max(c.largest_buffer, elements);
}

}  // namespace lamatch::ops
