#pragma once

#include <cstdint>

namespace lamatch::ops {

// Per-thread tallies of the work done by the attention kernels. Kernels
// charge multiplies as they execute loops and report every intermediate
// buffer they allocate, so an audit can tell an O((N+M)C^2) evaluation
// from one that materializes an N x M score matrix.
struct Counters {
  std::uint64_t multiplies = 0;
  std::uint64_t buffers = 0;
  std::uint64_t largest_buffer = 0;  // in elements
  bool overflowed = false;
};

#ifdef LAMATCH_OP_COUNTERS
inline constexpr bool kEnabled = true;
#else
inline constexpr bool kEnabled = false;
#endif

void reset();
Counters snapshot();

void add_multiplies_slow(std::uint64_t n);
void note_buffer_slow(std::uint64_t elements);

inline void add_multiplies(std::uint64_t n) {
  if constexpr (kEnabled) add_multiplies_slow(n);
}

inline void note_buffer(std::uint64_t rows, std::uint64_t cols) {
  if constexpr (kEnabled) note_buffer_slow(rows * cols);
}

}  // namespace lamatch::ops
