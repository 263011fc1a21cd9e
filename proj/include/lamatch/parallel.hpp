#pragma once

#include <cstddef>
#include <functional>

namespace lamatch {

// Process-wide worker count used by the kernels and the filter. Defaults to 1
// so benchmarks measure algorithmic cost rather than parallel speedup.
void set_num_threads(int n);
int num_threads();

// Runs body(begin, end) over contiguous chunks of [0, n). Each index is
// visited exactly once; callers write results to per-index slots so the
// output never depends on the schedule.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 64);

}  // namespace lamatch
