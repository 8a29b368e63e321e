#pragma once

#include <cstdint>
#include <functional>

namespace c2sti {

/// Worker count for kernels and evaluation. Read once from C2STI_THREADS
/// (default 1) unless overridden with set_num_threads().
int num_threads();
void set_num_threads(int n);

/// Split [0, n) into contiguous chunks, one per worker. Each index is owned by
/// exactly one worker, so any per-index reduction order is thread-count
/// independent. Calls made from inside a worker run inline.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn,
                  std::int64_t min_per_thread = 1);

}  // namespace c2sti
