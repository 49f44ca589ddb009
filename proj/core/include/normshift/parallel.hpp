#pragma once

#include <cstddef>
#include <functional>

namespace normshift {

// Worker cap from NORMSHIFT_THREADS (default 1). Invalid values fall back to 1.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker and
// results must be written to index-owned slots, so output is independent of
// the worker count. The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace normshift
