#pragma once

#include <cstdint>
#include <functional>

namespace mshr {

// Runs fn(begin, end) over [0, n) split into fixed-size chunks. The chunk
// boundaries depend only on (n, chunk), never on the worker count, and every
// chunk writes disjoint output, so results are bitwise reproducible for any
// number of threads. Reductions must accumulate per chunk and be combined by
// the caller in chunk order.
void parallel_for(int64_t n, int64_t chunk, const std::function<void(int64_t, int64_t)>& fn);

int thread_count();
void set_thread_count(int n);  // n <= 0 restores the default

}  // namespace mshr
