#include "mshr/threading.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mshr {

namespace {

int default_threads() {
    if (const char* env = std::getenv("MSHR_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

std::atomic<int> g_threads{0};  // 0 = default

}  // namespace

int thread_count() {
    int n = g_threads.load(std::memory_order_relaxed);
    return n > 0 ? n : default_threads();
}

void set_thread_count(int n) {
    g_threads.store(n > 0 ? n : 0, std::memory_order_relaxed);
}

void parallel_for(int64_t n, int64_t chunk, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (chunk <= 0) chunk = 1;
    const int64_t n_chunks = (n + chunk - 1) / chunk;
    const int threads = thread_count();
    if (n_chunks == 1 || threads == 1) {
        for (int64_t c = 0; c < n_chunks; ++c) {
            const int64_t begin = c * chunk;
            fn(begin, std::min(n, begin + chunk));
        }
        return;
    }
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
#endif
    for (int64_t c = 0; c < n_chunks; ++c) {
        const int64_t begin = c * chunk;
        fn(begin, std::min(n, begin + chunk));
    }
}

}  // namespace mshr
