#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace gmflow {

// Worker budget: hardware concurrency capped by GMFLOW_THREADS.
inline int worker_threads() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("GMFLOW_THREADS")) {
        int cap = std::atoi(env);
        if (cap > 0) n = std::min(n, cap);
    }
    return n;
}

// Runs fn(i) for i in [0, n). Work is split by index, so any per-index
// output written to pre-sized slots is deterministic regardless of timing.
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    threads = int(std::max<int64_t>(1, std::min<int64_t>(threads, n)));
    if (threads <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (int64_t i = t; i < n; i += threads) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace gmflow
