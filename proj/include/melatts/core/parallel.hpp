#pragma once

#include <algorithm>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace melatts {

// Runs fn(i) for i in [0, n) on up to num_threads workers. Worker w owns the
// contiguous index range [w*chunk, ...), so any per-worker accumulation that
// is later reduced in worker order is independent of scheduling.
inline void parallel_for(int n, int num_threads, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    num_threads = std::clamp(num_threads, 1, n);
    if (num_threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    const int chunk = (n + num_threads - 1) / num_threads;
    std::vector<std::thread> workers;
    workers.reserve(num_threads);
    std::exception_ptr error;
    std::mutex error_mu;
    for (int w = 0; w < num_threads; ++w) {
        const int lo = w * chunk;
        const int hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&, lo, hi] {
            try {
                for (int i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : workers) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace melatts
