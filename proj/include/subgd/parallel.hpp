#pragma once

// Index-ordered fan-out over independent work items.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace subgd {

/// Worker count: SUBGD_THREADS if set (>= 1), else the hardware concurrency.
inline std::size_t worker_count() {
    if (const char* env = std::getenv("SUBGD_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
        }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs body(i) for i in [0, count). The first exception by index is rethrown
/// after all workers finish.
template <class F>
void parallel_for(std::size_t count, F&& body, std::size_t workers = worker_count()) {
    workers = std::min(workers, count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t failed_index = count;
    std::exception_ptr failure;
    auto run = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (i < failed_index) {
                    failed_index = i;
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w + 1 < workers; ++w) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

/// Results of f(i) in index order.
template <class T, class F>
std::vector<T> parallel_map(std::size_t count, F&& f, std::size_t workers = worker_count()) {
    std::vector<T> out(count);
    parallel_for(count, [&](std::size_t i) { out[i] = f(i); }, workers);
    return out;
}

} // namespace subgd
