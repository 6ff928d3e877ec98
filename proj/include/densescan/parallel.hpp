#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace densescan {

namespace detail {
inline std::atomic<std::size_t> g_thread_override{0};

inline std::size_t threads_from_env() {
    static const std::size_t value = [] {
        std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
        if (const char* env = std::getenv("DENSESCAN_THREADS")) {
            try {
                long parsed = std::stol(env);
                if (parsed >= 1) return static_cast<std::size_t>(parsed);
            } catch (...) {
            }
        }
        return hw;
    }();
    return value;
}
}  // namespace detail

/// Worker count: set_thread_count() override, else DENSESCAN_THREADS, else all cores.
inline std::size_t thread_count() {
    std::size_t forced = detail::g_thread_override.load();
    return forced != 0 ? forced : detail::threads_from_env();
}

/// Pass 0 to fall back to the environment default.
inline void set_thread_count(std::size_t n) { detail::g_thread_override.store(n); }

/// Runs body(i) for i in [0, n) on static contiguous chunks. Each index is
/// processed by exactly one thread, so per-element results never depend on
/// the thread count.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
    std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run_chunk = [&](std::size_t w) {
        std::size_t begin = n * w / workers;
        std::size_t end = n * (w + 1) / workers;
        try {
            for (std::size_t i = begin; i < end; ++i) body(i);
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run_chunk, w);
    run_chunk(0);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace densescan
