#pragma once

// Minimal deterministic parallel-for. Work items must write disjoint state;
// reductions are the caller's job and must run in a fixed order so that
// results do not depend on the number of worker threads.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace tomo {

namespace detail {
inline unsigned& thread_count_ref() {
    static unsigned n = std::max(1u, std::thread::hardware_concurrency());
    return n;
}
inline bool& in_worker_flag() {
    thread_local bool flag = false;
    return flag;
}
}  // namespace detail

inline void set_thread_count(unsigned n) { detail::thread_count_ref() = std::max(1u, n); }
inline unsigned thread_count() { return detail::thread_count_ref(); }

// Runs fn(i) for every i in [0, n). Nested calls from inside a worker run
// serially, so operator code can use parallel_for freely at any level.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    if (n == 0) return;
    const unsigned threads = thread_count();
    if (threads <= 1 || n == 1 || detail::in_worker_flag()) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&] {
        detail::in_worker_flag() = true;
        for (;;) {
            const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= n) break;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
        detail::in_worker_flag() = false;
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (unsigned t = 1; t < workers; ++t) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace tomo
