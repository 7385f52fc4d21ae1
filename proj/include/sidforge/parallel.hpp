#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace sidforge {

inline std::atomic<unsigned>& thread_cap_storage() {
    static std::atomic<unsigned> cap{0};
    return cap;
}

/// Caps worker threads. 0 means "use SIDFORGE_THREADS, else hardware concurrency".
inline void set_thread_count(unsigned n) { thread_cap_storage() = n; }

inline unsigned thread_count() {
    if (const unsigned cap = thread_cap_storage(); cap > 0) return cap;
    if (const char* env = std::getenv("SIDFORGE_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(task) for task in [0, n_tasks). Tasks must write to disjoint outputs; callers
/// merge per-task results in task order, so results do not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n_tasks, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(thread_count(), n_tasks);
    if (workers <= 1) {
        for (std::size_t t = 0; t < n_tasks; ++t) fn(t);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto body = [&] {
        for (;;) {
            const std::size_t t = next.fetch_add(1);
            if (t >= n_tasks) return;
            try {
                fn(t);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

/// Fixed-size chunking so the reduction order is independent of the worker count.
struct ChunkRange {
    std::size_t begin;
    std::size_t end;
};

inline std::vector<ChunkRange> fixed_chunks(std::size_t n, std::size_t chunk) {
    std::vector<ChunkRange> out;
    for (std::size_t b = 0; b < n; b += chunk) out.push_back({b, std::min(n, b + chunk)});
    return out;
}

}  // namespace sidforge
