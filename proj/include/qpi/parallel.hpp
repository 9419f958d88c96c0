#ifndef QPI_PARALLEL_HPP
#define QPI_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace qpi {

namespace detail {
inline std::atomic<bool>& deterministic_flag() {
    static std::atomic<bool> f{false};
    return f;
}
}  // namespace detail

/// Forces every parallel section to run sequentially.
inline void set_deterministic(bool on) { detail::deterministic_flag() = on; }
inline bool deterministic() { return detail::deterministic_flag(); }

/// Worker cap: QPI_THREADS if set (>= 1), else hardware concurrency; 1 in deterministic mode.
inline unsigned worker_count() {
    if (deterministic()) return 1;
    if (const char* env = std::getenv("QPI_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n). Items are independent, so results do not depend
/// on the worker count. The first exception (lowest index) is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(worker_count(), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex m;
    std::size_t failed_at = n;
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(m);
                    if (i < failed_at) {
                        failed_at = i;
                        failure = std::current_exception();
                    }
                }
            }
        });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace qpi

#endif  // QPI_PARALLEL_HPP
