#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace atconv {

inline thread_local std::size_t thread_pin = 0;

/// Worker cap read from ATCONV_THREADS (default 1, i.e. serial), unless a
/// PinThreads scope is active on this thread.
inline std::size_t thread_cap() {
    if (thread_pin != 0) {
        return thread_pin;
    }
    const char* env = std::getenv("ATCONV_THREADS");
    if (env == nullptr) {
        return 1;
    }
    try {
        const long v = std::stol(env);
        return v > 1 ? static_cast<std::size_t>(v) : 1;
    } catch (...) {
        return 1;
    }
}

class PinThreads {
public:
    explicit PinThreads(std::size_t n) : saved_(thread_pin) { thread_pin = std::max<std::size_t>(n, 1); }
    ~PinThreads() { thread_pin = saved_; }
    PinThreads(const PinThreads&) = delete;
    PinThreads& operator=(const PinThreads&) = delete;

private:
    std::size_t saved_;
};

/// Runs fn(i) for i in [0, n). Each index is owned by exactly one worker, so
/// callers that write disjoint outputs per index get results identical to the
/// serial loop.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = thread_cap()) {
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += workers) {
                fn(i);
            }
        });
    }
}

} // namespace atconv
