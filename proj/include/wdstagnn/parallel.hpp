#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace wdstagnn {

/// Worker count used when a caller passes 0: WDSTAGNN_THREADS, else 1.
inline std::size_t default_thread_count() {
    if (const char *env = std::getenv("WDSTAGNN_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) {
                return static_cast<std::size_t>(v);
            }
        } catch (...) {
        }
    }
    return 1;
}

/// Runs fn(i) for i in [0, n). Each index must write only its own output slot,
/// which keeps results independent of the thread count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn &&fn) {
    if (threads == 0) {
        threads = default_thread_count();
    }
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto &t : pool) {
        t.join();
    }
    for (auto &e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

} // namespace wdstagnn
