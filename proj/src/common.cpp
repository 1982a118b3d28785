#include "matssl/common.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <thread>
#include <vector>

namespace matssl {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

int max_threads() {
    static const int cached = [] {
        if (const char* env = std::getenv("MATSSL_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) return v;
        }
        return 1;
    }();
    return cached;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& chunk_fn) {
    const int threads = std::min<std::int64_t>(max_threads(), n);
    if (threads <= 1 || n < 2) {
        if (n > 0) chunk_fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    const std::int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] { chunk_fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace matssl
