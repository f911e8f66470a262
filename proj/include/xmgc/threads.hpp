#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>
#include <utility>
#include <vector>

namespace xmgc {

/// Worker-thread cap from XMGC_THREADS, read once. Defaults to 1 so runs are
/// sequential unless the user opts in.
int worker_threads();

/// Override the cap for the current process (tests, CLI). Values < 1 clamp to 1.
void set_worker_threads(int n);

/// Runs fn(begin, end) over contiguous chunks of [begin, end). Work is split
/// only at chunk boundaries, so any per-index arithmetic is identical no
/// matter how many workers run. Template (not type-erased) so the body
/// optimizes as if written inline at the call site.
template <typename Fn>
void parallel_for(std::int64_t begin, std::int64_t end, std::int64_t grain, Fn&& fn) {
    const std::int64_t total = end - begin;
    if (total <= 0) return;
    const int workers = worker_threads();
    if (workers <= 1 || total <= grain) {
        fn(begin, end);
        return;
    }
    const std::int64_t chunks = std::min<std::int64_t>(workers, (total + grain - 1) / grain);
    const std::int64_t per_chunk = (total + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(chunks));
    for (std::int64_t c = 0; c < chunks; ++c) {
        const std::int64_t lo = begin + c * per_chunk;
        const std::int64_t hi = std::min(end, lo + per_chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace xmgc
