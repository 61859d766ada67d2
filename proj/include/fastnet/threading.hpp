#pragma once

// Minimal fork-join parallelism for batch-level loops.
//
// parallel_for(n, fn) calls fn(i) exactly once for every i in [0, n).
// Indices are handed out in contiguous chunks via an atomic cursor, so the
// assignment of chunks to threads is scheduling-dependent — callers must
// only use it for tasks whose results are independent of execution order
// (disjoint output regions, or per-index partials reduced by the caller in
// index order afterwards). Under that discipline results are bit-identical
// for any thread count.

#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace fastnet {

inline unsigned default_worker_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Process-wide worker count used by layer kernels. Set once at startup
// (e.g. from a --threads flag); 1 disables forking entirely.
inline unsigned& worker_threads() {
  static unsigned n = default_worker_threads();
  return n;
}

// Deterministic mode (default) fixes reduction chunk sizes so results are
// independent of the worker count. Fast mode lets kernels size chunks by
// the active worker count, which can regroup cross-batch reductions.
inline bool& fast_mode() {
  static bool fast = false;
  return fast;
}

template <typename Fn>
void parallel_for(std::size_t n, const Fn& fn, std::size_t chunk = 1) {
  if (n == 0) return;
  const unsigned workers = worker_threads();
  if (workers <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (chunk == 0) chunk = 1;
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto run = [&] {
    for (;;) {
      const std::size_t begin = cursor.fetch_add(chunk);
      if (begin >= n || failed.load(std::memory_order_relaxed)) return;
      const std::size_t end = begin + chunk < n ? begin + chunk : n;
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  const unsigned extra = workers - 1;
  threads.reserve(extra);
  for (unsigned t = 0; t < extra; ++t) threads.emplace_back(run);
  run();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace fastnet
