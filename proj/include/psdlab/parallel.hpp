#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace psdlab {

// Worker count used when a caller passes jobs <= 0: PSDNET_LAB_JOBS, else hardware concurrency.
int defaultJobs();

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Each index runs exactly once;
// callers write results into pre-sized slots so output order never depends on scheduling.
// The first exception thrown by any task is rethrown after all workers stop.
template <typename Fn>
void parallelFor(std::size_t n, int jobs, Fn&& fn) {
  if (jobs <= 0) jobs = defaultJobs();
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex errorMutex;
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(errorMutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace psdlab
