#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace nvspin {

// Worker count for grid sweeps. NV_SPINLAB_THREADS caps it; 0 or unset means
// hardware concurrency.
inline unsigned sweep_threads() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char *env = std::getenv("NV_SPINLAB_THREADS")) {
    char *end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v > 0)
      return static_cast<unsigned>(std::min<long>(v, hw));
  }
  return hw;
}

// Evaluates fn(i) for i in [0, n) and returns the results in index order.
// Each index is evaluated exactly once, so the output does not depend on the
// thread count or scheduling.
template <class Fn>
auto parallel_map(std::size_t n, Fn &&fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using T = decltype(fn(std::size_t{}));
  std::vector<T> out(n);
  unsigned workers = std::min<std::size_t>(sweep_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i)
      out[i] = fn(i);
    return out;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          out[i] = fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure)
            failure = std::current_exception();
          return;
        }
      }
    });
  }
  pool.clear();
  if (failure)
    std::rethrow_exception(failure);
  return out;
}

} // namespace nvspin
