#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <thread>
#include <vector>

namespace apex {

/// Worker count for `requested` (0 means hardware concurrency).
inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Splits [begin, end) into `workers` contiguous slices and runs
/// fn(slice_begin, slice_end, worker_id) on each. Worker 0 runs on the calling
/// thread. The first exception thrown by any worker is rethrown.
template <class Fn>
void parallel_for(std::uint64_t begin, std::uint64_t end, std::size_t workers, Fn&& fn) {
  const std::uint64_t n = end > begin ? end - begin : 0;
  workers = std::max<std::size_t>(1, std::min<std::uint64_t>(workers, std::max<std::uint64_t>(n, 1)));
  if (workers == 1) {
    fn(begin, end, std::size_t{0});
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  auto slice = [&](std::size_t w) {
    return begin + n * w / workers;
  };
  for (std::size_t w = 1; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        fn(slice(w), slice(w + 1), w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  try {
    fn(slice(0), slice(1), std::size_t{0});
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace apex
