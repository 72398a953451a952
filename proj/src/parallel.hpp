#pragma once

#include <algorithm>
#include <cstdint>

namespace trips {

// Thread cap for every parallel region. Work is always split into chunks
// whose boundaries depend only on the problem size, so results do not
// change with the number of threads.
void set_thread_count(int threads);
int thread_count();

template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  if (n <= 0) return;
  const int threads = thread_count();
  if (threads <= 1 || n == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#pragma omp parallel for schedule(dynamic, 64) num_threads(threads)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

// Calls fn(chunk, begin, end) for fixed-size chunks of [0, n).
template <typename Fn>
void parallel_chunks(std::int64_t n, std::int64_t chunk, Fn&& fn) {
  if (n <= 0) return;
  const std::int64_t chunks = (n + chunk - 1) / chunk;
  const int threads = thread_count();
  if (threads <= 1 || chunks == 1) {
    for (std::int64_t c = 0; c < chunks; ++c) fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
  for (std::int64_t c = 0; c < chunks; ++c) fn(c, c * chunk, std::min(n, (c + 1) * chunk));
}

inline std::int64_t chunk_count(std::int64_t n, std::int64_t chunk) {
  return n <= 0 ? 0 : (n + chunk - 1) / chunk;
}

}  // namespace trips
