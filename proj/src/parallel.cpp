#include "parallel.hpp"

#include <omp.h>

#include <atomic>
#include <cstdlib>

namespace trips {
namespace {

int default_threads() {
  if (const char* env = std::getenv("TRIPS_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1, omp_get_num_procs());
}

std::atomic<int>& thread_setting() {
  static std::atomic<int> value{default_threads()};
  return value;
}

}  // namespace

void set_thread_count(int threads) {
  thread_setting().store(threads > 0 ? threads : default_threads());
}

int thread_count() { return thread_setting().load(); }

}  // namespace trips
