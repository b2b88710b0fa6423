#include "dmf/threading.hpp"

#include <algorithm>
#include <thread>
#include <vector>

namespace dmf {

namespace {
int g_threads = 1;
} // namespace

int thread_count() { return g_threads; }

void set_thread_count(int n) { g_threads = std::max(1, n); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  const int nt = int(std::min<std::int64_t>(g_threads, n));
  if (nt <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(nt);
  const std::int64_t chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& w : workers) w.join();
}

} // namespace dmf
