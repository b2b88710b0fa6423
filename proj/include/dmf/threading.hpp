#pragma once
#include <cstdint>
#include <functional>

// Worker-pool sizing for coarse data-parallel loops (all-pairs metrics,
// embedding batches). Work is split into fixed disjoint index ranges ahead of
// time and every range writes only its own slots, so results are identical
// for any thread count. Tensor kernels stay single-threaded; sequencing there
// is what keeps training bit-reproducible.
namespace dmf {

int thread_count();
void set_thread_count(int n);   // <1 clamps to 1; CLI wires --threads / DIMA_FORGE_THREADS

// Runs fn(lo, hi) over a static partition of [0, n) across thread_count()
// threads (inline when the count is 1 or the loop is tiny).
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

} // namespace dmf
