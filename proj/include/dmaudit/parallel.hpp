#pragma once

#include <cstddef>
#include <functional>

namespace dmaudit {

// Runs fn(0..n-1) across a shared persistent worker pool. Callers must write
// results into per-index slots and reduce in index order afterwards, which
// keeps every caller bit-deterministic regardless of thread count. Nested
// calls from inside a worker execute inline. Thread count can be pinned with
// the DMAUDIT_THREADS environment variable.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

int worker_count();

}  // namespace dmaudit
