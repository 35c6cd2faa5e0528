#pragma once

#include <cstddef>
#include <functional>

namespace duq {

// Resolves the worker count: explicit request > DUQ_THREADS > hardware.
int thread_count(int requested = 0);

// Runs fn(i) for i in [0, n) across workers. Each index must write only its
// own output slot; callers reduce in index order afterwards, so results are
// independent of scheduling.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace duq
