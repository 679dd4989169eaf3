#pragma once

#include <cstdint>
#include <functional>

namespace p2v {

// Number of worker threads used by parallel_for (defaults to the hardware
// count, capped at 8). Setting it to 1 gives the strict sequential mode.
int num_threads();
void set_num_threads(int n);

// Splits [begin, end) into contiguous chunks, one per worker. Each index is
// processed by exactly one thread, so results are bit-identical to the
// sequential run regardless of the thread count.
void parallel_for(int64_t begin, int64_t end,
                  const std::function<void(int64_t, int64_t)>& body,
                  int64_t grain = 1);

}  // namespace p2v
