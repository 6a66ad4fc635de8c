#pragma once

#include <cstddef>
#include <functional>

namespace uwsdf {

// Worker count: UWSDF_THREADS when set to a positive integer, else hardware concurrency.
int worker_count();

// Runs fn(i) for i in [0, n). Tasks must write only to slots owned by i, so the result is
// independent of scheduling. Exceptions from workers are rethrown (first by index).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace uwsdf
