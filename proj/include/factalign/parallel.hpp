#pragma once

#include <cstddef>
#include <functional>

namespace factalign {

/// Runs fn(i) for every i in [0, n) on up to `workers` threads. Results must
/// be written to per-index slots so output order never depends on
/// scheduling. If any call throws, the exception of the lowest failing index
/// is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace factalign
