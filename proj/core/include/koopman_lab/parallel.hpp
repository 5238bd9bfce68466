#pragma once

#include <cstddef>
#include <functional>

namespace koopman_lab {

/// Global worker-thread cap. Initialized from KOOPMAN_LAB_JOBS, else 1.
std::size_t worker_count();
void set_worker_count(std::size_t jobs);

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work is split
/// into contiguous chunks, so a given i always lands in the same chunk for a
/// fixed (n, jobs). The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace koopman_lab
