#pragma once

#include <cstddef>
#include <functional>

namespace dfgp {

/// Upper bound on worker threads used inside library calls (default: hardware concurrency).
void set_thread_limit(int n);
int thread_limit();

/// Runs fn(i) for i in [0, n); indices are handed out dynamically. The first
/// exception thrown by any worker is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace dfgp
