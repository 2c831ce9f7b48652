// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace fibro {

/// FIBRO_THREADS when set to a positive integer, else hardware concurrency
/// (at least 1).
std::size_t thread_count();

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Work items are
/// claimed in index order; the first exception is rethrown after all workers
/// finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace fibro
