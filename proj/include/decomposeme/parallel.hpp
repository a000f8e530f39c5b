#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace decomposeme {

/// Splits [0, items) into at most `threads` contiguous chunks and runs
/// fn(chunk, begin, end) on each. Chunk boundaries depend only on
/// (items, threads), so any reduction done in chunk order is reproducible.
template <class Fn>
void run_chunks(int items, int threads, Fn&& fn) {
  const int chunks = std::max(1, std::min(threads, items));
  auto bounds = [&](int k) {
    return static_cast<int>(static_cast<long long>(items) * k / chunks);
  };
  if (chunks == 1) {
    fn(0, 0, items);
    return;
  }
  std::vector<std::exception_ptr> errors(chunks);
  std::vector<std::jthread> pool;
  pool.reserve(chunks - 1);
  for (int k = 1; k < chunks; ++k) {
    pool.emplace_back([&, k] {
      try {
        fn(k, bounds(k), bounds(k + 1));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  try {
    fn(0, bounds(0), bounds(1));
  } catch (...) {
    errors[0] = std::current_exception();
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline int chunk_count(int items, int threads) {
  return std::max(1, std::min(threads, items));
}

}  // namespace decomposeme
