// Copyright 2026 The knnlm Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace knnlm {

// Resolves a worker count: an explicit positive request wins, then the
// KLM_THREADS environment variable, then the hardware concurrency.
inline size_t resolve_threads(size_t requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("KLM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<size_t>(v);
  }
  return std::max<size_t>(1, std::thread::hardware_concurrency());
}

// Runs fn(chunk_begin, chunk_end) over [0, n) split into contiguous chunks.
// Chunk boundaries depend only on n and chunk, never on the thread count, so
// any per-chunk reduction is reproducible. The first exception is rethrown.
template <typename Fn>
void parallel_chunks(size_t n, size_t chunk, size_t threads, Fn&& fn) {
  if (n == 0) return;
  chunk = std::max<size_t>(1, chunk);
  const size_t chunks = (n + chunk - 1) / chunk;
  threads = std::min(std::max<size_t>(1, threads), chunks);
  if (threads == 1) {
    for (size_t c = 0; c < chunks; ++c) fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::mutex mu;
  size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      size_t c;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= chunks || failure) return;
        c = next++;
      }
      try {
        fn(c * chunk, std::min(n, (c + 1) * chunk));
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace knnlm
