#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace phd {

// Violated precondition / shape mismatch / malformed configuration.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem and file-format failures (missing files, bad magic, truncation).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

inline void require_io(bool cond, const std::string& what) {
  if (!cond) throw IoError(what);
}

// Dense boolean matrix, row-major. Used for attention masks.
struct BoolMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<uint8_t> v;

  BoolMatrix() = default;
  BoolMatrix(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), 0) {}

  uint8_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  uint8_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
  int64_t count_true() const {
    int64_t n = 0;
    for (uint8_t b : v) n += (b != 0);
    return n;
  }
  bool operator==(const BoolMatrix& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

// Worker cap: min(hardware, PHD_THREADS env var when set).
inline int max_workers() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("PHD_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1 && cap < hw) hw = cap;
  }
  return hw;
}

// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker;
// workers own disjoint contiguous ranges so per-index outputs stay
// deterministic regardless of scheduling.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  int workers = max_workers();
  if (n <= 1 || workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (workers > n) workers = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  const int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const int64_t lo = w * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace phd
