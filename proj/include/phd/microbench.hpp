#pragma once

#include <algorithm>
#include <chrono>
#include <vector>

#include "phd/kv_engine.hpp"

// ---------------------------------------------------------------------------
// Wall-clock microbenchmark of the live engine. Reported next to modeled
// latency; only rank order is ever asserted against the model.
// ---------------------------------------------------------------------------

namespace phd {

struct BenchResult {
  double prefill_ms = 0.0;
  double decode_ms_per_token = 0.0;
};

// Median of `reps` timed runs after one untimed warmup. Single-threaded when
// PHD_THREADS=1; the engine itself never spawns workers.
template <class T>
BenchResult microbench(const Weights<T>& w, int64_t t, int64_t decode_tokens, int64_t reps) {
  require(t >= 1 && decode_tokens >= 0 && reps >= 1, "microbench: bad extents");
  using clock = std::chrono::steady_clock;
  std::vector<int64_t> prompt(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i)
    prompt[static_cast<size_t>(i)] = (i * 131 + 7) % w.config.vocab_size;

  std::vector<double> prefill_ms, decode_ms;
  for (int64_t rep = 0; rep <= reps; ++rep) {  // rep 0 is warmup
    const auto t0 = clock::now();
    PrefillResult<T> pre = prefill(w, std::span<const int64_t>(prompt));
    const auto t1 = clock::now();
    int64_t tok = pre.logits.size() > 1 ? 1 : 0;
    for (int64_t i = 0; i < decode_tokens; ++i)
      decode_step(w, pre.state, (tok + i) % w.config.vocab_size);
    const auto t2 = clock::now();
    if (rep == 0) continue;
    prefill_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (decode_tokens > 0)
      decode_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count() /
                          static_cast<double>(decode_tokens));
  }
  auto median = [](std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    return xs[xs.size() / 2];
  };
  return {median(prefill_ms), median(decode_ms)};
}

}  // namespace phd

