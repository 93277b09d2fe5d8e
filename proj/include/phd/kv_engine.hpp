#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <span>
#include <vector>

#include "phd/common.hpp"
#include "phd/mask.hpp"
#include "phd/model.hpp"

namespace phd {

// ---------------------------------------------------------------------------
// Inference-time KV state.
//
// Originals go to the unbounded main cache (one entry per position, always).
// Hidden copies go to a FIFO ring: capacity 0 for PHD (dropped instantly),
// W for PHD-SWA/PHD-CSWA, unbounded for NaiveRepeat. Under PHD-CSWA the ring
// is emptied whenever a position starts a new chunk.
// ---------------------------------------------------------------------------

template <class T>
struct RingEntry {
  TokenCoord coord;
  std::vector<T> k, v;  // [n_kv_heads * d_head]
};

template <class T>
struct LayerKv {
  std::vector<T> main_k, main_v;  // [positions][n_kv_heads * d_head], contiguous
  std::deque<RingEntry<T>> ring;
};

template <class T>
struct KvCache {
  std::vector<LayerKv<T>> layers;
  int64_t positions = 0;  // original positions processed

  static KvCache init(const ModelConfig& cfg) {
    KvCache c;
    c.layers.resize(static_cast<size_t>(cfg.n_layers));
    return c;
  }

  int64_t hidden_entries() const { return static_cast<int64_t>(layers.at(0).ring.size()); }
};

struct KvFootprint {
  int64_t main_entries_per_layer = 0;
  int64_t hidden_entries_per_layer = 0;
  int64_t total_bytes = 0;
};

template <class T>
struct DecodeState {
  KvCache<T> cache;
  int64_t last_token = -1;
  std::mt19937_64 rng{0};
  int64_t steps = 0;  // generated tokens
};

struct EngineStats {
  int64_t rows_forwarded = 0;
  int64_t attn_score_entries = 0;
};

// Hidden-ring keys attended during one step/segment position (layer 0 view).
struct StepTrace {
  int64_t position = 0;
  int64_t hidden_before_push = 0;
  std::vector<TokenCoord> attended_hidden;
};

template <class T>
KvFootprint kv_footprint(const Weights<T>& w, const DecodeState<T>& state) {
  const ModelConfig& cfg = w.config;
  KvFootprint f;
  f.main_entries_per_layer = state.cache.positions;
  f.hidden_entries_per_layer = state.cache.hidden_entries();
  const int64_t entry_bytes = 2 * cfg.n_kv_heads * cfg.d_head * static_cast<int64_t>(sizeof(T));
  f.total_bytes =
      (f.main_entries_per_layer + f.hidden_entries_per_layer) * entry_bytes * cfg.n_layers;
  return f;
}

namespace detail {

// Runs `copies` slots per position for positions [first_pos, first_pos+n_pos)
// through all layers against the cache, appending originals to the main cache
// and hidden copies to the ring as it sweeps. Returns the final hidden states
// [n_pos*copies, d_model] in interleaved row order.
template <class T>
Tensor<T> run_segment(const Weights<T>& w, KvCache<T>& cache, std::span<const int64_t> tokens,
                      int64_t first_pos, int64_t copies, EngineStats* stats = nullptr,
                      std::vector<StepTrace>* traces = nullptr) {
  const ModelConfig& cfg = w.config;
  const MaskSpec& spec = cfg.mask;
  const int64_t n_pos = static_cast<int64_t>(tokens.size());
  const int64_t rows = n_pos * copies;
  const int64_t kvw = cfg.n_kv_heads * cfg.d_head;
  const int64_t qw = cfg.n_heads * cfg.d_head;
  const int64_t group = cfg.n_heads / cfg.n_kv_heads;
  const T scl = T(1) / std::sqrt(T(cfg.d_head));
  const int64_t ring_cap = hidden_window_capacity(spec);
  const bool chunked = spec.variant == MaskVariant::PhdCswa;

  require(first_pos == cache.positions + 1, "run_segment: positions must be contiguous");
  require(copies == 1 || copies == spec.K, "run_segment: copies must be 1 or K");

  // a query row reads the hidden ring if the variant keeps one and the row is
  // itself a hidden copy; NaiveRepeat is fully causal so originals read it too
  auto reads_ring = [&](int64_t j) {
    if (spec.variant == MaskVariant::NaiveRepeat) return true;
    if (spec.variant == MaskVariant::PhdSwa || spec.variant == MaskVariant::PhdCswa)
      return j >= 2;
    return false;
  };

  std::vector<int64_t> row_tokens(static_cast<size_t>(rows));
  std::vector<T> row_pos(static_cast<size_t>(rows));
  for (int64_t p = 0; p < n_pos; ++p)
    for (int64_t j = 0; j < copies; ++j) {
      row_tokens[static_cast<size_t>(p * copies + j)] = tokens[static_cast<size_t>(p)];
      row_pos[static_cast<size_t>(p * copies + j)] = T(first_pos + p);
    }

  if (stats) stats->rows_forwarded += rows;
  const size_t trace_base = traces ? traces->size() : 0;
  if (traces)
    for (int64_t p = 0; p < n_pos; ++p) traces->push_back({first_pos + p, 0, {}});

  Tensor<T> h = embedding_rows<T>(nullptr, w.tok_emb, row_tokens);

  for (size_t li = 0; li < w.layers.size(); ++li) {
    const LayerWeights<T>& lw = w.layers[li];
    LayerKv<T>& kv = cache.layers[li];

    Tensor<T> x = rmsnorm<T>(nullptr, h, lw.attn_gain, T(kNormEps));
    Tensor<T> q = rope_apply<T>(nullptr, matmul<T>(nullptr, x, lw.wq), row_pos, cfg.d_head,
                                T(cfg.rope_theta));
    Tensor<T> k = rope_apply<T>(nullptr, matmul<T>(nullptr, x, lw.wk), row_pos, cfg.d_head,
                                T(cfg.rope_theta));
    Tensor<T> v = matmul<T>(nullptr, x, lw.wv);
    Tensor<T> attn = Tensor<T>::zeros({rows, qw});

    for (int64_t p = 0; p < n_pos; ++p) {
      const int64_t n = first_pos + p;
      // entering a new chunk empties the hidden window
      if (chunked && n == chunk_start(n, spec.C)) kv.ring.clear();
      if (traces && li == 0)
        (*traces)[trace_base + static_cast<size_t>(p)].hidden_before_push =
            static_cast<int64_t>(kv.ring.size());

      // copy 1 joins the main cache before its own attention (self-attention)
      const T* k1 = k.ptr() + (p * copies) * kvw;
      const T* v1 = v.ptr() + (p * copies) * kvw;
      kv.main_k.insert(kv.main_k.end(), k1, k1 + kvw);
      kv.main_v.insert(kv.main_v.end(), v1, v1 + kvw);

      for (int64_t j = 1; j <= copies; ++j) {
        const int64_t row = p * copies + (j - 1);
        const bool use_ring = reads_ring(j) && !kv.ring.empty();
        const int64_t n_main = n;  // originals 1..n
        const int64_t n_ring = use_ring ? static_cast<int64_t>(kv.ring.size()) : 0;
        const int64_t n_same = j - 1;  // same-position copies 2..j, block rows
        const int64_t n_keys = n_main + n_ring + n_same;
        if (stats) stats->attn_score_entries += n_keys;
        if (traces && li == 0 && use_ring && j == copies) {
          StepTrace& tr = (*traces)[trace_base + static_cast<size_t>(p)];
          tr.attended_hidden.clear();
          for (const RingEntry<T>& e : kv.ring) tr.attended_hidden.push_back(e.coord);
        }

        std::vector<T> scores(static_cast<size_t>(n_keys));
        for (int64_t head = 0; head < cfg.n_heads; ++head) {
          const int64_t g = head / group;
          const T* qrow = q.ptr() + row * qw + head * cfg.d_head;
          const int64_t koff = g * cfg.d_head;
          int64_t idx = 0;
          T mx = -std::numeric_limits<T>::infinity();
          auto score_of = [&](const T* krow) {
            T z = T(0);
            for (int64_t c = 0; c < cfg.d_head; ++c) z += qrow[c] * krow[c];
            return z * scl;
          };
          for (int64_t m = 0; m < n_main; ++m)
            scores[static_cast<size_t>(idx++)] = score_of(kv.main_k.data() + m * kvw + koff);
          if (use_ring)
            for (const RingEntry<T>& e : kv.ring)
              scores[static_cast<size_t>(idx++)] = score_of(e.k.data() + koff);
          for (int64_t i = 2; i <= j; ++i)
            scores[static_cast<size_t>(idx++)] =
                score_of(k.ptr() + (p * copies + i - 1) * kvw + koff);
          for (int64_t s = 0; s < n_keys; ++s) mx = std::max(mx, scores[static_cast<size_t>(s)]);
          T denom = T(0);
          for (int64_t s = 0; s < n_keys; ++s) {
            scores[static_cast<size_t>(s)] = std::exp(scores[static_cast<size_t>(s)] - mx);
            denom += scores[static_cast<size_t>(s)];
          }
          T* orow = attn.ptr() + row * qw + head * cfg.d_head;
          idx = 0;
          auto accumulate = [&](const T* vrow) {
            const T pr = scores[static_cast<size_t>(idx++)] / denom;
            for (int64_t c = 0; c < cfg.d_head; ++c) orow[c] += pr * vrow[c];
          };
          for (int64_t m = 0; m < n_main; ++m) accumulate(kv.main_v.data() + m * kvw + koff);
          if (use_ring)
            for (const RingEntry<T>& e : kv.ring) accumulate(e.v.data() + koff);
          for (int64_t i = 2; i <= j; ++i) accumulate(v.ptr() + (p * copies + i - 1) * kvw + koff);
        }
      }

      // hidden copies enter the ring only after the whole position is done
      for (int64_t j = 2; j <= copies; ++j) {
        if (ring_cap == 0) break;
        RingEntry<T> e;
        e.coord = {n, j};
        const T* kj = k.ptr() + (p * copies + j - 1) * kvw;
        const T* vj = v.ptr() + (p * copies + j - 1) * kvw;
        e.k.assign(kj, kj + kvw);
        e.v.assign(vj, vj + kvw);
        kv.ring.push_back(std::move(e));
        while (static_cast<int64_t>(kv.ring.size()) > ring_cap) kv.ring.pop_front();
      }
    }

    h = add<T>(nullptr, h, matmul<T>(nullptr, attn, lw.wo));
    Tensor<T> xf = rmsnorm<T>(nullptr, h, lw.ffn_gain, T(kNormEps));
    h = add<T>(nullptr, h, swiglu_ffn<T>(nullptr, xf, lw.w_gate, lw.w_up, lw.w_down));
  }

  cache.positions += n_pos;
  return h;
}

template <class T>
std::vector<T> logits_of_row(const Weights<T>& w, const Tensor<T>& h, int64_t row) {
  Tensor<T> hrow = row_gather<T>(nullptr, h, {row});
  Tensor<T> normed = rmsnorm<T>(nullptr, hrow, w.final_gain, T(kNormEps));
  Tensor<T> logits = matmul<T>(nullptr, normed, w.unembed);
  return *logits.data;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Prefill
// ---------------------------------------------------------------------------

template <class T>
struct PrefillResult {
  DecodeState<T> state;
  std::vector<T> logits;  // next-token logits (final copy of the last position)
  EngineStats stats;
};

// Prompt processing per variant:
//   PHD / Vanilla  — originals only, plus one K-copy pass at the last
//                    position for the next-token logits.
//   PHD_SWA        — every position gets its K copies (the window's KV chains
//                    through all hidden tokens), a K*t pass.
//   PHD_CSWA       — originals only before the final chunk; K copies inside
//                    it. Hidden KV from earlier chunks can never be attended
//                    again, so skipping it is exact.
//   NaiveRepeat    — full K copies everywhere (everything is retained).
template <class T>
PrefillResult<T> prefill(const Weights<T>& w, std::span<const int64_t> prompt) {
  require(!prompt.empty(), "prefill: empty prompt");
  const ModelConfig& cfg = w.config;
  const int64_t t = static_cast<int64_t>(prompt.size());
  require(t <= cfg.max_t, "prefill: prompt exceeds max_t");

  // first position whose hidden copies must actually be computed
  int64_t split = t;
  switch (cfg.mask.variant) {
    case MaskVariant::Vanilla:
    case MaskVariant::Phd:
      split = t;
      break;
    case MaskVariant::PhdSwa:
    case MaskVariant::NaiveRepeat:
      split = 1;
      break;
    case MaskVariant::PhdCswa:
      split = chunk_start(t, cfg.mask.C);
      break;
  }

  PrefillResult<T> res;
  res.state.cache = KvCache<T>::init(cfg);
  if (split > 1)
    detail::run_segment(w, res.state.cache, prompt.subspan(0, static_cast<size_t>(split - 1)), 1,
                        1, &res.stats);
  Tensor<T> h = detail::run_segment(w, res.state.cache,
                                    prompt.subspan(static_cast<size_t>(split - 1)), split,
                                    cfg.mask.K, &res.stats);
  res.logits = detail::logits_of_row(w, h, h.shape[0] - 1);
  res.state.last_token = prompt.back();
  return res;
}

// ---------------------------------------------------------------------------
// Decode
// ---------------------------------------------------------------------------

// One decode step: all K copies of the new position in a single parallel
// pass. Copy 1's KV joins the main cache, copies 2..K cycle through the ring,
// and the returned logits come from the final copy.
template <class T>
std::vector<T> decode_step(const Weights<T>& w, DecodeState<T>& state, int64_t token,
                           EngineStats* stats = nullptr, StepTrace* trace = nullptr) {
  const ModelConfig& cfg = w.config;
  require(state.cache.positions + 1 <= cfg.max_t, "decode_step: position overflow beyond max_t");
  const int64_t tok[1] = {token};
  std::vector<StepTrace> traces;
  Tensor<T> h = detail::run_segment(w, state.cache, std::span<const int64_t>(tok, 1),
                                    state.cache.positions + 1, cfg.mask.K, stats,
                                    trace ? &traces : nullptr);
  if (trace && !traces.empty()) *trace = std::move(traces.front());
  state.last_token = token;
  return detail::logits_of_row(w, h, h.shape[0] - 1);
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

enum class SampleMode : uint8_t { Greedy, TopK };

template <class T>
struct GenerateResult {
  std::vector<int64_t> tokens;
  std::vector<KvFootprint> footprints;  // after each decode step
  EngineStats stats;
};

template <class T>
int64_t sample_from_logits(const std::vector<T>& logits, SampleMode mode, int64_t top_k,
                           std::mt19937_64& rng) {
  if (mode == SampleMode::Greedy) {
    int64_t best = 0;
    for (int64_t i = 1; i < static_cast<int64_t>(logits.size()); ++i)
      if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
    return best;
  }
  const int64_t k = std::min<int64_t>(std::max<int64_t>(top_k, 1),
                                      static_cast<int64_t>(logits.size()));
  std::vector<int64_t> order(logits.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int64_t a, int64_t b) {
    return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
  });
  std::vector<double> weights(static_cast<size_t>(k));
  const double mx = static_cast<double>(logits[static_cast<size_t>(order[0])]);
  for (int64_t i = 0; i < k; ++i)
    weights[static_cast<size_t>(i)] =
        std::exp(static_cast<double>(logits[static_cast<size_t>(order[static_cast<size_t>(i)])]) - mx);
  std::discrete_distribution<int64_t> dist(weights.begin(), weights.end());
  return order[static_cast<size_t>(dist(rng))];
}

template <class T>
GenerateResult<T> generate(const Weights<T>& w, std::span<const int64_t> prompt,
                           int64_t n_tokens, SampleMode mode = SampleMode::Greedy,
                           int64_t top_k = 40, uint64_t sample_seed = 0) {
  require(n_tokens >= 1, "generate: n_tokens must be >= 1");
  PrefillResult<T> pre = prefill(w, prompt);
  GenerateResult<T> out;
  out.stats = pre.stats;
  DecodeState<T>& state = pre.state;
  state.rng.seed(sample_seed);
  std::vector<T> logits = std::move(pre.logits);
  for (int64_t i = 0; i < n_tokens; ++i) {
    const int64_t next = sample_from_logits(logits, mode, top_k, state.rng);
    out.tokens.push_back(next);
    state.steps += 1;
    logits = decode_step(w, state, next, &out.stats);
    out.footprints.push_back(kv_footprint(w, state));
  }
  return out;
}

}  // namespace phd
