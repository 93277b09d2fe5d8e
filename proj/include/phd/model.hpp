#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "phd/common.hpp"
#include "phd/mask.hpp"
#include "phd/ops.hpp"
#include "phd/tensor.hpp"

namespace phd {

// ---------------------------------------------------------------------------
// Configuration and parameters
// ---------------------------------------------------------------------------

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_kv_heads = 2;
  int64_t d_head = 16;
  int64_t d_ffn = 128;
  int64_t vocab_size = 256;
  int64_t max_t = 256;
  double rope_theta = 10000.0;
  MaskSpec mask;
  uint64_t seed = 1;
  // Research toggle: give each copy its own RoPE position instead of sharing
  // the original position. Off by default; the KV engine requires shared ids.
  bool distinct_copy_positions = false;

  void validate() const {
    require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && n_kv_heads >= 1 && d_head >= 1 &&
                d_ffn >= 1 && vocab_size >= 1 && max_t >= 1,
            "config: all extents must be >= 1");
    require(d_model == n_heads * d_head, "config: d_model must equal n_heads * d_head");
    require(n_heads % n_kv_heads == 0, "config: n_heads must be divisible by n_kv_heads");
    require(d_head % 2 == 0, "config: d_head must be even for rotary embeddings");
    const SpecValidation v = validate_spec(mask);
    require(v.ok, v.ok ? "" : "config: invalid mask spec: " + v.errors.front());
  }
};

constexpr double kNormEps = 1e-6;
constexpr double kInitStd = 0.02;

template <class T>
struct LayerWeights {
  Tensor<T> attn_gain;  // [d_model]
  Tensor<T> wq;         // [d_model, n_heads*d_head]
  Tensor<T> wk;         // [d_model, n_kv_heads*d_head]
  Tensor<T> wv;         // [d_model, n_kv_heads*d_head]
  Tensor<T> wo;         // [n_heads*d_head, d_model]
  Tensor<T> ffn_gain;   // [d_model]
  Tensor<T> w_gate;     // [d_model, d_ffn]
  Tensor<T> w_up;       // [d_model, d_ffn]
  Tensor<T> w_down;     // [d_ffn, d_model]
};

template <class T>
struct Weights {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab, d_model]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_gain;  // [d_model]
  Tensor<T> unembed;     // [d_model, vocab] (untied)

  // Projections are seeded normal(0, 0.02); norm gains start at one.
  static Weights init(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const T std_ = T(kInitStd);
    Weights w;
    w.config = cfg;
    w.tok_emb = Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, std_);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      LayerWeights<T> lw;
      lw.attn_gain = Tensor<T>::full({cfg.d_model}, T(1));
      lw.wq = Tensor<T>::randn({cfg.d_model, cfg.n_heads * cfg.d_head}, rng, std_);
      lw.wk = Tensor<T>::randn({cfg.d_model, cfg.n_kv_heads * cfg.d_head}, rng, std_);
      lw.wv = Tensor<T>::randn({cfg.d_model, cfg.n_kv_heads * cfg.d_head}, rng, std_);
      lw.wo = Tensor<T>::randn({cfg.n_heads * cfg.d_head, cfg.d_model}, rng, std_);
      lw.ffn_gain = Tensor<T>::full({cfg.d_model}, T(1));
      lw.w_gate = Tensor<T>::randn({cfg.d_model, cfg.d_ffn}, rng, std_);
      lw.w_up = Tensor<T>::randn({cfg.d_model, cfg.d_ffn}, rng, std_);
      lw.w_down = Tensor<T>::randn({cfg.d_ffn, cfg.d_model}, rng, std_);
      w.layers.push_back(std::move(lw));
    }
    w.final_gain = Tensor<T>::full({cfg.d_model}, T(1));
    w.unembed = Tensor<T>::randn({cfg.d_model, cfg.vocab_size}, rng, std_);
    return w;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "attn_gain", &layers[l].attn_gain);
      out.emplace_back(p + "wq", &layers[l].wq);
      out.emplace_back(p + "wk", &layers[l].wk);
      out.emplace_back(p + "wv", &layers[l].wv);
      out.emplace_back(p + "wo", &layers[l].wo);
      out.emplace_back(p + "ffn_gain", &layers[l].ffn_gain);
      out.emplace_back(p + "w_gate", &layers[l].w_gate);
      out.emplace_back(p + "w_up", &layers[l].w_up);
      out.emplace_back(p + "w_down", &layers[l].w_down);
    }
    out.emplace_back("final_gain", &final_gain);
    out.emplace_back("unembed", &unembed);
    return out;
  }

  void set_requires_grad() {
    for (auto& [name, t] : named_tensors()) t->set_requires_grad();
  }

  // Shares parameter data but gives every tensor a private zeroed gradient
  // buffer, so batch rows can run on parallel workers.
  Weights shadow_with_fresh_grads() const {
    Weights w = *this;
    for (auto& [name, t] : w.named_tensors()) *t = t->with_fresh_grad();
    return w;
  }
};

// ---------------------------------------------------------------------------
// Token repetition
// ---------------------------------------------------------------------------

// K-fold repeated token sequence with per-slot coordinates and RoPE position
// ids. All copies of position n carry the same token id and (by default) the
// same position id n.
struct RepeatedSequence {
  int64_t t = 0;
  int64_t K = 1;
  Layout layout = Layout::Interleaved;
  std::vector<int64_t> tokens;     // per slot
  std::vector<TokenCoord> coords;  // per slot
  std::vector<int64_t> positions;  // per slot

  int64_t slots() const { return t * K; }
};

inline RepeatedSequence repeat_tokens(std::span<const int64_t> tokens, int64_t K, Layout layout,
                                      bool distinct_copy_positions = false) {
  require(!tokens.empty(), "repeat_tokens: empty sequence");
  require(K >= 1, "repeat_tokens: K must be >= 1");
  RepeatedSequence r;
  r.t = static_cast<int64_t>(tokens.size());
  r.K = K;
  r.layout = layout;
  const int64_t total = r.t * K;
  r.tokens.resize(static_cast<size_t>(total));
  r.coords.resize(static_cast<size_t>(total));
  r.positions.resize(static_cast<size_t>(total));
  for (int64_t s = 0; s < total; ++s) {
    const TokenCoord c = coord_at(layout, s, r.t, K);
    r.coords[static_cast<size_t>(s)] = c;
    r.tokens[static_cast<size_t>(s)] = tokens[static_cast<size_t>(c.n - 1)];
    r.positions[static_cast<size_t>(s)] =
        distinct_copy_positions ? (c.n - 1) * K + c.j : c.n;
  }
  return r;
}

// Slot index of the final copy (n, K) under the sequence's layout.
inline int64_t final_copy_slot(const RepeatedSequence& rseq, int64_t n) {
  return slot_of(rseq.layout, {n, rseq.K}, rseq.t, rseq.K);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct ForwardStats {
  int64_t attn_score_entries = 0;  // accumulated across layers
};

// Fused gather attention over two contiguous key ranges per query. Touches
// exactly ranges.total_entries() score entries per head. q is [S, H*dh]; k/v
// are [S, Hkv*dh] with kv heads broadcast to query-head groups.
template <class T>
Tensor<T> masked_attention_gather(Tape<T>* tape, const Tensor<T>& q, const Tensor<T>& k,
                                  const Tensor<T>& v, const AttnRanges& ranges, int64_t n_heads,
                                  int64_t n_kv_heads, int64_t d_head,
                                  ForwardStats* stats = nullptr) {
  const int64_t S = q.shape[0];
  require(static_cast<int64_t>(ranges.orig_end.size()) == S,
          "masked_attention_gather: range count mismatch");
  require(q.shape[1] == n_heads * d_head && k.shape[1] == n_kv_heads * d_head &&
              v.shape[1] == n_kv_heads * d_head,
          "masked_attention_gather: head extents mismatch");
  const int64_t group = n_heads / n_kv_heads;
  const T scl = T(1) / std::sqrt(T(d_head));
  const int64_t qw = n_heads * d_head, kw = n_kv_heads * d_head;

  // per-query key counts and prob-buffer offsets (shared by all heads)
  auto counts = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(S));
  auto offsets = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(S + 1), 0);
  for (int64_t s = 0; s < S; ++s) {
    (*counts)[static_cast<size_t>(s)] =
        ranges.orig_end[static_cast<size_t>(s)] +
        (ranges.hid_end[static_cast<size_t>(s)] - ranges.hid_begin[static_cast<size_t>(s)]);
    (*offsets)[static_cast<size_t>(s + 1)] =
        (*offsets)[static_cast<size_t>(s)] + (*counts)[static_cast<size_t>(s)];
  }
  const int64_t total_entries = (*offsets)[static_cast<size_t>(S)];
  if (stats) stats->attn_score_entries += total_entries;

  Tensor<T> out = Tensor<T>::zeros({S, qw});
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(total_entries * n_heads));

  auto for_each_key = [&ranges](int64_t s, auto&& fn) {
    const int64_t oe = ranges.orig_end[static_cast<size_t>(s)];
    for (int64_t key = 0; key < oe; ++key) fn(key);
    const int64_t hb = ranges.hid_begin[static_cast<size_t>(s)];
    const int64_t he = ranges.hid_end[static_cast<size_t>(s)];
    for (int64_t key = hb; key < he; ++key) fn(key);
  };

  for (int64_t h = 0; h < n_heads; ++h) {
    const int64_t g = h / group;
    const int64_t qoff = h * d_head, koff = g * d_head;
    for (int64_t s = 0; s < S; ++s) {
      const T* qrow = q.ptr() + s * qw + qoff;
      T* prow = probs->data() + h * total_entries + (*offsets)[static_cast<size_t>(s)];
      // scores and stable softmax over the gathered keys
      T mx = -std::numeric_limits<T>::infinity();
      int64_t idx = 0;
      for_each_key(s, [&](int64_t key) {
        const T* krow = k.ptr() + key * kw + koff;
        T z = T(0);
        for (int64_t c = 0; c < d_head; ++c) z += qrow[c] * krow[c];
        z *= scl;
        prow[idx++] = z;
        mx = std::max(mx, z);
      });
      T denom = T(0);
      for (int64_t i = 0; i < idx; ++i) {
        prow[i] = std::exp(prow[i] - mx);
        denom += prow[i];
      }
      for (int64_t i = 0; i < idx; ++i) prow[i] /= denom;
      // weighted value sum
      T* orow = out.ptr() + s * qw + qoff;
      idx = 0;
      for_each_key(s, [&](int64_t key) {
        const T* vrow = v.ptr() + key * kw + koff;
        const T p = prow[idx++];
        for (int64_t c = 0; c < d_head; ++c) orow[c] += p * vrow[c];
      });
    }
  }

  if (detail::want_grad(tape, {&q, &k, &v})) {
    detail::mark_output(tape, out);
    Tensor<T> pq = q, pk = k, pv = v, po = out;
    auto pranges = std::make_shared<AttnRanges>(ranges);
    tape->record([pq, pk, pv, po, probs, offsets, pranges, n_heads, n_kv_heads, d_head, group,
                  scl, qw, kw, S, total_entries]() mutable {
      std::vector<T> dp;  // per-query scratch
      auto for_each_key = [&r = *pranges](int64_t s, auto&& fn) {
        const int64_t oe = r.orig_end[static_cast<size_t>(s)];
        for (int64_t key = 0; key < oe; ++key) fn(key);
        for (int64_t key = r.hid_begin[static_cast<size_t>(s)];
             key < r.hid_end[static_cast<size_t>(s)]; ++key)
          fn(key);
      };
      for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t g = h / group;
        const int64_t qoff = h * d_head, koff = g * d_head;
        for (int64_t s = 0; s < S; ++s) {
          const T* prow = probs->data() + h * total_entries + (*offsets)[static_cast<size_t>(s)];
          const T* dout = po.grad_ptr() + s * qw + qoff;
          const T* qrow = pq.ptr() + s * qw + qoff;
          const int64_t cnt = (*offsets)[static_cast<size_t>(s + 1)] -
                              (*offsets)[static_cast<size_t>(s)];
          dp.assign(static_cast<size_t>(cnt), T(0));
          // dp = dOut . v  and the softmax pullback dot
          int64_t idx = 0;
          T dot = T(0);
          for_each_key(s, [&](int64_t key) {
            const T* vrow = pv.ptr() + key * kw + koff;
            T d = T(0);
            for (int64_t c = 0; c < d_head; ++c) d += dout[c] * vrow[c];
            dp[static_cast<size_t>(idx)] = d;
            dot += d * prow[idx];
            ++idx;
          });
          // dv += p * dOut ; ds = p .* (dp - dot) ; dq += scl * ds . k ; dk += scl * ds . q
          T* dqrow = pq.requires_grad ? pq.grad_ptr() + s * qw + qoff : nullptr;
          idx = 0;
          for_each_key(s, [&](int64_t key) {
            const T p = prow[idx];
            const T ds = p * (dp[static_cast<size_t>(idx)] - dot) * scl;
            if (pv.requires_grad) {
              T* dvrow = pv.grad_ptr() + key * kw + koff;
              for (int64_t c = 0; c < d_head; ++c) dvrow[c] += p * dout[c];
            }
            const T* krow = pk.ptr() + key * kw + koff;
            if (dqrow)
              for (int64_t c = 0; c < d_head; ++c) dqrow[c] += ds * krow[c];
            if (pk.requires_grad) {
              T* dkrow = pk.grad_ptr() + key * kw + koff;
              for (int64_t c = 0; c < d_head; ++c) dkrow[c] += ds * qrow[c];
            }
            ++idx;
          });
        }
      }
    });
  }
  return out;
}

// a * b^T as a taped op (used by the dense attention path).
template <class T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2, "matmul_nt: operands must be 2-d");
  require(a.shape[1] == b.shape[1], "matmul_nt: inner extents do not match");
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor<T> out = Tensor<T>::zeros({m, n});
  gemm_nt(out.ptr(), a.ptr(), b.ptr(), m, k, n);
  if (detail::want_grad(tape, {&a, &b})) {
    detail::mark_output(tape, out);
    Tensor<T> pa = a, pb = b, po = out;
    tape->record([pa, pb, po, m, k, n]() mutable {
      if (pa.requires_grad)  // dA += dC * B
        gemm_nn(pa.grad_ptr(), po.grad_ptr(), pb.ptr(), m, n, k, true);
      if (pb.requires_grad)  // dB += dC^T * A
        gemm_tn(pb.grad_ptr(), po.grad_ptr(), pa.ptr(), m, n, k, true);
    });
  }
  return out;
}

// Shared per-forward context: the mask realized for the sequence layout.
template <class T>
struct ForwardCtx {
  Layout layout = Layout::Interleaved;
  BoolMatrix mask;    // dense path (interleaved)
  AttnRanges ranges;  // gather path (grouped)
  std::vector<T> positions;

  static ForwardCtx make(const ModelConfig& cfg, const RepeatedSequence& rseq) {
    require(rseq.K == cfg.mask.K, "forward: sequence K does not match mask spec");
    require(rseq.t <= cfg.max_t, "forward: sequence length exceeds max_t");
    ForwardCtx ctx;
    ctx.layout = rseq.layout;
    if (rseq.layout == Layout::Interleaved)
      ctx.mask = build_mask(cfg.mask, rseq.t, Layout::Interleaved);
    else
      ctx.ranges = grouped_attention_ranges(cfg.mask, rseq.t);
    ctx.positions.reserve(rseq.positions.size());
    for (int64_t p : rseq.positions) ctx.positions.push_back(T(p));
    return ctx;
  }
};

// Attention sublayer (norm -> qkv -> rope -> masked attention -> out proj).
// The grouped path gathers exactly the attendable keys; the dense path builds
// the full score matrix and masks it, and serves as the oracle.
template <class T>
Tensor<T> attention_sublayer(Tape<T>* tape, const LayerWeights<T>& lw, const Tensor<T>& h,
                             const ModelConfig& cfg, const ForwardCtx<T>& ctx,
                             ForwardStats* stats = nullptr) {
  Tensor<T> x = rmsnorm(tape, h, lw.attn_gain, T(kNormEps));
  Tensor<T> q = rope_apply(tape, matmul(tape, x, lw.wq), ctx.positions, cfg.d_head,
                           T(cfg.rope_theta));
  Tensor<T> k = rope_apply(tape, matmul(tape, x, lw.wk), ctx.positions, cfg.d_head,
                           T(cfg.rope_theta));
  Tensor<T> v = matmul(tape, x, lw.wv);

  Tensor<T> attn;
  if (ctx.layout == Layout::Grouped) {
    attn = masked_attention_gather(tape, q, k, v, ctx.ranges, cfg.n_heads, cfg.n_kv_heads,
                                   cfg.d_head, stats);
  } else {
    const int64_t group = cfg.n_heads / cfg.n_kv_heads;
    const T scl = T(1) / std::sqrt(T(cfg.d_head));
    std::vector<Tensor<T>> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int64_t head = 0; head < cfg.n_heads; ++head) {
      const int64_t g = head / group;
      Tensor<T> qh = col_slice(tape, q, head * cfg.d_head, cfg.d_head);
      Tensor<T> kh = col_slice(tape, k, g * cfg.d_head, cfg.d_head);
      Tensor<T> vh = col_slice(tape, v, g * cfg.d_head, cfg.d_head);
      Tensor<T> scores = scale(tape, matmul_nt(tape, qh, kh), scl);
      Tensor<T> probs = softmax_rows(tape, scores, ctx.mask);
      heads.push_back(matmul(tape, probs, vh));
    }
    attn = concat_cols(tape, heads);
    // the dense path materializes the full S x S score table
    if (stats) stats->attn_score_entries += h.shape[0] * h.shape[0];
  }
  return matmul(tape, attn, lw.wo);
}

// The spec'd grouped attention entry point: requires a grouped-layout
// sequence and computes one attention sublayer over it.
template <class T>
Tensor<T> attention_grouped(Tape<T>* tape, const LayerWeights<T>& lw, const Tensor<T>& hidden,
                            const RepeatedSequence& rseq, const ModelConfig& cfg,
                            ForwardStats* stats = nullptr) {
  require(rseq.layout == Layout::Grouped, "attention_grouped: sequence layout must be Grouped");
  ForwardCtx<T> ctx = ForwardCtx<T>::make(cfg, rseq);
  return attention_sublayer(tape, lw, hidden, cfg, ctx, stats);
}

// ---------------------------------------------------------------------------
// Full forward
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> forward_from_embeddings(const Weights<T>& w, const Tensor<T>& emb,
                                  const RepeatedSequence& rseq, Tape<T>* tape = nullptr,
                                  ForwardStats* stats = nullptr) {
  const ModelConfig& cfg = w.config;
  require(emb.shape.size() == 2 && emb.shape[0] == rseq.slots() && emb.shape[1] == cfg.d_model,
          "forward: embedding shape mismatch");
  ForwardCtx<T> ctx = ForwardCtx<T>::make(cfg, rseq);
  Tensor<T> h = emb;
  for (const LayerWeights<T>& lw : w.layers) {
    h = add(tape, h, attention_sublayer(tape, lw, h, cfg, ctx, stats));
    Tensor<T> x = rmsnorm(tape, h, lw.ffn_gain, T(kNormEps));
    h = add(tape, h, swiglu_ffn(tape, x, lw.w_gate, lw.w_up, lw.w_down));
  }
  Tensor<T> xf = rmsnorm(tape, h, w.final_gain, T(kNormEps));
  return matmul(tape, xf, w.unembed);
}

// Dense forward over all K*t slots; logits per slot.
template <class T>
Tensor<T> forward_full(const Weights<T>& w, const RepeatedSequence& rseq, Tape<T>* tape = nullptr,
                       ForwardStats* stats = nullptr) {
  Tensor<T> emb = embedding_rows(tape, w.tok_emb, rseq.tokens);
  return forward_from_embeddings(w, emb, rseq, tape, stats);
}

// Next-token loss over the final copy slots only. targets[i] is the token at
// position i+2 ... i.e. the successor of position i+1; pass t or t-1 targets.
template <class T>
Tensor<T> loss_final_copy(Tape<T>* tape, const Tensor<T>& logits, const RepeatedSequence& rseq,
                          const std::vector<int64_t>& targets) {
  const auto n = static_cast<int64_t>(targets.size());
  require(n == rseq.t || n == rseq.t - 1, "loss_final_copy: target count mismatch");
  require(n >= 1, "loss_final_copy: no targets");
  std::vector<int64_t> slots;
  slots.reserve(static_cast<size_t>(n));
  for (int64_t pos = 1; pos <= n; ++pos) slots.push_back(final_copy_slot(rseq, pos));
  Tensor<T> picked = row_gather(tape, logits, slots);
  return cross_entropy(tape, picked, targets);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerParams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <class T>
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // parallel to Weights::named_tensors order

  static AdamState init(Weights<T>& w) {
    AdamState s;
    for (auto& [name, t] : w.named_tensors()) {
      s.m.emplace_back(static_cast<size_t>(t->numel()), T(0));
      s.v.emplace_back(static_cast<size_t>(t->numel()), T(0));
    }
    return s;
  }
};

struct TrainBatch {
  std::vector<RepeatedSequence> rows;
  std::vector<std::vector<int64_t>> targets;  // per row
};

// One AdamW step over a batch. Rows run on parallel workers with private
// gradient buffers; reduction happens on the main thread in row order, so the
// result is identical for any worker count.
template <class T>
T train_step(Weights<T>& w, const TrainBatch& batch, AdamState<T>& opt_state,
             const OptimizerParams& opt, T lr) {
  const auto b = static_cast<int64_t>(batch.rows.size());
  require(b >= 1 && batch.targets.size() == batch.rows.size(), "train_step: malformed batch");

  std::vector<Weights<T>> shadows(static_cast<size_t>(b));
  std::vector<T> losses(static_cast<size_t>(b), T(0));
  std::vector<std::string> failures(static_cast<size_t>(b));
  parallel_for(b, [&](int64_t row) {
    try {
      Weights<T> shadow = w.shadow_with_fresh_grads();
      Tape<T> tape;
      Tensor<T> logits = forward_full(shadow, batch.rows[static_cast<size_t>(row)], &tape);
      Tensor<T> loss = loss_final_copy(&tape, logits, batch.rows[static_cast<size_t>(row)],
                                       batch.targets[static_cast<size_t>(row)]);
      tape.backward(loss);
      losses[static_cast<size_t>(row)] = loss.scalar();
      shadows[static_cast<size_t>(row)] = std::move(shadow);
    } catch (const std::exception& e) {
      failures[static_cast<size_t>(row)] = e.what();
    }
  });
  for (const auto& f : failures)
    if (!f.empty()) throw std::runtime_error("train_step: row failed: " + f);

  T mean_loss = T(0);
  for (T l : losses) mean_loss += l;
  mean_loss /= T(b);
  if (!std::isfinite(static_cast<double>(mean_loss)))
    throw std::runtime_error("train_step: non-finite loss at optimizer step " +
                             std::to_string(opt_state.step) + "; aborting");

  // fixed-order reduction: rows in index order, then AdamW
  auto params = w.named_tensors();
  std::vector<std::vector<std::pair<std::string, Tensor<T>*>>> shadow_params;
  shadow_params.reserve(static_cast<size_t>(b));
  for (auto& shadow : shadows) shadow_params.push_back(shadow.named_tensors());

  opt_state.step += 1;
  const T b1 = T(opt.beta1), b2 = T(opt.beta2);
  const T bias1 = T(1) - std::pow(b1, T(opt_state.step));
  const T bias2 = T(1) - std::pow(b2, T(opt_state.step));
  const T inv_b = T(1) / T(b);
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<T>* param = params[p].second;
    const int64_t n = param->numel();
    std::vector<T>& m = opt_state.m[p];
    std::vector<T>& v = opt_state.v[p];
    for (int64_t i = 0; i < n; ++i) {
      T g = T(0);
      for (int64_t row = 0; row < b; ++row)
        g += (*shadow_params[static_cast<size_t>(row)][p].second->grad)[static_cast<size_t>(i)];
      g *= inv_b;
      m[static_cast<size_t>(i)] = b1 * m[static_cast<size_t>(i)] + (T(1) - b1) * g;
      v[static_cast<size_t>(i)] = b2 * v[static_cast<size_t>(i)] + (T(1) - b2) * g * g;
      const T mhat = m[static_cast<size_t>(i)] / bias1;
      const T vhat = v[static_cast<size_t>(i)] / bias2;
      T& x = (*param->data)[static_cast<size_t>(i)];
      x -= lr * (mhat / (std::sqrt(vhat) + T(opt.eps)) + T(opt.weight_decay) * x);
    }
  }
  return mean_loss;
}

// Cosine learning-rate schedule with linear warmup.
inline double lr_at_step(int64_t step, int64_t total_steps, double lr_max, double lr_min,
                         int64_t warmup) {
  if (warmup > 0 && step < warmup)
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps <= warmup) return lr_min;
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(total_steps - warmup);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "PHDT", u32 version, config JSON blob, then raw
// little-endian tensor records. Round-trips bit-exactly.
// ---------------------------------------------------------------------------

constexpr uint32_t kCheckpointVersion = 1;

// Serialized by run_config.cpp (JSON); declared here to keep the template
// functions self-contained.
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

namespace detail {
inline void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, Weights<T>& w) {
  std::ofstream f(path, std::ios::binary);
  require_io(f.good(), "checkpoint: cannot open " + path + " for writing");
  f.write("PHDT", 4);
  detail::write_u32(f, kCheckpointVersion);
  const std::string cfg = config_to_json(w.config);
  detail::write_u32(f, static_cast<uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  auto tensors = w.named_tensors();
  detail::write_u32(f, static_cast<uint32_t>(tensors.size()));
  for (auto& [name, t] : tensors) {
    detail::write_u32(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(f, static_cast<uint32_t>(t->shape.size()));
    for (int64_t e : t->shape) detail::write_u64(f, static_cast<uint64_t>(e));
    const uint8_t tag = static_cast<uint8_t>(Tensor<T>::dtype);
    f.write(reinterpret_cast<const char*>(&tag), 1);
    f.write(reinterpret_cast<const char*>(t->ptr()),
            static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(T))));
  }
  require_io(f.good(), "checkpoint: write failed for " + path);
}

struct CheckpointInfo {
  uint32_t version = 0;
  std::string config_json;
};

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require_io(f.good(), "checkpoint: cannot open " + path);
  char magic[4] = {};
  f.read(magic, 4);
  require_io(f.good() && std::string(magic, 4) == "PHDT", "checkpoint: bad magic in " + path);
  CheckpointInfo info;
  info.version = detail::read_u32(f);
  require_io(info.version == kCheckpointVersion,
          "checkpoint: unsupported format version " + std::to_string(info.version));
  const uint32_t len = detail::read_u32(f);
  info.config_json.resize(len);
  f.read(info.config_json.data(), len);
  require_io(f.good(), "checkpoint: truncated config blob in " + path);
  return info;
}

// Dtype tag of the first tensor record (all records share one dtype).
inline DType checkpoint_dtype(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require_io(f.good(), "checkpoint: cannot open " + path);
  char magic[4] = {};
  f.read(magic, 4);
  require_io(f.good() && std::string(magic, 4) == "PHDT", "checkpoint: bad magic in " + path);
  const uint32_t version = detail::read_u32(f);
  require_io(version == kCheckpointVersion,
          "checkpoint: unsupported format version " + std::to_string(version));
  const uint32_t cfg_len = detail::read_u32(f);
  f.seekg(cfg_len, std::ios::cur);
  detail::read_u32(f);  // tensor count
  const uint32_t name_len = detail::read_u32(f);
  f.seekg(name_len, std::ios::cur);
  const uint32_t rank = detail::read_u32(f);
  f.seekg(static_cast<std::streamoff>(rank) * 8, std::ios::cur);
  uint8_t tag = 0;
  f.read(reinterpret_cast<char*>(&tag), 1);
  require_io(f.good() && (tag == 1 || tag == 2), "checkpoint: malformed tensor record in " + path);
  return static_cast<DType>(tag);
}

template <class T>
Weights<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require_io(f.good(), "checkpoint: cannot open " + path);
  char magic[4] = {};
  f.read(magic, 4);
  require_io(f.good() && std::string(magic, 4) == "PHDT", "checkpoint: bad magic in " + path);
  const uint32_t version = detail::read_u32(f);
  require_io(version == kCheckpointVersion,
          "checkpoint: unsupported format version " + std::to_string(version));
  const uint32_t cfg_len = detail::read_u32(f);
  std::string cfg_text(cfg_len, '\0');
  f.read(cfg_text.data(), cfg_len);
  const ModelConfig cfg = config_from_json(cfg_text);

  Weights<T> w;
  w.config = cfg;
  w.layers.resize(static_cast<size_t>(cfg.n_layers));
  auto tensors = w.named_tensors();
  const uint32_t count = detail::read_u32(f);
  require_io(count == tensors.size(), "checkpoint: tensor count mismatch in " + path);
  for (auto& [name, t] : tensors) {
    const uint32_t name_len = detail::read_u32(f);
    std::string got(name_len, '\0');
    f.read(got.data(), name_len);
    require_io(got == name, "checkpoint: unexpected tensor record '" + got + "'");
    const uint32_t rank = detail::read_u32(f);
    std::vector<int64_t> shape(rank);
    for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int64_t>(detail::read_u64(f));
    uint8_t tag = 0;
    f.read(reinterpret_cast<char*>(&tag), 1);
    require_io(tag == static_cast<uint8_t>(Tensor<T>::dtype),
            "checkpoint: dtype mismatch for tensor '" + name + "'");
    *t = Tensor<T>::zeros(shape);
    f.read(reinterpret_cast<char*>(t->ptr()),
           static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(T))));
    require_io(f.good(), "checkpoint: truncated tensor data for '" + name + "'");
  }
  return w;
}

}  // namespace phd
