#include "phd/cost_model.hpp"

#include <algorithm>
#include <sstream>

namespace phd {

int64_t matmul_param_count(const ModelConfig& cfg) {
  const int64_t qw = cfg.n_heads * cfg.d_head;
  const int64_t kvw = cfg.n_kv_heads * cfg.d_head;
  const int64_t per_layer = cfg.d_model * qw        // wq
                            + 2 * cfg.d_model * kvw  // wk, wv
                            + qw * cfg.d_model       // wo
                            + 3 * cfg.d_model * cfg.d_ffn;
  return cfg.n_layers * per_layer + cfg.d_model * cfg.vocab_size;  // + unembedding
}

int64_t total_param_count(const ModelConfig& cfg) {
  const int64_t gains = cfg.n_layers * 2 * cfg.d_model + cfg.d_model;
  return matmul_param_count(cfg) + cfg.vocab_size * cfg.d_model + gains;  // + embedding
}

int64_t kv_entry_bytes(const ModelConfig& cfg, int64_t dtype_bytes) {
  return 2 * cfg.n_kv_heads * cfg.d_head * dtype_bytes * cfg.n_layers;
}

namespace {

// Hidden entries resident after processing position p (the ring state a live
// run reports): pushes since the chunk start, capped by the window.
int64_t hidden_after(const MaskSpec& spec, int64_t p) {
  const int64_t per_pos = spec.K - 1;
  switch (spec.variant) {
    case MaskVariant::Vanilla:
    case MaskVariant::Phd:
      return 0;
    case MaskVariant::NaiveRepeat:
      return p * per_pos;
    case MaskVariant::PhdSwa:
      return std::min(spec.W, p * per_pos);
    case MaskVariant::PhdCswa:
      return std::min(spec.W, (p - chunk_start(p, spec.C) + 1) * per_pos);
  }
  return 0;
}

// Attention entries computed during prefill: the mask rows of exactly the
// slots the prefill rules forward. Originals attend n keys each; a hidden
// query (n, j) attends (n-1) + j + window(n).
int64_t prefill_attn_entries(const MaskSpec& spec, int64_t t) {
  const int64_t K = spec.K;
  const int64_t causal = t * (t + 1) / 2;
  switch (spec.variant) {
    case MaskVariant::Vanilla:
    case MaskVariant::Phd:
      // only original tokens require computation
      return causal;
    case MaskVariant::NaiveRepeat:
    case MaskVariant::PhdSwa:
      return mask_stats(spec, t).true_entries;
    case MaskVariant::PhdCswa: {
      int64_t entries = causal;
      const int64_t s = chunk_start(t, spec.C);
      for (int64_t n = s; n <= t; ++n) {
        const int64_t win = window_len_before(spec, n);
        // copies j = 2..K of position n
        entries += (K - 1) * (n - 1) + (K * (K + 1) / 2 - 1) + (K - 1) * win;
      }
      return entries;
    }
  }
  return causal;
}

double roofline(double flops, double bytes, const HardwareModel& hw) {
  return std::max(flops / hw.peak_flops, bytes / hw.mem_bandwidth);
}

}  // namespace

FootprintPrediction predicted_footprint(const ModelConfig& cfg, int64_t positions,
                                        int64_t dtype_bytes) {
  FootprintPrediction f;
  f.main_entries_per_layer = positions;
  f.hidden_entries_per_layer = hidden_after(cfg.mask, positions);
  f.total_bytes =
      (f.main_entries_per_layer + f.hidden_entries_per_layer) * kv_entry_bytes(cfg, dtype_bytes);
  return f;
}

CostReport prefill_cost(const ModelConfig& cfg, int64_t t, const HardwareModel& hw,
                        int64_t dtype_bytes) {
  require(t >= 1, "prefill_cost: t must be >= 1");
  const MaskSpec& spec = cfg.mask;
  CostReport r;
  r.spec = spec;
  r.t = t;
  r.phase = Phase::Prefill;
  switch (spec.variant) {
    case MaskVariant::Vanilla:
    case MaskVariant::Phd:
      r.tokens_forwarded = t;
      break;
    case MaskVariant::PhdSwa:
    case MaskVariant::NaiveRepeat:
      r.tokens_forwarded = spec.K * t;
      break;
    case MaskVariant::PhdCswa:
      r.tokens_forwarded = t + (spec.K - 1) * (t - chunk_start(t, spec.C) + 1);
      break;
  }
  r.attn_score_entries = prefill_attn_entries(spec, t);
  r.flops_total = 2.0 * static_cast<double>(matmul_param_count(cfg)) *
                      static_cast<double>(r.tokens_forwarded) +
                  4.0 * static_cast<double>(cfg.d_model) *
                      static_cast<double>(r.attn_score_entries);
  const FootprintPrediction fp = predicted_footprint(cfg, t, dtype_bytes);
  r.kv_entries = fp.main_entries_per_layer + fp.hidden_entries_per_layer;
  r.bytes_weights_read = static_cast<double>(total_param_count(cfg)) * dtype_bytes;
  r.bytes_kv_read = static_cast<double>(fp.total_bytes);
  r.modeled_latency = roofline(r.flops_total, r.bytes_weights_read + r.bytes_kv_read, hw);
  return r;
}

CostReport decode_cost(const ModelConfig& cfg, int64_t t_context, const HardwareModel& hw,
                       int64_t dtype_bytes) {
  require(t_context >= 0, "decode_cost: t_context must be >= 0");
  const MaskSpec& spec = cfg.mask;
  const int64_t K = spec.K;
  const int64_t p = t_context + 1;  // position being generated
  CostReport r;
  r.spec = spec;
  r.t = t_context;
  r.phase = Phase::Decode;
  r.tokens_forwarded = K;
  // the step's K rows attend: originals 1..p, the hidden window (hidden rows
  // only, all rows for NaiveRepeat), and same-position copies 2..j
  const int64_t win = window_len_before(spec, p);
  const int64_t window_readers = spec.variant == MaskVariant::NaiveRepeat ? K : K - 1;
  r.attn_score_entries = K * p + window_readers * win + K * (K - 1) / 2;
  r.flops_total =
      2.0 * static_cast<double>(matmul_param_count(cfg)) * static_cast<double>(K) +
      4.0 * static_cast<double>(cfg.d_model) * static_cast<double>(r.attn_score_entries);
  r.kv_entries = t_context + win;  // cache entries resident when the step starts
  r.bytes_weights_read = static_cast<double>(total_param_count(cfg)) * dtype_bytes;
  r.bytes_kv_read = static_cast<double>((t_context + win + K) * kv_entry_bytes(cfg, dtype_bytes));
  r.modeled_latency = roofline(r.flops_total, r.bytes_weights_read + r.bytes_kv_read, hw);
  return r;
}

std::vector<CostReport> compare_variants(const ModelConfig& base,
                                         const std::vector<MaskSpec>& specs,
                                         const std::vector<int64_t>& t_grid,
                                         const HardwareModel& hw, int64_t dtype_bytes) {
  require(!specs.empty() && !t_grid.empty(), "compare_variants: empty grid");
  std::vector<CostReport> out;
  for (const MaskSpec& spec : specs) {
    ModelConfig cfg = base;
    cfg.mask = spec;
    const SpecValidation v = validate_spec(spec);
    require(v.ok, v.ok ? "" : "compare_variants: invalid spec: " + v.errors.front());
    for (int64_t t : t_grid) {
      out.push_back(prefill_cost(cfg, t, hw, dtype_bytes));
      out.push_back(decode_cost(cfg, t, hw, dtype_bytes));
    }
  }
  return out;
}

std::string cost_csv_header() {
  return "variant,K,W,C,t,phase,tokens_forwarded,attn_score_entries,flops_total,kv_entries,"
         "bytes_weights_read,bytes_kv_read,modeled_latency_s";
}

std::string cost_csv_row(const CostReport& r) {
  std::ostringstream ss;
  ss << variant_name(r.spec.variant) << "," << r.spec.K << "," << r.spec.W << ","
     << (r.spec.C == kNoChunking ? std::string("inf") : std::to_string(r.spec.C)) << "," << r.t
     << "," << (r.phase == Phase::Prefill ? "prefill" : "decode") << "," << r.tokens_forwarded
     << "," << r.attn_score_entries << "," << r.flops_total << "," << r.kv_entries << ","
     << r.bytes_weights_read << "," << r.bytes_kv_read << "," << r.modeled_latency;
  return ss.str();
}

}  // namespace phd
