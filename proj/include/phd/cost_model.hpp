#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phd/mask.hpp"
#include "phd/model.hpp"

namespace phd {

// Two-term roofline: latency = max(flops / peak, bytes / bandwidth).
struct HardwareModel {
  double peak_flops = 1e12;      // FLOP/s
  double mem_bandwidth = 1e11;   // bytes/s
};

// A100-80GB-like figures: dense fp16 tensor-core peak and HBM2e bandwidth.
inline constexpr HardwareModel kA100Like{312e12, 2.039e12};

enum class Phase : uint8_t { Prefill, Decode };

struct CostReport {
  MaskSpec spec;
  int64_t t = 0;  // prompt length (prefill) or context length (decode)
  Phase phase = Phase::Prefill;
  int64_t tokens_forwarded = 0;    // rows through the network in this phase
  int64_t attn_score_entries = 0;  // query-key pairs computed
  double flops_total = 0.0;
  int64_t kv_entries = 0;  // per-layer cache entries read by the phase
  double bytes_weights_read = 0.0;
  double bytes_kv_read = 0.0;
  double modeled_latency = 0.0;  // seconds
};

// Parameters that flow through matmuls (projections, FFN, unembedding).
int64_t matmul_param_count(const ModelConfig& cfg);
// All parameters, embeddings included (weight bytes resident per step).
int64_t total_param_count(const ModelConfig& cfg);

// Per-layer KV cache entry size in bytes times the layer count, i.e. the cost
// of one cached position across the whole model.
int64_t kv_entry_bytes(const ModelConfig& cfg, int64_t dtype_bytes);

// Cache state predicted after processing `positions` positions (exact
// integers; must match live kv_footprint counters).
struct FootprintPrediction {
  int64_t main_entries_per_layer = 0;
  int64_t hidden_entries_per_layer = 0;
  int64_t total_bytes = 0;
};

FootprintPrediction predicted_footprint(const ModelConfig& cfg, int64_t positions,
                                        int64_t dtype_bytes);

CostReport prefill_cost(const ModelConfig& cfg, int64_t t, const HardwareModel& hw,
                        int64_t dtype_bytes);

// Cost of generating one token with t_context positions already cached.
CostReport decode_cost(const ModelConfig& cfg, int64_t t_context, const HardwareModel& hw,
                       int64_t dtype_bytes);

// Cross product of specs and context lengths, both phases per point.
std::vector<CostReport> compare_variants(const ModelConfig& base,
                                         const std::vector<MaskSpec>& specs,
                                         const std::vector<int64_t>& t_grid,
                                         const HardwareModel& hw, int64_t dtype_bytes);

std::string cost_csv_header();
std::string cost_csv_row(const CostReport& r);

}  // namespace phd

