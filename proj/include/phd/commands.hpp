#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "phd/cost_model.hpp"
#include "phd/run_config.hpp"
#include "phd/training.hpp"

namespace phd {

// Subcommand implementations. Thin wrappers over the library that the CLI
// binary (and the tests) call directly; all of them throw ContractError for
// invalid configuration and std::runtime_error for runtime failures.

TrainResult command_train(const RunConfig& cfg, std::ostream& out);

struct EvalOptions {
  std::string checkpoint;
  std::string corpus_path;
  double val_fraction = 0.1;
  int64_t seq_len = 0;  // 0: min(128, max_t)
  std::string mask_override_json;  // empty: use the checkpoint's mask
  std::string layout = "grouped";
};
double command_eval(const EvalOptions& opts, std::ostream& out);

struct GenerateOptions {
  std::string checkpoint;
  std::string prompt;
  int64_t n_tokens = 32;
  std::string mode = "greedy";  // greedy | top-k
  int64_t top_k = 40;
  uint64_t seed = 0;
  std::string footprint_csv;  // empty: do not write
};
std::string command_generate(const GenerateOptions& opts, std::ostream& out);

struct BenchOptions {
  std::string config_path;  // optional run config supplying the model shape
  std::vector<std::string> spec_jsons;
  std::vector<int64_t> t_grid;
  double peak_flops = kA100Like.peak_flops;
  double mem_bandwidth = kA100Like.mem_bandwidth;
  int64_t dtype_bytes = 4;
  bool measure = false;
  int64_t measure_reps = 3;
  int64_t measure_decode_tokens = 8;
  std::string out_csv;  // empty: stdout only
};
void command_bench(const BenchOptions& opts, std::ostream& out);

struct MaskDumpOptions {
  std::string spec_json;
  int64_t t = 16;
  std::string layout = "interleaved";
  std::string out_prefix = "mask";
};
void command_maskdump(const MaskDumpOptions& opts, std::ostream& out);

struct CompareRow {
  std::string run_name;
  double final_ema_loss = 0.0;
  double final_val_loss = 0.0;
};
std::vector<CompareRow> command_compare(const std::vector<std::string>& config_paths,
                                        const std::string& out_dir, std::ostream& out);

}  // namespace phd
