// Operator CLI for the PHD-transformer lab: training, evaluation, generation,
// cost benchmarking, attention-mask dumps, and multi-variant comparisons.
//
// Exit codes: 0 ok, 1 usage, 2 config invalid, 3 runtime failure.

#include <CLI11.hpp>
#include <iostream>

#include "phd/commands.hpp"

using namespace phd;

namespace {

struct TrainCliOverrides {
  std::string config_path;
  std::string corpus;
  std::string out_dir;
  std::string mask_json;
  std::string dtype;
  std::string layout;
  int64_t steps = -1;
  int64_t batch_size = -1;
  int64_t seq_len = -1;
  int64_t seed = -1;
  double lr_max = -1.0;
};

RunConfig apply_overrides(const TrainCliOverrides& o) {
  RunConfig cfg = load_run_config(o.config_path);
  if (!o.corpus.empty()) cfg.corpus_path = o.corpus;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (!o.mask_json.empty()) cfg.model.mask = mask_spec_from_json(o.mask_json);
  if (!o.dtype.empty()) cfg.dtype = o.dtype;
  if (!o.layout.empty()) {
    require(o.layout == "grouped" || o.layout == "interleaved",
            "layout must be 'grouped' or 'interleaved'");
    cfg.train.layout = o.layout == "grouped" ? Layout::Grouped : Layout::Interleaved;
  }
  if (o.steps >= 0) cfg.train.steps = o.steps;
  if (o.batch_size >= 0) cfg.train.batch_size = o.batch_size;
  if (o.seq_len >= 0) cfg.train.seq_len = o.seq_len;
  if (o.seed >= 0) cfg.model.seed = static_cast<uint64_t>(o.seed);
  if (o.lr_max >= 0.0) cfg.train.lr_max = o.lr_max;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "phd — a desk-scale lab for parallel-hidden-decoding transformers.\n"
      "Subcommands: train, eval, generate, bench, mask-dump, compare.\n"
      "PHD_THREADS caps worker parallelism. Exit codes: 0 ok, 1 usage,\n"
      "2 config invalid, 3 runtime failure."};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand(
      "train",
      "Train a model from a JSON run config. Writes <out>/config.json, per-step\n"
      "metrics CSV (columns: step,train_loss,ema_loss,lr,tokens_seen,val_loss; the\n"
      "ema column is EMA(0.99) of train_loss, val_loss is periodic), and\n"
      "checkpoints/final.phdt.");
  TrainCliOverrides tr;
  train->add_option("config", tr.config_path, "run config JSON file")->required();
  train->add_option("--corpus", tr.corpus, "override corpus path");
  train->add_option("--out", tr.out_dir, "override output directory");
  train->add_option("--mask", tr.mask_json, "override mask spec, e.g. "
                    "'{\"variant\":\"phd_swa\",\"K\":2,\"W\":16}'");
  train->add_option("--dtype", tr.dtype, "override dtype (f32|f64)");
  train->add_option("--layout", tr.layout, "override layout (grouped|interleaved)");
  train->add_option("--steps", tr.steps, "override step count");
  train->add_option("--batch-size", tr.batch_size, "override batch size");
  train->add_option("--seq-len", tr.seq_len, "override sequence length");
  train->add_option("--seed", tr.seed, "override seed");
  train->add_option("--lr", tr.lr_max, "override peak learning rate");

  // eval
  auto* eval = app.add_subcommand("eval",
                                  "Deterministic validation loss of a checkpoint over the "
                                  "corpus's validation split.");
  EvalOptions ev;
  eval->add_option("checkpoint", ev.checkpoint, "PHDT checkpoint")->required();
  eval->add_option("corpus", ev.corpus_path, "corpus file")->required();
  eval->add_option("--val-fraction", ev.val_fraction, "validation fraction (default 0.1)");
  eval->add_option("--seq-len", ev.seq_len, "window length (default min(128, max_t))");
  eval->add_option("--mask", ev.mask_override_json, "evaluate under a different mask spec");
  eval->add_option("--layout", ev.layout, "grouped|interleaved (default grouped)");

  // generate
  auto* gen = app.add_subcommand("generate",
                                 "Generate bytes from a checkpoint with the KV-cache engine; "
                                 "optionally writes a per-step footprint CSV (columns: step,"
                                 "position,main_entries_per_layer,hidden_entries_per_layer,"
                                 "total_bytes).");
  GenerateOptions go;
  gen->add_option("checkpoint", go.checkpoint, "PHDT checkpoint")->required();
  gen->add_option("prompt", go.prompt, "prompt text (bytes)")->required();
  gen->add_option("-n,--tokens", go.n_tokens, "tokens to generate (default 32)");
  gen->add_option("--mode", go.mode, "greedy | top-k (default greedy)");
  gen->add_option("--top-k", go.top_k, "k for top-k sampling (default 40)");
  gen->add_option("--seed", go.seed, "sampling seed (top-k mode)");
  gen->add_option("--footprint-csv", go.footprint_csv, "write per-step KV footprint CSV here");

  // bench
  auto* bench = app.add_subcommand(
      "bench",
      "Analytic cost model over a (spec, t) grid, optionally with measured\n"
      "wall-clock columns. CSV columns: variant,K,W,C,t,phase,tokens_forwarded,\n"
      "attn_score_entries,flops_total,kv_entries,bytes_weights_read,bytes_kv_read,\n"
      "modeled_latency_s[,measured_prefill_ms,measured_decode_ms_per_token].");
  BenchOptions bo;
  bench->add_option("--config", bo.config_path, "run config supplying the model shape");
  bench->add_option("--spec", bo.spec_jsons, "mask spec JSON (repeatable)")->required();
  bench->add_option("--t", bo.t_grid, "prompt/context lengths (repeatable)")->required();
  bench->add_option("--peak-flops", bo.peak_flops, "hardware peak FLOP/s");
  bench->add_option("--mem-bandwidth", bo.mem_bandwidth, "hardware memory bandwidth B/s");
  bench->add_option("--dtype-bytes", bo.dtype_bytes, "bytes per scalar (default 4)");
  bench->add_flag("--measure", bo.measure, "add measured wall-clock columns");
  bench->add_option("--reps", bo.measure_reps, "measurement repetitions (default 3)");
  bench->add_option("--decode-tokens", bo.measure_decode_tokens,
                    "decode steps per measurement (default 8)");
  bench->add_option("-o,--out", bo.out_csv, "output CSV path (default stdout)");

  // mask-dump
  auto* dump = app.add_subcommand("mask-dump",
                                  "Write the attention mask as a PGM (P5) image, one pixel per "
                                  "(query,key): 255 attendable, 0 masked; plus a stats CSV "
                                  "(variant,K,W,C,t,layout,true_entries,per_query_max).");
  MaskDumpOptions mo;
  dump->add_option("--spec", mo.spec_json, "mask spec JSON")->required();
  dump->add_option("--t", mo.t, "original sequence length (t <= 512)")->required();
  dump->add_option("--layout", mo.layout, "interleaved | grouped (default interleaved)");
  dump->add_option("-o,--out", mo.out_prefix, "output prefix (default 'mask')");

  // compare
  auto* cmp = app.add_subcommand(
      "compare",
      "Train >= 2 configs that differ only in the mask spec (shared seed and\n"
      "corpus); writes joined curves.csv and a final-loss table final.csv.");
  std::vector<std::string> cmp_configs;
  std::string cmp_out = "runs/compare";
  cmp->add_option("configs", cmp_configs, "run config JSON files")->required();
  cmp->add_option("-o,--out", cmp_out, "output directory (default runs/compare)");

  try {
    app.parse(argc, argv);
    if (*train) {
      command_train(apply_overrides(tr), std::cout);
    } else if (*eval) {
      command_eval(ev, std::cout);
    } else if (*gen) {
      command_generate(go, std::cout);
    } else if (*bench) {
      command_bench(bo, std::cout);
    } else if (*dump) {
      command_maskdump(mo, std::cout);
    } else if (*cmp) {
      command_compare(cmp_configs, cmp_out, std::cout);
    }
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
