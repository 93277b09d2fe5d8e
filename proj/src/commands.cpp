#include "phd/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "phd/kv_engine.hpp"
#include "phd/microbench.hpp"

namespace phd {

namespace fs = std::filesystem;

namespace {

Layout layout_from_name(const std::string& name) {
  require(name == "grouped" || name == "interleaved",
          "layout must be 'grouped' or 'interleaved'");
  return name == "grouped" ? Layout::Grouped : Layout::Interleaved;
}

}  // namespace

TrainResult command_train(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  TrainResult res = cfg.dtype == "f64" ? run_training<double>(cfg, &out)
                                       : run_training<float>(cfg, &out);
  out << "run " << spec_name(cfg.model.mask) << ": " << res.steps << " steps, final loss "
      << res.final_loss << ", ema " << res.final_ema << "\n";
  out << "checkpoint: " << res.checkpoint_path << "\n";
  out << "metrics: " << res.metrics_path << "\n";
  return res;
}

namespace {

template <class T>
double eval_impl(const EvalOptions& opts) {
  Weights<T> w = load_checkpoint<T>(opts.checkpoint);
  if (!opts.mask_override_json.empty()) {
    MaskSpec spec = mask_spec_from_json(opts.mask_override_json);
    const SpecValidation v = validate_spec(spec);
    require(v.ok, v.ok ? "" : "eval: invalid mask override: " + v.errors.front());
    w.config.mask = spec;
  }
  const int64_t seq_len =
      opts.seq_len > 0 ? opts.seq_len : std::min<int64_t>(128, w.config.max_t);
  require(seq_len <= w.config.max_t, "eval: seq_len exceeds max_t");
  Corpus corpus = load_corpus(opts.corpus_path, opts.val_fraction, seq_len);
  return validation_loss(w, corpus, seq_len, layout_from_name(opts.layout));
}

}  // namespace

double command_eval(const EvalOptions& opts, std::ostream& out) {
  const DType dtype = checkpoint_dtype(opts.checkpoint);
  const double loss =
      dtype == DType::f64 ? eval_impl<double>(opts) : eval_impl<float>(opts);
  out << "val_loss " << std::setprecision(17) << loss << "\n";
  return loss;
}

namespace {

template <class T>
std::string generate_impl(const GenerateOptions& opts, std::ostream& out) {
  require(!opts.prompt.empty(), "generate: prompt must be nonempty");
  require(opts.n_tokens >= 1, "generate: n_tokens must be >= 1");
  require(opts.mode == "greedy" || opts.mode == "top-k",
          "generate: mode must be 'greedy' or 'top-k'");
  Weights<T> w = load_checkpoint<T>(opts.checkpoint);
  std::vector<int64_t> prompt;
  for (unsigned char c : opts.prompt) {
    require(static_cast<int64_t>(c) < w.config.vocab_size,
            "generate: prompt byte outside model vocabulary");
    prompt.push_back(static_cast<int64_t>(c));
  }
  require(static_cast<int64_t>(prompt.size()) + opts.n_tokens <= w.config.max_t,
          "generate: prompt plus generation exceeds max_t");
  const SampleMode mode = opts.mode == "greedy" ? SampleMode::Greedy : SampleMode::TopK;
  GenerateResult<T> res = generate(w, std::span<const int64_t>(prompt), opts.n_tokens, mode,
                                   opts.top_k, opts.seed);
  std::string text;
  for (int64_t tok : res.tokens) text.push_back(static_cast<char>(tok & 0xff));

  if (!opts.footprint_csv.empty()) {
    std::ofstream f(opts.footprint_csv);
    require_io(f.good(), "generate: cannot open " + opts.footprint_csv);
    f << "step,position,main_entries_per_layer,hidden_entries_per_layer,total_bytes\n";
    for (size_t i = 0; i < res.footprints.size(); ++i) {
      const KvFootprint& fp = res.footprints[i];
      f << i + 1 << "," << static_cast<int64_t>(prompt.size()) + static_cast<int64_t>(i) + 1
        << "," << fp.main_entries_per_layer << "," << fp.hidden_entries_per_layer << ","
        << fp.total_bytes << "\n";
    }
    out << "footprint trace: " << opts.footprint_csv << "\n";
  }
  return text;
}

}  // namespace

std::string command_generate(const GenerateOptions& opts, std::ostream& out) {
  const DType dtype = checkpoint_dtype(opts.checkpoint);
  const std::string text =
      dtype == DType::f64 ? generate_impl<double>(opts, out) : generate_impl<float>(opts, out);
  out << text << "\n";
  return text;
}

void command_bench(const BenchOptions& opts, std::ostream& out) {
  ModelConfig model;
  if (!opts.config_path.empty()) {
    model = load_run_config(opts.config_path).model;
  } else {
    model.n_layers = 2;
    model.d_model = 128;
    model.n_heads = 4;
    model.n_kv_heads = 2;
    model.d_head = 32;
    model.d_ffn = 256;
    model.vocab_size = 256;
    model.max_t = 4096;
  }
  require(!opts.spec_jsons.empty(), "bench: at least one --spec is required");
  require(!opts.t_grid.empty(), "bench: at least one --t is required");
  std::vector<MaskSpec> specs;
  for (const std::string& text : opts.spec_jsons) specs.push_back(mask_spec_from_json(text));
  const HardwareModel hw{opts.peak_flops, opts.mem_bandwidth};
  std::vector<CostReport> rows = compare_variants(model, specs, opts.t_grid, hw,
                                                  opts.dtype_bytes);

  std::vector<std::string> lines;
  std::string header = cost_csv_header();
  if (opts.measure) header += ",measured_prefill_ms,measured_decode_ms_per_token";
  lines.push_back(header);
  for (const CostReport& r : rows) {
    std::string line = cost_csv_row(r);
    if (opts.measure) {
      if (r.phase == Phase::Prefill) {
        ModelConfig cfg = model;
        cfg.mask = r.spec;
        require(r.t <= cfg.max_t, "bench: t exceeds max_t for measurement");
        Weights<float> w = Weights<float>::init(cfg);
        const BenchResult m =
            microbench(w, r.t, opts.measure_decode_tokens, opts.measure_reps);
        std::ostringstream ss;
        ss << "," << m.prefill_ms << "," << m.decode_ms_per_token;
        line += ss.str();
      } else {
        line += ",,";  // measurements are attached to the prefill row of each point
      }
    }
    lines.push_back(line);
  }

  if (!opts.out_csv.empty()) {
    std::ofstream f(opts.out_csv);
    require_io(f.good(), "bench: cannot open " + opts.out_csv);
    for (const std::string& l : lines) f << l << "\n";
    out << "wrote " << rows.size() << " rows to " << opts.out_csv << "\n";
  } else {
    for (const std::string& l : lines) out << l << "\n";
  }
}

void command_maskdump(const MaskDumpOptions& opts, std::ostream& out) {
  require(opts.t >= 1 && opts.t <= 512, "mask-dump: t must be in [1, 512]");
  MaskSpec spec = mask_spec_from_json(opts.spec_json);
  const SpecValidation v = validate_spec(spec);
  require(v.ok, v.ok ? "" : "mask-dump: invalid spec: " + v.errors.front());
  for (const std::string& note : v.notes) out << "note: " << note << "\n";
  const Layout layout = layout_from_name(opts.layout);
  BoolMatrix mask = build_mask(spec, opts.t, layout);
  const std::string pgm = opts.out_prefix + ".pgm";
  const std::string csv = opts.out_prefix + "_stats.csv";
  write_pgm(mask, pgm);
  write_mask_stats_csv(spec, opts.t, layout, csv);
  out << "wrote " << pgm << " (" << mask.rows << "x" << mask.cols << ") and " << csv << "\n";
}

std::vector<CompareRow> command_compare(const std::vector<std::string>& config_paths,
                                        const std::string& out_dir, std::ostream& out) {
  require(config_paths.size() >= 2, "compare: need ≥2 configs");
  std::vector<RunConfig> configs;
  for (const std::string& path : config_paths) configs.push_back(load_run_config(path));

  // comparable = identical up to the mask spec (and the output directory)
  auto normalized = [](RunConfig c) {
    c.model.mask = MaskSpec{};
    c.out_dir = "";
    return run_config_to_json(c);
  };
  const std::string base = normalized(configs.front());
  for (size_t i = 1; i < configs.size(); ++i)
    require(normalized(configs[i]) == base,
            "compare: config sets not comparable (they must differ only in the mask spec)");

  fs::create_directories(out_dir);
  std::vector<CompareRow> rows;
  std::vector<TrainResult> results;
  for (size_t i = 0; i < configs.size(); ++i) {
    RunConfig cfg = configs[i];
    cfg.validate();
    const std::string name = spec_name(cfg.model.mask) + "-run" + std::to_string(i);
    cfg.out_dir = out_dir + "/" + name;
    out << "[compare] training " << name << "\n";
    TrainResult res = cfg.dtype == "f64" ? run_training<double>(cfg, nullptr)
                                         : run_training<float>(cfg, nullptr);
    results.push_back(res);
    rows.push_back({name, res.final_ema, res.final_val_loss});
  }

  // joined loss curves in long format
  const std::string curves_path = out_dir + "/curves.csv";
  {
    std::ofstream f(curves_path);
    require_io(f.good(), "compare: cannot open " + curves_path);
    f << "run," << kMetricsHeader << "\n";
    for (size_t i = 0; i < results.size(); ++i) {
      std::ifstream m(results[i].metrics_path);
      std::string line;
      std::getline(m, line);  // skip header
      while (std::getline(m, line))
        if (!line.empty()) f << rows[i].run_name << "," << line << "\n";
    }
  }

  const std::string final_path = out_dir + "/final.csv";
  {
    std::ofstream f(final_path);
    require_io(f.good(), "compare: cannot open " + final_path);
    f << "run,final_ema_loss,final_val_loss\n";
    for (const CompareRow& r : rows)
      f << r.run_name << "," << std::setprecision(17) << r.final_ema_loss << ","
        << r.final_val_loss << "\n";
  }

  out << "final losses:\n";
  for (const CompareRow& r : rows)
    out << "  " << r.run_name << "  ema " << r.final_ema_loss << "  val " << r.final_val_loss
        << "\n";
  out << "wrote " << curves_path << " and " << final_path << "\n";
  return rows;
}

}  // namespace phd
