#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "phd/corpus.hpp"
#include "phd/kv_engine.hpp"
#include "phd/model.hpp"
#include "phd/run_config.hpp"

namespace phd {

struct TrainResult {
  int64_t steps = 0;
  double final_loss = 0.0;
  double final_ema = 0.0;
  double final_val_loss = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

struct MetricRow {
  int64_t step = 0;
  double train_loss = 0.0;
  double ema_loss = 0.0;
  double lr = 0.0;
  int64_t tokens_seen = 0;
  std::optional<double> val_loss;
};

inline constexpr const char* kMetricsHeader = "step,train_loss,ema_loss,lr,tokens_seen,val_loss";
inline constexpr double kEmaWeight = 0.99;

inline std::string metric_csv_row(const MetricRow& r) {
  std::ostringstream ss;
  ss << r.step << "," << std::setprecision(17) << r.train_loss << "," << r.ema_loss << ","
     << r.lr << "," << r.tokens_seen << ",";
  if (r.val_loss) ss << *r.val_loss;
  return ss.str();
}

// Deterministic full pass over the validation windows, in order.
template <class T>
double validation_loss(const Weights<T>& w, const Corpus& corpus, int64_t seq_len,
                       Layout layout) {
  const auto offsets = val_window_offsets(corpus, seq_len);
  require(!offsets.empty(), "validation: no validation windows (corpus too small?)");
  double total = 0.0;
  for (int64_t off : offsets) {
    Batch window = window_batch(corpus, seq_len, off);
    RepeatedSequence rseq =
        repeat_tokens(std::span<const int64_t>(window.tokens), w.config.mask.K, layout,
                      w.config.distinct_copy_positions);
    Tensor<T> logits = forward_full(w, rseq);
    Tensor<T> loss = loss_final_copy<T>(nullptr, logits, rseq, window.targets);
    total += static_cast<double>(loss.scalar());
  }
  return total / static_cast<double>(offsets.size());
}

template <class T>
TrainBatch make_train_batch(const Batch& b, const ModelConfig& cfg, Layout layout) {
  TrainBatch batch;
  for (int64_t row = 0; row < b.batch_size; ++row) {
    std::span<const int64_t> toks(b.tokens.data() + row * b.seq_len,
                                  static_cast<size_t>(b.seq_len));
    batch.rows.push_back(
        repeat_tokens(toks, cfg.mask.K, layout, cfg.distinct_copy_positions));
    batch.targets.emplace_back(b.targets.begin() + row * b.seq_len,
                               b.targets.begin() + (row + 1) * b.seq_len);
  }
  return batch;
}

// Full training run: seeded init, cosine schedule with warmup, per-step
// metrics with EMA(0.99) smoothing, periodic validation, final checkpoint.
// Bitwise deterministic for a fixed config and seed.
template <class T>
TrainResult run_training(const RunConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  fs::create_directories(cfg.out_dir + "/checkpoints");
  fs::create_directories(cfg.out_dir + "/reports");
  {
    std::ofstream cfg_copy(cfg.out_dir + "/config.json");
    cfg_copy << run_config_to_json(cfg);
  }

  Corpus corpus = load_corpus(cfg.corpus_path, cfg.train.val_fraction, cfg.train.seq_len);
  Weights<T> w = Weights<T>::init(cfg.model);
  AdamState<T> opt_state = AdamState<T>::init(w);
  std::mt19937_64 batch_rng(cfg.model.seed * 0x9E3779B97F4A7C15ull + 12345);

  TrainResult res;
  res.metrics_path = cfg.out_dir + "/metrics.csv";
  std::ofstream metrics(res.metrics_path);
  require(metrics.good(), "train: cannot open " + res.metrics_path);
  metrics << kMetricsHeader << "\n";

  double ema = 0.0;
  int64_t tokens_seen = 0;
  for (int64_t step = 0; step < cfg.train.steps; ++step) {
    Batch raw = next_batch(corpus, cfg.train.seq_len, cfg.train.batch_size, batch_rng);
    TrainBatch batch = make_train_batch<T>(raw, cfg.model, cfg.train.layout);
    const double lr = lr_at_step(step, cfg.train.steps, cfg.train.lr_max, cfg.train.lr_min,
                                 cfg.train.warmup);
    const double loss =
        static_cast<double>(train_step(w, batch, opt_state, cfg.train.opt, static_cast<T>(lr)));
    ema = step == 0 ? loss : kEmaWeight * ema + (1.0 - kEmaWeight) * loss;
    tokens_seen += cfg.train.batch_size * cfg.train.seq_len;

    MetricRow row{step, loss, ema, lr, tokens_seen, std::nullopt};
    const bool last = step + 1 == cfg.train.steps;
    if (cfg.train.val_every > 0 && ((step + 1) % cfg.train.val_every == 0 || last))
      row.val_loss = validation_loss(w, corpus, cfg.train.seq_len, cfg.train.layout);
    metrics << metric_csv_row(row) << "\n";
    res.final_loss = loss;
    res.final_ema = ema;
    if (row.val_loss) res.final_val_loss = *row.val_loss;
    if (progress && (step % 50 == 0 || last))
      (*progress) << spec_name(cfg.model.mask) << " step " << step << " loss " << loss << " ema "
                  << ema << "\n";
  }
  if (cfg.train.steps == 0) res.final_val_loss = 0.0;

  res.steps = cfg.train.steps;
  res.checkpoint_path = cfg.out_dir + "/checkpoints/final.phdt";
  save_checkpoint(res.checkpoint_path, w);
  return res;
}

}  // namespace phd
