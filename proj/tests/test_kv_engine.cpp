#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "phd/kv_engine.hpp"
#include "phd/model.hpp"

using namespace phd;

namespace {

ModelConfig tiny_config(MaskSpec mask, uint64_t seed = 1, int64_t max_t = 64) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.d_head = 4;
  cfg.d_ffn = 24;
  cfg.vocab_size = 17;
  cfg.max_t = max_t;
  cfg.mask = mask;
  cfg.seed = seed;
  return cfg;
}

std::vector<int64_t> pseudo_tokens(int64_t t, int64_t vocab, uint64_t salt) {
  std::vector<int64_t> v(static_cast<size_t>(t));
  uint64_t x = salt * 2654435761u + 1;
  for (int64_t i = 0; i < t; ++i) {
    x = x * 6364136223846793005ull + 1442695040888963407ull;
    v[static_cast<size_t>(i)] = static_cast<int64_t>((x >> 33) % static_cast<uint64_t>(vocab));
  }
  return v;
}

// relative mismatch between an engine logits vector and a forward_full row
double row_mismatch(const std::vector<double>& got, const Tensor<double>& logits, int64_t row) {
  double worst = 0.0;
  for (int64_t c = 0; c < logits.cols(); ++c) {
    const double want = logits.at(row, c);
    worst = std::max(worst, std::abs(got[static_cast<size_t>(c)] - want) /
                                (std::abs(want) + 1e-12));
  }
  return worst;
}

std::vector<MaskSpec> engine_grid() {
  return {
      {MaskVariant::Vanilla, 1, 0, kNoChunking},
      {MaskVariant::NaiveRepeat, 2, 0, kNoChunking},
      {MaskVariant::NaiveRepeat, 3, 0, kNoChunking},
      {MaskVariant::Phd, 2, 0, kNoChunking},
      {MaskVariant::Phd, 3, 0, kNoChunking},
      {MaskVariant::PhdSwa, 2, 1, kNoChunking},
      {MaskVariant::PhdSwa, 3, 4, kNoChunking},
      {MaskVariant::PhdCswa, 2, 4, 4},
      {MaskVariant::PhdCswa, 3, 4, 8},
      {MaskVariant::PhdCswa, 3, 16, 4},
  };
}

}  // namespace

TEST_CASE("prefill: rows forwarded per variant") {
  const int64_t t = 10;
  auto rows_for = [&](MaskSpec spec) {
    ModelConfig cfg = tiny_config(spec);
    Weights<double> w = Weights<double>::init(cfg);
    auto prompt = pseudo_tokens(t, cfg.vocab_size, 3);
    PrefillResult<double> res = prefill(w, prompt);
    return res.stats.rows_forwarded;
  };
  // originals pass + one K-copy block at the last position
  CHECK(rows_for({MaskVariant::Phd, 3, 0, kNoChunking}) == t + 3 - 1);
  CHECK(rows_for({MaskVariant::Vanilla, 1, 0, kNoChunking}) == t);
  // the hidden window chains through every position
  CHECK(rows_for({MaskVariant::PhdSwa, 3, 4, kNoChunking}) == 3 * t);
  CHECK(rows_for({MaskVariant::NaiveRepeat, 2, 0, kNoChunking}) == 2 * t);
  // K copies only within the final chunk
  CHECK(rows_for({MaskVariant::PhdCswa, 3, 4, 4}) == 8 + 3 * 2);  // chunk start at 9
}

TEST_CASE("prefill: final-chunk arithmetic at t=100, C=32, K=3") {
  ModelConfig cfg = tiny_config({MaskVariant::PhdCswa, 3, 16, 32}, 1, 128);
  Weights<double> w = Weights<double>::init(cfg);
  auto prompt = pseudo_tokens(100, cfg.vocab_size, 5);
  PrefillResult<double> res = prefill(w, prompt);
  // final chunk holds positions 97..100
  CHECK(res.stats.rows_forwarded == 100 + 2 * 4);
  CHECK(res.state.cache.positions == 100);
}

TEST_CASE("prefill: empty prompt is rejected") {
  ModelConfig cfg = tiny_config({MaskVariant::Phd, 2, 0, kNoChunking});
  Weights<double> w = Weights<double>::init(cfg);
  CHECK_THROWS_AS(prefill(w, std::span<const int64_t>{}), ContractError);
}

TEST_CASE("prefill+decode reproduces forward_full final-copy logits (<= 1e-8)") {
  for (const MaskSpec& spec : engine_grid()) {
    ModelConfig cfg = tiny_config(spec, 7);
    Weights<double> w = Weights<double>::init(cfg);
    for (uint64_t trial = 0; trial < 3; ++trial) {
      const int64_t t0 = 1 + static_cast<int64_t>((trial * 5 + 2) % 11);
      std::vector<int64_t> seq = pseudo_tokens(t0, cfg.vocab_size, trial + 11);
      PrefillResult<double> pre = prefill(w, std::span<const int64_t>(seq));
      std::vector<double> logits = pre.logits;
      DecodeState<double>& state = pre.state;

      const auto continuation = pseudo_tokens(6, cfg.vocab_size, trial + 101);
      for (int64_t i = 0; i <= 6; ++i) {
        RepeatedSequence rseq =
            repeat_tokens(std::span<const int64_t>(seq), spec.K, Layout::Interleaved);
        Tensor<double> want = forward_full(w, rseq);
        const double err =
            row_mismatch(logits, want, final_copy_slot(rseq, static_cast<int64_t>(seq.size())));
        CHECK_MESSAGE(err <= 1e-8, "variant=", variant_name(spec.variant), " K=", spec.K,
                      " W=", spec.W, " trial=", trial, " step=", i, " err=", err);
        if (i == 6) break;
        const int64_t next = continuation[static_cast<size_t>(i)];
        seq.push_back(next);
        logits = decode_step(w, state, next);
      }
    }
  }
}

TEST_CASE("cache-size law: main == positions, hidden bounded by W, zero for PHD") {
  for (const MaskSpec& spec : engine_grid()) {
    ModelConfig cfg = tiny_config(spec, 3);
    Weights<double> w = Weights<double>::init(cfg);
    auto prompt = pseudo_tokens(9, cfg.vocab_size, 1);
    PrefillResult<double> pre = prefill(w, prompt);
    DecodeState<double>& state = pre.state;
    CHECK(state.cache.positions == 9);
    for (int64_t step = 0; step < 12; ++step) {
      decode_step(w, state, static_cast<int64_t>(step % cfg.vocab_size));
      KvFootprint f = kv_footprint(w, state);
      CHECK(f.main_entries_per_layer == 9 + step + 1);
      if (spec.variant == MaskVariant::Phd || spec.variant == MaskVariant::Vanilla)
        CHECK(f.hidden_entries_per_layer == 0);
      if (spec.variant == MaskVariant::PhdSwa || spec.variant == MaskVariant::PhdCswa)
        CHECK(f.hidden_entries_per_layer <= spec.W);
      // every layer agrees
      for (const auto& layer : state.cache.layers) {
        CHECK(static_cast<int64_t>(layer.main_k.size()) ==
              f.main_entries_per_layer * cfg.n_kv_heads * cfg.d_head);
        CHECK(static_cast<int64_t>(layer.ring.size()) == f.hidden_entries_per_layer);
      }
    }
  }
}

TEST_CASE("footprint examples: PHD, long-decode SWA, fresh-chunk CSWA") {
  {
    ModelConfig cfg = tiny_config({MaskVariant::Phd, 3, 0, kNoChunking});
    Weights<double> w = Weights<double>::init(cfg);
    auto pre = prefill(w, pseudo_tokens(10, cfg.vocab_size, 2));
    KvFootprint f = kv_footprint(w, pre.state);
    CHECK(f.main_entries_per_layer == 10);
    CHECK(f.hidden_entries_per_layer == 0);
    const int64_t entry_bytes = 2 * cfg.n_kv_heads * cfg.d_head * 8;
    CHECK(f.total_bytes == 10 * entry_bytes * cfg.n_layers);
  }
  {
    ModelConfig cfg = tiny_config({MaskVariant::PhdSwa, 3, 4, kNoChunking});
    Weights<double> w = Weights<double>::init(cfg);
    auto pre = prefill(w, pseudo_tokens(6, cfg.vocab_size, 2));
    for (int64_t s = 0; s < 20; ++s) decode_step(w, pre.state, s % cfg.vocab_size);
    KvFootprint f = kv_footprint(w, pre.state);
    CHECK(f.main_entries_per_layer == 26);
    CHECK(f.hidden_entries_per_layer == 4);
  }
  {
    ModelConfig cfg = tiny_config({MaskVariant::PhdCswa, 3, 16, 32}, 1, 64);
    Weights<double> w = Weights<double>::init(cfg);
    auto pre = prefill(w, pseudo_tokens(32, cfg.vocab_size, 2));
    decode_step(w, pre.state, 1);  // position 33 starts chunk 2
    decode_step(w, pre.state, 2);  // two positions into the fresh chunk
    KvFootprint f = kv_footprint(w, pre.state);
    CHECK(f.hidden_entries_per_layer == std::min<int64_t>(16, 2 * 2));
  }
}

TEST_CASE("chunk-reset law: ring empties at boundaries and never serves stale chunks") {
  ModelConfig cfg = tiny_config({MaskVariant::PhdCswa, 3, 4, 4}, 9, 64);
  Weights<double> w = Weights<double>::init(cfg);
  auto pre = prefill(w, pseudo_tokens(6, cfg.vocab_size, 4));
  DecodeState<double>& state = pre.state;
  for (int64_t step = 0; step < 16; ++step) {
    StepTrace trace;
    decode_step(w, state, step % cfg.vocab_size, nullptr, &trace);
    const int64_t pos = trace.position;
    if (pos == chunk_start(pos, 4)) {
      CHECK(trace.hidden_before_push == 0);  // cleared before the step's own pushes
    }
    for (const TokenCoord& c : trace.attended_hidden)
      CHECK(chunk_of(c.n, 4) == chunk_of(pos, 4));
  }
}

TEST_CASE("eviction order: ring is strict FIFO over interleaved order") {
  ModelConfig cfg = tiny_config({MaskVariant::PhdSwa, 3, 5, kNoChunking}, 13);
  Weights<double> w = Weights<double>::init(cfg);
  auto pre = prefill(w, pseudo_tokens(4, cfg.vocab_size, 6));
  DecodeState<double>& state = pre.state;
  for (int64_t step = 0; step < 10; ++step) {
    decode_step(w, state, step % cfg.vocab_size);
    const auto& ring = state.cache.layers[0].ring;
    for (size_t i = 1; i < ring.size(); ++i) {
      const int64_t prev = interleaved_index(ring[i - 1].coord, 3);
      const int64_t cur = interleaved_index(ring[i].coord, 3);
      CHECK(prev < cur);
    }
    // the ring holds exactly the most recent hidden tokens
    CHECK(static_cast<int64_t>(ring.size()) ==
          std::min<int64_t>(5, (state.cache.positions - 1 + 1) * 2));
  }
}

TEST_CASE("decode_step: position overflow beyond max_t is rejected") {
  ModelConfig cfg = tiny_config({MaskVariant::Phd, 2, 0, kNoChunking}, 1, 6);
  Weights<double> w = Weights<double>::init(cfg);
  auto pre = prefill(w, pseudo_tokens(5, cfg.vocab_size, 7));
  decode_step(w, pre.state, 1);
  CHECK_THROWS_AS(decode_step(w, pre.state, 2), ContractError);
}

TEST_CASE("generate: determinism, single-step argmax, NaiveRepeat growth") {
  ModelConfig cfg = tiny_config({MaskVariant::PhdSwa, 2, 2, kNoChunking}, 17);
  Weights<double> w = Weights<double>::init(cfg);
  auto prompt = pseudo_tokens(5, cfg.vocab_size, 8);

  GenerateResult<double> a = generate(w, std::span<const int64_t>(prompt), 8);
  GenerateResult<double> b = generate(w, std::span<const int64_t>(prompt), 8);
  CHECK(a.tokens == b.tokens);

  PrefillResult<double> pre = prefill(w, prompt);
  int64_t argmax = 0;
  for (size_t i = 1; i < pre.logits.size(); ++i)
    if (pre.logits[i] > pre.logits[static_cast<size_t>(argmax)]) argmax = static_cast<int64_t>(i);
  GenerateResult<double> one = generate(w, std::span<const int64_t>(prompt), 1);
  CHECK(one.tokens.size() == 1);
  CHECK(one.tokens[0] == argmax);
  CHECK(one.footprints.back().main_entries_per_layer == 6);  // t + steps

  // seeded top-k runs repeat exactly
  GenerateResult<double> s1 = generate(w, std::span<const int64_t>(prompt), 8, SampleMode::TopK,
                                       5, 42);
  GenerateResult<double> s2 = generate(w, std::span<const int64_t>(prompt), 8, SampleMode::TopK,
                                       5, 42);
  CHECK(s1.tokens == s2.tokens);

  ModelConfig ncfg = tiny_config({MaskVariant::NaiveRepeat, 3, 0, kNoChunking}, 17);
  Weights<double> nw = Weights<double>::init(ncfg);
  auto npre = prefill(nw, prompt);
  for (int64_t s = 0; s < 4; ++s) decode_step(nw, npre.state, s);
  KvFootprint f = kv_footprint(nw, npre.state);
  CHECK(f.main_entries_per_layer == 9);
  CHECK(f.hidden_entries_per_layer == 2 * 9);  // every hidden copy is retained
}

TEST_CASE("independent decode states can run concurrently over shared weights") {
  ModelConfig cfg = tiny_config({MaskVariant::PhdSwa, 2, 2, kNoChunking}, 41);
  Weights<double> w = Weights<double>::init(cfg);
  auto p1 = pseudo_tokens(6, cfg.vocab_size, 1);
  auto p2 = pseudo_tokens(9, cfg.vocab_size, 2);

  // sequential reference
  GenerateResult<double> ref1 = generate(w, std::span<const int64_t>(p1), 6);
  GenerateResult<double> ref2 = generate(w, std::span<const int64_t>(p2), 6);

  GenerateResult<double> got1, got2;
  std::thread t1([&] { got1 = generate(w, std::span<const int64_t>(p1), 6); });
  std::thread t2([&] { got2 = generate(w, std::span<const int64_t>(p2), 6); });
  t1.join();
  t2.join();
  CHECK(got1.tokens == ref1.tokens);
  CHECK(got2.tokens == ref2.tokens);
}

TEST_CASE("generate: greedy continuation of a memorized pattern") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 2;
  cfg.d_head = 16;
  cfg.d_ffn = 64;
  cfg.vocab_size = 256;
  cfg.max_t = 32;
  cfg.mask = {MaskVariant::Phd, 2, 0, kNoChunking};
  cfg.seed = 5;
  Weights<double> w = Weights<double>::init(cfg);
  AdamState<double> opt = AdamState<double>::init(w);

  std::vector<int64_t> toks;
  for (int i = 0; i < 13; ++i) toks.push_back("abc"[i % 3]);
  std::vector<int64_t> targets(toks.begin() + 1, toks.end());
  toks.pop_back();
  TrainBatch batch;
  batch.rows = {repeat_tokens(std::span<const int64_t>(toks), 2, Layout::Grouped)};
  batch.targets = {targets};
  OptimizerParams op;
  op.weight_decay = 0.0;
  for (int step = 0; step < 250; ++step) train_step(w, batch, opt, op, 5e-3);

  std::vector<int64_t> prompt{'a', 'b', 'c', 'a', 'b'};
  GenerateResult<double> g = generate(w, std::span<const int64_t>(prompt), 6);
  const std::vector<int64_t> want{'c', 'a', 'b', 'c', 'a', 'b'};
  CHECK(g.tokens == want);
}
