#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "phd/commands.hpp"

using namespace phd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& child) const { return (path / child).string(); }
};

std::string write_tiny_corpus(const TempDir& dir, int64_t bytes = 8192) {
  const std::string path = dir / "corpus.txt";
  std::ofstream f(path, std::ios::binary);
  const std::string phrase = "the quick brown fox jumps over the lazy dog. ";
  while (f.tellp() < bytes) f << phrase;
  return path;
}

RunConfig tiny_run_config(const std::string& corpus, const std::string& out_dir,
                          MaskSpec mask = {MaskVariant::Vanilla, 1, 0, kNoChunking}) {
  RunConfig cfg;
  cfg.model.n_layers = 1;
  cfg.model.d_model = 16;
  cfg.model.n_heads = 2;
  cfg.model.n_kv_heads = 1;
  cfg.model.d_head = 8;
  cfg.model.d_ffn = 32;
  cfg.model.vocab_size = 256;
  cfg.model.max_t = 64;
  cfg.model.mask = mask;
  cfg.model.seed = 123;
  cfg.dtype = "f64";
  cfg.corpus_path = corpus;
  cfg.out_dir = out_dir;
  cfg.train.steps = 8;
  cfg.train.batch_size = 2;
  cfg.train.seq_len = 16;
  cfg.train.warmup = 2;
  cfg.train.lr_max = 5e-3;
  cfg.train.lr_min = 5e-4;
  cfg.train.val_every = 4;
  cfg.train.val_fraction = 0.25;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("train: zero steps write the initialization checkpoint") {
  TempDir dir("phd_cli_train0");
  RunConfig cfg = tiny_run_config(write_tiny_corpus(dir), dir / "run");
  cfg.train.steps = 0;
  std::ostringstream log;
  TrainResult res = command_train(cfg, log);
  Weights<double> loaded = load_checkpoint<double>(res.checkpoint_path);
  Weights<double> init = Weights<double>::init(cfg.model);
  auto a = loaded.named_tensors(), b = init.named_tensors();
  for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second->data == *b[i].second->data);
}

TEST_CASE("train: identical config and seed give bitwise-identical metrics") {
  TempDir dir("phd_cli_det");
  const std::string corpus = write_tiny_corpus(dir);
  std::ostringstream log;
  RunConfig c1 = tiny_run_config(corpus, dir / "a", {MaskVariant::PhdSwa, 2, 2, kNoChunking});
  RunConfig c2 = tiny_run_config(corpus, dir / "b", {MaskVariant::PhdSwa, 2, 2, kNoChunking});
  TrainResult r1 = command_train(c1, log);
  TrainResult r2 = command_train(c2, log);
  CHECK(slurp(r1.metrics_path) == slurp(r2.metrics_path));
  CHECK(slurp(r1.checkpoint_path) == slurp(r2.checkpoint_path));
  // config copy lands in the run directory
  CHECK(fs::exists(fs::path(dir / "a") / "config.json"));
}

TEST_CASE("eval: deterministic, mask-degenerate, and bounded by the uniform baseline") {
  TempDir dir("phd_cli_eval");
  const std::string corpus = write_tiny_corpus(dir);
  RunConfig cfg = tiny_run_config(corpus, dir / "run");
  cfg.train.steps = 40;
  std::ostringstream log;
  TrainResult res = command_train(cfg, log);

  EvalOptions ev;
  ev.checkpoint = res.checkpoint_path;
  ev.corpus_path = corpus;
  ev.seq_len = 16;
  ev.val_fraction = 0.25;
  const double l1 = command_eval(ev, log);
  const double l2 = command_eval(ev, log);
  CHECK(l1 == l2);
  CHECK(std::isfinite(l1));
  CHECK(l1 <= std::log(256.0));  // better than the uniform baseline

  // a vanilla checkpoint evaluated as K=1 PHD matches exactly
  EvalOptions as_phd = ev;
  as_phd.mask_override_json = R"({"variant":"phd","K":1})";
  CHECK(command_eval(as_phd, log) == l1);
}

TEST_CASE("eval: corrupted or mismatched checkpoints are refused") {
  TempDir dir("phd_cli_badckpt");
  const std::string corpus = write_tiny_corpus(dir);
  RunConfig cfg = tiny_run_config(corpus, dir / "run");
  cfg.train.steps = 0;
  std::ostringstream log;
  TrainResult res = command_train(cfg, log);

  // bad magic
  std::string bytes = slurp(res.checkpoint_path);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  const std::string p1 = dir / "bad_magic.phdt";
  std::ofstream(p1, std::ios::binary).write(bad_magic.data(), static_cast<std::streamsize>(bad_magic.size()));
  EvalOptions ev;
  ev.checkpoint = p1;
  ev.corpus_path = corpus;
  ev.seq_len = 16;
  ev.val_fraction = 0.25;
  CHECK_THROWS_AS(command_eval(ev, log), IoError);

  // wrong format version
  std::string bad_version = bytes;
  bad_version[4] = 99;
  const std::string p2 = dir / "bad_version.phdt";
  std::ofstream(p2, std::ios::binary).write(bad_version.data(), static_cast<std::streamsize>(bad_version.size()));
  ev.checkpoint = p2;
  CHECK_THROWS_AS(command_eval(ev, log), IoError);
}

TEST_CASE("generate: deterministic greedy output and footprint law") {
  TempDir dir("phd_cli_gen");
  const std::string corpus = write_tiny_corpus(dir);
  RunConfig cfg = tiny_run_config(corpus, dir / "run", {MaskVariant::PhdSwa, 2, 2, kNoChunking});
  cfg.train.steps = 30;
  std::ostringstream log;
  TrainResult res = command_train(cfg, log);

  GenerateOptions go;
  go.checkpoint = res.checkpoint_path;
  go.prompt = "the quick";
  go.n_tokens = 10;
  go.footprint_csv = dir / "footprint.csv";
  const std::string t1 = command_generate(go, log);
  const std::string t2 = command_generate(go, log);
  CHECK(t1 == t2);
  CHECK(t1.size() == 10);

  // footprint: main grows by one per step from t, hidden stays within W
  std::ifstream f(go.footprint_csv);
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,position,main_entries_per_layer,hidden_entries_per_layer,total_bytes");
  const int64_t t0 = static_cast<int64_t>(go.prompt.size());
  int64_t step = 0;
  while (std::getline(f, line)) {
    ++step;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    CHECK(std::stoll(field) == step);
    std::getline(ss, field, ',');
    CHECK(std::stoll(field) == t0 + step);
    std::getline(ss, field, ',');
    CHECK(std::stoll(field) == t0 + step);  // main == positions processed
    std::getline(ss, field, ',');
    CHECK(std::stoll(field) <= 2);  // hidden <= W
  }
  CHECK(step == 10);
}

TEST_CASE("mask-dump: lower-triangular PGM, grouped dump is the permuted interleaved dump") {
  TempDir dir("phd_cli_mask");
  std::ostringstream log;
  MaskDumpOptions mo;
  mo.spec_json = R"({"variant":"vanilla","K":1})";
  mo.t = 8;
  mo.out_prefix = dir / "vanilla";
  command_maskdump(mo, log);

  const std::string pgm = slurp(dir / "vanilla.pgm");
  CHECK(pgm.substr(0, 3) == "P5\n");
  const size_t header_end = pgm.find("255\n") + 4;
  REQUIRE(pgm.size() - header_end == 64);
  for (int64_t q = 0; q < 8; ++q)
    for (int64_t k = 0; k < 8; ++k)
      CHECK(static_cast<unsigned char>(pgm[header_end + q * 8 + k]) == (k <= q ? 255 : 0));
  CHECK(slurp(dir / "vanilla_stats.csv").find("vanilla,1,0,inf,8,interleaved,36,8") !=
        std::string::npos);

  MaskDumpOptions gi;
  gi.spec_json = R"({"variant":"phd_swa","K":3,"W":4})";
  gi.t = 6;
  gi.out_prefix = dir / "inter";
  command_maskdump(gi, log);
  gi.layout = "grouped";
  gi.out_prefix = dir / "grouped";
  command_maskdump(gi, log);
  const std::string pi = slurp(dir / "inter.pgm"), pg = slurp(dir / "grouped.pgm");
  const size_t hi = pi.find("255\n") + 4, hg = pg.find("255\n") + 4;
  LayoutMap lm = layout_permutation(6, 3);
  for (int64_t q = 0; q < 18; ++q)
    for (int64_t k = 0; k < 18; ++k)
      CHECK(pg[hg + q * 18 + k] ==
            pi[hi + lm.grouped_to_interleaved[static_cast<size_t>(q)] * 18 +
               lm.grouped_to_interleaved[static_cast<size_t>(k)]]);

  MaskDumpOptions big;
  big.spec_json = mo.spec_json;
  big.t = 513;
  CHECK_THROWS_AS(command_maskdump(big, log), ContractError);
}

TEST_CASE("bench: stable schema and PHD prefill flat in K") {
  TempDir dir("phd_cli_bench");
  std::ostringstream log;
  BenchOptions bo;
  bo.spec_jsons = {R"({"variant":"vanilla","K":1})", R"({"variant":"phd","K":2})",
                   R"({"variant":"phd","K":8})"};
  bo.t_grid = {32, 64};
  bo.out_csv = dir / "bench.csv";
  command_bench(bo, log);
  std::ifstream f(bo.out_csv);
  std::string header;
  std::getline(f, header);
  CHECK(header == cost_csv_header());
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);) lines.push_back(line);
  CHECK(lines.size() == 3 * 2 * 2);
  // PHD prefill tokens_forwarded at t=32 equals 32 for both K values
  int64_t phd_rows = 0;
  for (const std::string& line : lines)
    if (line.find("phd,") == 0 && line.find(",32,prefill,32,") != std::string::npos) ++phd_rows;
  CHECK(phd_rows == 2);

  BenchOptions empty;
  empty.t_grid = {8};
  CHECK_THROWS_AS(command_bench(empty, log), ContractError);
}

TEST_CASE("compare: guards and deterministic duplicate rows") {
  TempDir dir("phd_cli_cmp");
  const std::string corpus = write_tiny_corpus(dir);
  std::ostringstream log;

  auto write_config = [&](const std::string& name, MaskSpec mask, int64_t seed = 123) {
    RunConfig cfg = tiny_run_config(corpus, "ignored", mask);
    cfg.model.seed = static_cast<uint64_t>(seed);
    cfg.train.steps = 4;
    const std::string path = dir / name;
    std::ofstream f(path);
    f << run_config_to_json(cfg);
    return path;
  };

  const std::string v1 = write_config("v1.json", {MaskVariant::Vanilla, 1, 0, kNoChunking});
  const std::string s2 = write_config("s2.json", {MaskVariant::PhdSwa, 2, 2, kNoChunking});
  const std::string s2b = write_config("s2b.json", {MaskVariant::PhdSwa, 2, 2, kNoChunking});
  const std::string s3 = write_config("s3.json", {MaskVariant::PhdSwa, 3, 2, kNoChunking});

  CHECK_THROWS_WITH_AS(command_compare({v1}, dir / "out0", log), "compare: need ≥2 configs",
                       ContractError);

  const std::string odd = write_config("odd.json", {MaskVariant::PhdSwa, 2, 2, kNoChunking}, 77);
  CHECK_THROWS_AS(command_compare({v1, odd}, dir / "out1", log), ContractError);

  auto rows = command_compare({v1, s2, s3}, dir / "out2", log);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) CHECK(std::isfinite(r.final_ema_loss));
  CHECK(fs::exists(fs::path(dir / "out2") / "curves.csv"));
  CHECK(fs::exists(fs::path(dir / "out2") / "final.csv"));

  auto dup = command_compare({s2, s2b}, dir / "out3", log);
  REQUIRE(dup.size() == 2);
  CHECK(dup[0].final_ema_loss == dup[1].final_ema_loss);  // identical specs, identical rows
  CHECK(dup[0].final_val_loss == dup[1].final_val_loss);
}
