#pragma once

#include <string>

#include "phd/model.hpp"

namespace phd {

struct TrainParams {
  int64_t steps = 2000;
  int64_t batch_size = 4;
  int64_t seq_len = 128;
  int64_t warmup = 100;
  double lr_max = 1e-3;
  double lr_min = 1e-4;
  OptimizerParams opt;
  double val_fraction = 0.1;
  int64_t val_every = 200;  // 0 disables periodic validation
  Layout layout = Layout::Grouped;
};

// One file fully determines a run; CLI flags override individual fields.
struct RunConfig {
  ModelConfig model;
  TrainParams train;
  std::string dtype = "f32";  // f32 | f64
  std::string corpus_path = "data/corpus.txt";
  std::string out_dir = "runs/out";

  void validate() const {
    model.validate();
    require(dtype == "f32" || dtype == "f64", "config: dtype must be f32 or f64");
    require(train.seq_len >= 1 && train.seq_len <= model.max_t,
            "config: seq_len must be in [1, max_t]");
    require(train.steps >= 0 && train.batch_size >= 1, "config: bad training extents");
  }
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

MaskSpec mask_spec_from_json(const std::string& text);

}  // namespace phd
