#include "phd/run_config.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

namespace phd {

using nlohmann::json;

namespace {

json mask_to_json_obj(const MaskSpec& spec) {
  json j;
  j["variant"] = variant_name(spec.variant);
  j["K"] = spec.K;
  if (spec.W != 0) j["W"] = spec.W;
  if (spec.C != kNoChunking) j["C"] = spec.C;  // absent field means "no chunking"
  return j;
}

MaskSpec mask_from_json_obj(const json& j) {
  MaskSpec spec;
  spec.variant = variant_from_name(j.at("variant").get<std::string>());
  spec.K = j.value("K", int64_t{1});
  spec.W = j.value("W", int64_t{0});
  spec.C = j.contains("C") ? j.at("C").get<int64_t>() : kNoChunking;
  return spec;
}

json model_to_json_obj(const ModelConfig& cfg) {
  json j;
  j["n_layers"] = cfg.n_layers;
  j["d_model"] = cfg.d_model;
  j["n_heads"] = cfg.n_heads;
  j["n_kv_heads"] = cfg.n_kv_heads;
  j["d_head"] = cfg.d_head;
  j["d_ffn"] = cfg.d_ffn;
  j["vocab_size"] = cfg.vocab_size;
  j["max_t"] = cfg.max_t;
  j["rope_theta"] = cfg.rope_theta;
  j["seed"] = cfg.seed;
  if (cfg.distinct_copy_positions) j["distinct_copy_positions"] = true;
  j["mask"] = mask_to_json_obj(cfg.mask);
  return j;
}

ModelConfig model_from_json_obj(const json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int64_t>();
  cfg.d_model = j.at("d_model").get<int64_t>();
  cfg.n_heads = j.at("n_heads").get<int64_t>();
  cfg.n_kv_heads = j.at("n_kv_heads").get<int64_t>();
  cfg.d_head = j.at("d_head").get<int64_t>();
  cfg.d_ffn = j.at("d_ffn").get<int64_t>();
  cfg.vocab_size = j.at("vocab_size").get<int64_t>();
  cfg.max_t = j.at("max_t").get<int64_t>();
  cfg.rope_theta = j.value("rope_theta", 10000.0);
  cfg.seed = j.value("seed", uint64_t{1});
  cfg.distinct_copy_positions = j.value("distinct_copy_positions", false);
  cfg.mask = mask_from_json_obj(j.at("mask"));
  return cfg;
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg) { return model_to_json_obj(cfg).dump(); }

ModelConfig config_from_json(const std::string& text) {
  try {
    return model_from_json_obj(json::parse(text));
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: malformed JSON: ") + e.what());
  }
}

MaskSpec mask_spec_from_json(const std::string& text) {
  try {
    return mask_from_json_obj(json::parse(text));
  } catch (const json::exception& e) {
    throw ContractError(std::string("mask spec: malformed JSON: ") + e.what());
  }
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["model"] = model_to_json_obj(cfg.model);
  j["dtype"] = cfg.dtype;
  j["corpus"] = cfg.corpus_path;
  j["out_dir"] = cfg.out_dir;
  json t;
  t["steps"] = cfg.train.steps;
  t["batch_size"] = cfg.train.batch_size;
  t["seq_len"] = cfg.train.seq_len;
  t["warmup"] = cfg.train.warmup;
  t["lr_max"] = cfg.train.lr_max;
  t["lr_min"] = cfg.train.lr_min;
  t["beta1"] = cfg.train.opt.beta1;
  t["beta2"] = cfg.train.opt.beta2;
  t["eps"] = cfg.train.opt.eps;
  t["weight_decay"] = cfg.train.opt.weight_decay;
  t["val_fraction"] = cfg.train.val_fraction;
  t["val_every"] = cfg.train.val_every;
  t["layout"] = cfg.train.layout == Layout::Grouped ? "grouped" : "interleaved";
  j["train"] = t;
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: malformed JSON: ") + e.what());
  }
  RunConfig cfg;
  try {
    cfg.model = model_from_json_obj(j.at("model"));
    cfg.dtype = j.value("dtype", std::string("f32"));
    cfg.corpus_path = j.value("corpus", cfg.corpus_path);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (j.contains("train")) {
      const json& t = j.at("train");
      cfg.train.steps = t.value("steps", cfg.train.steps);
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.seq_len = t.value("seq_len", cfg.train.seq_len);
      cfg.train.warmup = t.value("warmup", cfg.train.warmup);
      cfg.train.lr_max = t.value("lr_max", cfg.train.lr_max);
      cfg.train.lr_min = t.value("lr_min", cfg.train.lr_min);
      cfg.train.opt.beta1 = t.value("beta1", cfg.train.opt.beta1);
      cfg.train.opt.beta2 = t.value("beta2", cfg.train.opt.beta2);
      cfg.train.opt.eps = t.value("eps", cfg.train.opt.eps);
      cfg.train.opt.weight_decay = t.value("weight_decay", cfg.train.opt.weight_decay);
      cfg.train.val_fraction = t.value("val_fraction", cfg.train.val_fraction);
      cfg.train.val_every = t.value("val_every", cfg.train.val_every);
      const std::string layout = t.value("layout", std::string("grouped"));
      require(layout == "grouped" || layout == "interleaved",
              "config: layout must be grouped or interleaved");
      cfg.train.layout = layout == "grouped" ? Layout::Grouped : Layout::Interleaved;
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: missing or mistyped field: ") + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  require_io(f.good(), "config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return run_config_from_json(ss.str());
}

}  // namespace phd
