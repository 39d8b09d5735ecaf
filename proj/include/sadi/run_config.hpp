#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "sadi/data.hpp"
#include "sadi/denoiser.hpp"
#include "sadi/errors.hpp"
#include "sadi/masking.hpp"
#include "sadi/trainer.hpp"

namespace sadi {

inline nlohmann::json pattern_to_json(const PatternSpec& p) {
  return nlohmann::json{{"n_features", p.n_features}, {"n_blocks", p.n_blocks}, {"block_len", p.block_len}};
}

inline PatternSpec pattern_from_json(const nlohmann::json& j) {
  PatternSpec p;
  try {
    p.n_features = j.at("n_features").get<int>();
    p.n_blocks = j.at("n_blocks").get<int>();
    p.block_len = j.at("block_len").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("pattern: ") + e.what());
  }
  return p;
}

// Evaluation protocol: the blackout pattern drawn per trial, the trial count,
// and the ensemble size per imputation.
struct EvalConfig {
  PatternSpec pattern;
  int trials = 20;
  int samples = 50;
  bool use_median = false;
};

// Where windows come from: a CSV path or a synthetic generator stanza, plus
// how many windows go to each split. All-zero split sizes mean "everything",
// interpreted per command (train: all training; evaluate: all test).
struct DataConfig {
  std::string csv;
  SynthSpec synth;
  bool use_synth = false;
  int n_train = 0;
  int n_val = 0;
  int n_test = 0;
};

// One batch run, fully described. A file provides any subset of the sections;
// unspecified fields keep their defaults, and `seed` flows into sections that
// do not pin their own.
struct RunConfig {
  uint64_t seed = 0;
  int workers = 1;
  int warm_epochs = 0;  // random-missing epochs before a cold mixed-strategy run
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
};

namespace detail {

// Overlays a config stanza onto the section's defaults, rejecting keys the
// schema does not know (nested objects are replaced wholesale).
inline nlohmann::json merge_section(nlohmann::json defaults, const nlohmann::json& stanza, const char* section) {
  if (!stanza.is_object()) throw DataError(std::string("run config: section '") + section + "' must be an object");
  for (const auto& [key, value] : stanza.items()) {
    if (!defaults.contains(key))
      throw DataError(std::string("run config: unknown key '") + key + "' in section '" + section + "'");
    defaults[key] = value;
  }
  return defaults;
}

}  // namespace detail

inline nlohmann::json data_config_to_json(const DataConfig& c) {
  return nlohmann::json{{"csv", c.csv},
                        {"synth", c.use_synth ? synth_spec_to_json(c.synth) : nlohmann::json()},
                        {"n_train", c.n_train},
                        {"n_val", c.n_val},
                        {"n_test", c.n_test}};
}

inline nlohmann::json eval_config_to_json(const EvalConfig& c) {
  return nlohmann::json{{"pattern", pattern_to_json(c.pattern)},
                        {"trials", c.trials},
                        {"samples", c.samples},
                        {"use_median", c.use_median}};
}

// Fully resolved echo: every field present, defaults filled in. Manifests
// embed this so a run is reproducible from its own output.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return nlohmann::json{{"seed", c.seed},
                        {"workers", c.workers},
                        {"warm_epochs", c.warm_epochs},
                        {"model", model_config_to_json(c.model)},
                        {"train", train_config_to_json(c.train)},
                        {"data", data_config_to_json(c.data)},
                        {"eval", eval_config_to_json(c.eval)}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("run config: top level must be an object");
  static const char* known[] = {"seed", "workers", "warm_epochs", "model", "train", "data", "eval"};
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw DataError("run config: unknown top-level key '" + key + "'");
  }

  RunConfig c;
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("workers")) c.workers = j.at("workers").get<int>();
    if (j.contains("warm_epochs")) c.warm_epochs = j.at("warm_epochs").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("run config: ") + e.what());
  }
  if (c.workers < 1) throw ConfigError("run config: workers must be >= 1");
  if (c.warm_epochs < 0) throw ConfigError("run config: warm_epochs must be >= 0");

  if (j.contains("model"))
    c.model = model_config_from_json(detail::merge_section(model_config_to_json(ModelConfig{}), j.at("model"), "model"));

  {
    TrainConfig defaults;
    defaults.seed = c.seed;  // inherited unless the stanza pins its own
    nlohmann::json merged = train_config_to_json(defaults);
    if (j.contains("train")) merged = detail::merge_section(merged, j.at("train"), "train");
    c.train = train_config_from_json(merged);
  }

  if (j.contains("data")) {
    const nlohmann::json& d = j.at("data");
    nlohmann::json merged = detail::merge_section(data_config_to_json(DataConfig{}), d, "data");
    try {
      c.data.csv = merged.at("csv").get<std::string>();
      c.data.n_train = merged.at("n_train").get<int>();
      c.data.n_val = merged.at("n_val").get<int>();
      c.data.n_test = merged.at("n_test").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("run config: data: ") + e.what());
    }
    if (!merged.at("synth").is_null()) {
      SynthSpec sd;
      sd.seed = c.seed;
      nlohmann::json ms = detail::merge_section(synth_spec_to_json(sd), merged.at("synth"), "data.synth");
      c.data.synth = synth_spec_from_json(ms);
      c.data.use_synth = true;
    }
    if (c.data.use_synth && !c.data.csv.empty())
      throw ConfigError("run config: data section must name a csv or a synth stanza, not both");
    if (c.data.n_train < 0 || c.data.n_val < 0 || c.data.n_test < 0)
      throw ConfigError("run config: split sizes must be >= 0");
  }

  if (j.contains("eval")) {
    nlohmann::json merged = detail::merge_section(eval_config_to_json(EvalConfig{}), j.at("eval"), "eval");
    try {
      c.eval.pattern = pattern_from_json(merged.at("pattern"));
      c.eval.trials = merged.at("trials").get<int>();
      c.eval.samples = merged.at("samples").get<int>();
      c.eval.use_median = merged.at("use_median").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("run config: eval: ") + e.what());
    }
    if (c.eval.trials < 1 || c.eval.samples < 1)
      throw ConfigError("run config: eval trials and samples must be >= 1");
  }

  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("run config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace sadi
