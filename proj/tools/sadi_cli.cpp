#include <cmath>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sadi/data.hpp"
#include "sadi/denoiser.hpp"
#include "sadi/errors.hpp"
#include "sadi/metrics.hpp"
#include "sadi/nn/checkpoint.hpp"
#include "sadi/run_config.hpp"
#include "sadi/sampler.hpp"
#include "sadi/trainer.hpp"
#include "sadi/util.hpp"
#include "sadi/version.hpp"

namespace sadi {
namespace {

namespace fs = std::filesystem;

// Flag values; zero-ish defaults mean "not given" where the config should win.
struct Flags {
  std::string config;
  std::string out = ".";
  std::string checkpoint;
  std::string input;
  uint64_t seed = 0;
  bool seed_given = false;
  int workers = 0;
};

void log(const std::string& line) { std::cerr << line << '\n'; }

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

std::string config_hash(const nlohmann::json& resolved) { return hex64(fnv1a64(resolved.dump())); }

nlohmann::json schedule_json(const ModelConfig& mc) {
  return nlohmann::json{{"T", mc.T},
                        {"kind", schedule_kind_name(mc.schedule_kind)},
                        {"beta_min", mc.beta_min},
                        {"beta_max", mc.beta_max}};
}

// File first, then flag overrides. A --seed override is spliced in before
// parsing so sections that inherit the run seed follow it, while sections
// pinning their own keep them.
RunConfig resolve_config(const Flags& f) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(f.config));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("run config " + f.config + ": " + e.what());
  }
  if (f.seed_given) j["seed"] = f.seed;
  RunConfig cfg = run_config_from_json(j);
  if (f.workers > 0) cfg.workers = f.workers;
  return cfg;
}

Dataset resolve_windows(const DataConfig& d, int L) {
  if (d.use_synth) {
    if (d.synth.L != L)
      throw ConfigError("data.synth.L is " + std::to_string(d.synth.L) + " but the model expects windows of " +
                        std::to_string(L));
    return synth_generate(d.synth);
  }
  if (d.csv.empty()) throw ConfigError("data section needs a csv path or a synth stanza");
  return window(load_csv(d.csv), L);
}

// Splits per the config; all-zero sizes put every window into `fallback`
// (0 = train, 2 = test).
Splits resolve_splits(const Dataset& all, const DataConfig& d, int fallback) {
  int n[3] = {d.n_train, d.n_val, d.n_test};
  if (n[0] == 0 && n[1] == 0 && n[2] == 0) n[fallback] = int(all.windows());
  return split(all, n[0], n[1], n[2]);
}

struct LoadedModel {
  ModelConfig mc;
  NormStats stats;
  std::unique_ptr<Denoiser> model;
  std::string content_hash;
};

// A trainable checkpoint is self-describing: architecture and normalization
// travel with the weights.
LoadedModel load_model(const std::string& path) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  LoadedModel out;
  try {
    out.mc = model_config_from_json(ck.extra.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path + " has no model section: " + e.what());
  }
  if (ck.extra.contains("stats")) out.stats = stats_from_json(ck.extra.at("stats"));
  out.model = std::make_unique<Denoiser>(out.mc, std::move(ck.params));
  out.content_hash = ck.content_hash;
  return out;
}

struct TrainOutcome {
  FitResult fit_res;
  FitResult warm_res;
  bool has_warm = false;
  std::string ckpt_path;
  std::string ckpt_hash;
};

// Fits the model (with a random-missing warm phase first when the mixed
// strategy starts cold), then re-saves the best checkpoint with the
// normalization stats and config hash folded into its manifest.
TrainOutcome run_training(Denoiser& model, const TimeSeriesBatch& train_b, const TimeSeriesBatch& val_b,
                          TrainConfig tc, bool warm, int warm_epochs, const NormStats& stats,
                          const std::string& chash) {
  TrainOutcome out;
  out.ckpt_path = tc.checkpoint_path;
  if (out.ckpt_path.empty()) throw ConfigError("train: no checkpoint path resolved");

  if (tc.strategy == MaskStrategy::mpb && !warm) {
    if (warm_epochs < 1)
      throw ConfigError("train: the mixed strategy from a cold start needs warm_epochs > 0 or --checkpoint");
    TrainConfig wtc = tc;
    wtc.strategy = MaskStrategy::rm;
    wtc.epochs = warm_epochs;
    wtc.checkpoint_path = out.ckpt_path + "_warm";
    log("train: warm phase, " + std::to_string(warm_epochs) + " random-missing epochs");
    out.warm_res = fit(model, train_b, val_b, wtc, false);
    nn::Checkpoint wck = nn::load_checkpoint(wtc.checkpoint_path);
    model = Denoiser(model.cfg(), std::move(wck.params));
    out.has_warm = true;
    warm = true;
  }

  log("train: " + std::string(strategy_name(tc.strategy)) + ", " + std::to_string(tc.epochs) + " epochs, " +
      std::to_string(train_b.size()) + " windows");
  out.fit_res = fit(model, train_b, val_b, tc, warm);

  if (!fs::exists(out.ckpt_path + ".json")) {
    // Zero-epoch runs never checkpoint from inside fit; persist as-is.
    nlohmann::json extra{{"model", model_config_to_json(model.cfg())}, {"train", train_config_to_json(tc)}, {"epoch", 0}};
    nn::save_checkpoint(out.ckpt_path, model.params(), extra);
  }

  nn::Checkpoint best = nn::load_checkpoint(out.ckpt_path);
  nlohmann::json extra = best.extra;
  extra["stats"] = stats_to_json(stats);
  extra["config_hash"] = chash;
  out.ckpt_hash = nn::save_checkpoint(out.ckpt_path, best.params, extra);
  return out;
}

nlohmann::json evaluate_to_json(const Denoiser& model, const TimeSeriesBatch& test_b, const RunConfig& cfg) {
  EvalReport rep = evaluate(model, test_b, cfg.eval.pattern, cfg.eval.trials, cfg.eval.samples, cfg.seed, cfg.workers);
  return report_to_json(rep);
}

std::string trials_csv(const nlohmann::json& report, const std::string& chash) {
  std::string out = "# config " + chash + "\ntrial,seed,mse,crps\n";
  const auto& mse = report.at("mse");
  const auto& crps = report.at("crps");
  const auto& seeds = report.at("trial_seeds");
  for (size_t i = 0; i < mse.size(); ++i) {
    out += std::to_string(i + 1) + ',' + std::to_string(seeds[i].get<uint64_t>()) + ',' +
           format_double(mse[i].get<double>()) + ',' + format_double(crps[i].get<double>()) + '\n';
  }
  return out;
}

int cmd_synth(const Flags& f) {
  RunConfig cfg = resolve_config(f);
  if (!cfg.data.use_synth) throw ConfigError("synth: the config needs a data.synth stanza");
  fs::create_directories(f.out);

  Dataset ds = synth_generate(cfg.data.synth);
  const int L = cfg.data.synth.L, K = cfg.data.synth.K;
  Matrix all(int(ds.windows()) * L, K);
  for (size_t w = 0; w < ds.windows(); ++w)
    for (int r = 0; r < L; ++r)
      for (int c = 0; c < K; ++c) all(int(w) * L + r, c) = ds.series.values[w](r, c);

  const nlohmann::json resolved = run_config_to_json(cfg);
  const std::string chash = config_hash(resolved);
  const std::string csv_path = f.out + "/synth.csv";
  write_file(csv_path, "# config " + chash + "\n" + to_csv(all, Matrix(all.rows, all.cols, 1.0), ds.feature_names));

  nlohmann::json manifest{{"command", "synth"},   {"version", kVersion}, {"config", resolved},
                          {"config_hash", chash}, {"rows", all.rows},    {"windows", ds.windows()},
                          {"features", ds.feature_names}, {"csv", csv_path}};
  write_file(f.out + "/synth_manifest.json", dump(manifest));
  log("synth: wrote " + csv_path + " (" + std::to_string(all.rows) + " rows, " + std::to_string(K) + " features)");
  return 0;
}

int cmd_train(const Flags& f) {
  RunConfig cfg = resolve_config(f);
  fs::create_directories(f.out);

  bool warm = false;
  std::unique_ptr<Denoiser> model;
  if (!f.checkpoint.empty()) {
    LoadedModel lm = load_model(f.checkpoint);
    cfg.model = lm.mc;  // the checkpoint's architecture is the truth
    model = std::move(lm.model);
    warm = true;
    log("train: warm start from " + f.checkpoint);
  }

  Dataset all = resolve_windows(cfg.data, cfg.model.L);
  Splits sp = resolve_splits(all, cfg.data, 0);
  if (sp.train.windows() == 0) throw ConfigError("train: empty training split");
  NormStats stats = feature_stats(sp.train.series);
  Dataset train_n = normalize(sp.train, stats);
  Dataset val_n = normalize(sp.val, stats);

  if (!model) {
    Rng init(cfg.train.seed);
    model = std::make_unique<Denoiser>(cfg.model, init);
  }

  TrainConfig tc = cfg.train;
  if (tc.checkpoint_path.empty()) tc.checkpoint_path = f.out + "/model";
  cfg.train = tc;

  const nlohmann::json resolved = run_config_to_json(cfg);
  const std::string chash = config_hash(resolved);

  TrainOutcome res = run_training(*model, train_n.series, val_n.series, tc, warm, cfg.warm_epochs, stats, chash);

  write_file(f.out + "/history.csv", "# config " + chash + "\n" + history_to_csv(res.fit_res.history));
  if (res.has_warm)
    write_file(f.out + "/history_warm.csv", "# config " + chash + "\n" + history_to_csv(res.warm_res.history));

  nlohmann::json manifest{{"command", "train"},
                          {"version", kVersion},
                          {"config", resolved},
                          {"config_hash", chash},
                          {"checkpoint", res.ckpt_path},
                          {"checkpoint_hash", res.ckpt_hash},
                          {"schedule", schedule_json(cfg.model)},
                          {"windows", {{"train", sp.train.windows()}, {"val", sp.val.windows()}, {"test", sp.test.windows()}}},
                          {"best_epoch", res.fit_res.best_epoch},
                          {"skipped_batches", res.fit_res.skipped_batches}};
  if (std::isfinite(res.fit_res.best_val)) manifest["best_val"] = res.fit_res.best_val;
  if (res.has_warm) manifest["warm_epochs"] = cfg.warm_epochs;
  write_file(f.out + "/train_manifest.json", dump(manifest));
  log("train: checkpoint " + res.ckpt_path + " (hash " + res.ckpt_hash + ")");
  return 0;
}

int cmd_impute(const Flags& f) {
  RunConfig cfg = resolve_config(f);
  if (f.checkpoint.empty()) throw ConfigError("impute: --checkpoint is required");
  const std::string input = !f.input.empty() ? f.input : cfg.data.csv;
  if (input.empty()) throw ConfigError("impute: give an input csv argument or data.csv in the config");
  fs::create_directories(f.out);

  LoadedModel lm = load_model(f.checkpoint);
  if (lm.stats.empty()) throw DataError("impute: checkpoint " + f.checkpoint + " carries no normalization stats");
  cfg.model = lm.mc;

  Dataset raw = load_csv(input);
  if (raw.features() != lm.mc.K)
    throw DataError("impute: " + input + " has " + std::to_string(raw.features()) + " features, model expects " +
                    std::to_string(lm.mc.K));
  Dataset win = window(raw, lm.mc.L);
  Dataset win_n = normalize(win, lm.stats);

  const Matrix& rv = raw.series.values[0];
  const Matrix& rmask = raw.series.observed[0];
  Matrix point(rv.rows, rv.cols), pmask(rv.rows, rv.cols);
  Matrix spread(rv.rows, rv.cols), smask(rv.rows, rv.cols);

  Rng base(cfg.seed);
  DenoiseFn fn = model_denoise_fn(*lm.model);
  log("impute: " + std::to_string(win.windows()) + " windows, " + std::to_string(cfg.eval.samples) + " samples each");
  for (size_t w = 0; w < win.windows(); ++w) {
    ImputationResult res = impute(win_n.series.values[w], win_n.series.observed[w], fn, lm.model->schedule(),
                                  cfg.eval.samples, base.fork(w), cfg.eval.use_median, cfg.workers);
    Matrix p = denormalize(res.point, lm.stats);
    Matrix s = denormalize_spread(res.spread, lm.stats);
    for (int r = 0; r < lm.mc.L; ++r) {
      const int r0 = int(w) * lm.mc.L + r;
      for (int c = 0; c < rv.cols; ++c) {
        // Observed cells pass through bit-exactly; only holes take model values.
        point(r0, c) = rmask(r0, c) == 1.0 ? rv(r0, c) : p(r, c);
        pmask(r0, c) = 1.0;
        if (rmask(r0, c) == 0.0) {
          spread(r0, c) = s(r, c);
          smask(r0, c) = 1.0;
        }
      }
    }
  }
  const int covered = int(win.windows()) * lm.mc.L;
  for (int r0 = covered; r0 < rv.rows; ++r0)
    for (int c = 0; c < rv.cols; ++c) {
      point(r0, c) = rv(r0, c);
      pmask(r0, c) = rmask(r0, c);
    }

  const nlohmann::json resolved = run_config_to_json(cfg);
  const std::string chash = config_hash(resolved);
  const std::string point_path = f.out + "/imputed.csv";
  const std::string spread_path = f.out + "/spread.csv";
  write_file(point_path, "# config " + chash + "\n" + to_csv(point, pmask, raw.feature_names));
  write_file(spread_path, "# config " + chash + "\n" + to_csv(spread, smask, raw.feature_names));

  nlohmann::json manifest{{"command", "impute"},
                          {"version", kVersion},
                          {"config", resolved},
                          {"config_hash", chash},
                          {"checkpoint", f.checkpoint},
                          {"checkpoint_hash", lm.content_hash},
                          {"schedule", schedule_json(lm.mc)},
                          {"input", input},
                          {"rows", rv.rows},
                          {"imputed_rows", covered},
                          {"samples", cfg.eval.samples},
                          {"seed", cfg.seed},
                          {"imputed_csv", point_path},
                          {"spread_csv", spread_path}};
  write_file(f.out + "/impute_manifest.json", dump(manifest));
  log("impute: wrote " + point_path + " and " + spread_path);
  return 0;
}

int cmd_evaluate(const Flags& f) {
  RunConfig cfg = resolve_config(f);
  if (f.checkpoint.empty()) throw ConfigError("evaluate: --checkpoint is required");
  fs::create_directories(f.out);

  LoadedModel lm = load_model(f.checkpoint);
  if (lm.stats.empty()) throw DataError("evaluate: checkpoint " + f.checkpoint + " carries no normalization stats");
  cfg.model = lm.mc;

  Dataset all = resolve_windows(cfg.data, lm.mc.L);
  Splits sp = resolve_splits(all, cfg.data, 2);
  if (sp.test.windows() == 0) throw ConfigError("evaluate: empty test split");
  Dataset test_n = normalize(sp.test, lm.stats);

  log("evaluate: " + std::to_string(sp.test.windows()) + " windows, " + std::to_string(cfg.eval.trials) + " trials");
  nlohmann::json report = evaluate_to_json(*lm.model, test_n.series, cfg);

  const nlohmann::json resolved = run_config_to_json(cfg);
  const std::string chash = config_hash(resolved);
  nlohmann::json out{{"command", "evaluate"},
                     {"version", kVersion},
                     {"config", resolved},
                     {"config_hash", chash},
                     {"checkpoint", f.checkpoint},
                     {"checkpoint_hash", lm.content_hash},
                     {"schedule", schedule_json(lm.mc)},
                     {"report", report}};
  write_file(f.out + "/eval_report.json", dump(out));
  write_file(f.out + "/eval_trials.csv", trials_csv(report, chash));
  log("evaluate: mean mse " + format_double(report.at("mse_mean").get<double>()) + ", mean crps " +
      format_double(report.at("crps_mean").get<double>()));
  return 0;
}

int cmd_ablate(const Flags& f) {
  RunConfig cfg = resolve_config(f);
  fs::create_directories(f.out);
  if (cfg.data.n_train < 1 || cfg.data.n_test < 1)
    throw ConfigError("ablate: explicit data.n_train and data.n_test are required");

  Dataset all = resolve_windows(cfg.data, cfg.model.L);
  Splits sp = split(all, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test);
  NormStats stats = feature_stats(sp.train.series);
  Dataset train_n = normalize(sp.train, stats);
  Dataset val_n = normalize(sp.val, stats);
  Dataset test_n = normalize(sp.test, stats);

  const Ablation variants[] = {Ablation::full, Ablation::no_fde, Ablation::no_second_block,
                               Ablation::no_weighted_comb};
  const nlohmann::json resolved_base = run_config_to_json(cfg);
  const std::string base_hash = config_hash(resolved_base);
  nlohmann::json summary_variants = nlohmann::json::object();

  for (Ablation v : variants) {
    RunConfig vcfg = cfg;
    vcfg.model.ablation = v;
    const std::string name = ablation_name(v);
    log("ablate: training variant " + name);

    Rng init(vcfg.train.seed);
    Denoiser model(vcfg.model, init);
    TrainConfig tc = vcfg.train;
    tc.checkpoint_path = f.out + "/ablate_" + name + "_model";
    vcfg.train = tc;

    const nlohmann::json resolved = run_config_to_json(vcfg);
    const std::string chash = config_hash(resolved);
    TrainOutcome tr = run_training(model, train_n.series, val_n.series, tc, false, vcfg.warm_epochs, stats, chash);

    LoadedModel best = load_model(tr.ckpt_path);
    nlohmann::json report = evaluate_to_json(*best.model, test_n.series, vcfg);

    nlohmann::json out{{"command", "ablate"},
                       {"variant", name},
                       {"version", kVersion},
                       {"config", resolved},
                       {"config_hash", chash},
                       {"checkpoint", tr.ckpt_path},
                       {"checkpoint_hash", tr.ckpt_hash},
                       {"schedule", schedule_json(vcfg.model)},
                       {"report", report}};
    write_file(f.out + "/ablate_" + name + "_report.json", dump(out));
    summary_variants[name] = nlohmann::json{{"mse_mean", report.at("mse_mean")},
                                            {"crps_mean", report.at("crps_mean")},
                                            {"checkpoint_hash", tr.ckpt_hash},
                                            {"report", "ablate_" + name + "_report.json"}};
  }

  nlohmann::json summary{{"command", "ablate"},    {"version", kVersion},
                         {"config", resolved_base}, {"config_hash", base_hash},
                         {"variants", summary_variants}};
  write_file(f.out + "/ablate_summary.json", dump(summary));
  log("ablate: wrote 4 variant reports and ablate_summary.json");
  return 0;
}

}  // namespace
}  // namespace sadi

int main(int argc, char** argv) {
  CLI::App app{"Conditional-diffusion imputer for multivariate time series"};
  app.set_version_flag("--version", sadi::kVersion);
  app.require_subcommand(1);

  sadi::Flags f;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "Run config JSON")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", f.out, "Output directory (default: current)");
    sub->add_option("--seed", f.seed, "Overrides the config's run seed")
        ->each([&](const std::string&) { f.seed_given = true; });
    sub->add_option("--workers", f.workers, "Sampling worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--checkpoint", f.checkpoint, "Model checkpoint (train: warm start; impute/evaluate: model)");
  };

  CLI::App* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset CSV");
  CLI::App* c_train = app.add_subcommand("train", "Train an imputer and write a checkpoint");
  CLI::App* c_impute = app.add_subcommand("impute", "Fill the missing cells of a CSV");
  CLI::App* c_evaluate = app.add_subcommand("evaluate", "Score a checkpoint under blackout trials");
  CLI::App* c_ablate = app.add_subcommand("ablate", "Train and score every architecture variant");
  for (CLI::App* sub : {c_synth, c_train, c_impute, c_evaluate, c_ablate}) add_common(sub);
  c_impute->add_option("input", f.input, "Input CSV (falls back to the config's data.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(c_synth)) return sadi::cmd_synth(f);
    if (app.got_subcommand(c_train)) return sadi::cmd_train(f);
    if (app.got_subcommand(c_impute)) return sadi::cmd_impute(f);
    if (app.got_subcommand(c_evaluate)) return sadi::cmd_evaluate(f);
    return sadi::cmd_ablate(f);
  } catch (const sadi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const sadi::ArgError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const sadi::DimError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const sadi::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const sadi::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
