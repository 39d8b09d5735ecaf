#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sadi/denoiser.hpp"
#include "sadi/masking.hpp"
#include "sadi/metrics.hpp"
#include "sadi/nn/adam.hpp"
#include "sadi/nn/checkpoint.hpp"
#include "sadi/sampler.hpp"
#include "sadi/util.hpp"

namespace sadi {

enum class MaskStrategy { rm, mpb };

inline std::string strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::rm: return "rm";
    case MaskStrategy::mpb: return "mpb";
  }
  throw ConfigError("strategy_name: bad enum");
}

inline MaskStrategy parse_strategy(const std::string& s) {
  if (s == "rm") return MaskStrategy::rm;
  if (s == "mpb") return MaskStrategy::mpb;
  throw ConfigError("unknown mask strategy '" + s + "'");
}

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  MaskStrategy strategy = MaskStrategy::rm;
  double rm_fraction = 0.2;
  double pb_prob = 0.5;
  double lr = 1e-3;
  double clip_norm = 1.0;
  uint64_t seed = 0;
  int val_every = 10;        // validation cadence in epochs
  int val_samples = 4;       // ensemble size for validation imputation
  PatternSpec val_pattern;   // fixed blackout pattern scoring the val split
  std::string checkpoint_path;  // empty disables checkpointing
};

// `warm_start` marks a parameter state already trained with the random
// missing strategy (a loaded checkpoint or a preceding phase in-process);
// the mixed strategy refuses to start cold.
inline void validate_train_config(const TrainConfig& c, bool warm_start = false) {
  if (c.epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
  if (c.batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (!(c.rm_fraction > 0.0) || !(c.rm_fraction < 1.0)) throw ConfigError("TrainConfig: rm_fraction must be in (0, 1)");
  if (!(c.pb_prob >= 0.0) || !(c.pb_prob <= 1.0)) throw ConfigError("TrainConfig: pb_prob must be in [0, 1]");
  if (!(c.lr > 0.0)) throw ConfigError("TrainConfig: lr must be positive");
  if (!(c.clip_norm > 0.0)) throw ConfigError("TrainConfig: clip_norm must be positive");
  if (c.val_every < 1) throw ConfigError("TrainConfig: val_every must be >= 1");
  if (c.val_samples < 1) throw ConfigError("TrainConfig: val_samples must be >= 1");
  if (c.strategy == MaskStrategy::mpb && !warm_start)
    throw ConfigError("TrainConfig: the mixed strategy requires a warm start trained with random missing");
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"strategy", strategy_name(c.strategy)},
          {"rm_fraction", c.rm_fraction},
          {"pb_prob", c.pb_prob},
          {"lr", c.lr},
          {"clip_norm", c.clip_norm},
          {"seed", c.seed},
          {"val_every", c.val_every},
          {"val_samples", c.val_samples},
          {"val_pattern",
           {{"n_features", c.val_pattern.n_features},
            {"n_blocks", c.val_pattern.n_blocks},
            {"block_len", c.val_pattern.block_len}}},
          {"checkpoint_path", c.checkpoint_path}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.rm_fraction = j.at("rm_fraction").get<double>();
    c.pb_prob = j.at("pb_prob").get<double>();
    c.lr = j.at("lr").get<double>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.val_every = j.at("val_every").get<int>();
    c.val_samples = j.at("val_samples").get<int>();
    const auto& p = j.at("val_pattern");
    c.val_pattern.n_features = p.at("n_features").get<int>();
    c.val_pattern.n_blocks = p.at("n_blocks").get<int>();
    c.val_pattern.block_len = p.at("block_len").get<int>();
    c.checkpoint_path = j.at("checkpoint_path").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  return c;
}

namespace detail {

// Unnormalized loss body: sum over target cells of
// (eps - eps_theta)^2 + ((eps - eps1)^2 + (eps - eps2)^2) / 2,
// with the difference masked so non-target entries are exactly inert.
inline std::pair<nn::Tensor, double> masked_loss_terms(const Matrix& eps, const nn::Tensor& eps1,
                                                       const nn::Tensor& eps2, const nn::Tensor& eps_theta,
                                                       const Matrix& target_mask) {
  using namespace nn;
  check_same_shape(eps, target_mask, "masked_loss");
  if (!is_binary(target_mask)) throw ArgError("masked_loss: target mask must be 0/1");
  Tensor m = Tensor::constant(target_mask);
  Tensor e = Tensor::constant(eps);
  auto term = [&](const Tensor& pred) {
    Tensor d = hadamard(sub(e, pred), m);
    return sum_all(hadamard(d, d));
  };
  Tensor body = add(term(eps_theta), scale(add(term(eps1), term(eps2)), 0.5));
  return {body, double(count_ones(target_mask))};
}

}  // namespace detail

inline nn::Tensor masked_loss(const Matrix& eps, const nn::Tensor& eps1, const nn::Tensor& eps2,
                              const nn::Tensor& eps_theta, const Matrix& target_mask) {
  auto [body, n] = detail::masked_loss_terms(eps, eps1, eps2, eps_theta, target_mask);
  if (n < 1.0) throw DataError("masked_loss: no imputation targets in batch");
  return nn::scale(body, 1.0 / (2.0 * n));
}

// One optimizer step over a batch of windows: a single uniform diffusion step
// for the batch, per-window mask splits and target noise, graphs built and
// differentiated window-by-window (so peak memory is one window's tape), and
// gradients reduced in window order before clipping and the Adam update.
// Throws DataError when every window in the batch is degenerate.
inline double train_step(Denoiser& model, const TimeSeriesBatch& batch, const TrainConfig& cfg, nn::AdamState& opt,
                         Rng& rng) {
  if (batch.size() == 0) throw ArgError("train_step: empty batch");
  if (!(cfg.rm_fraction > 0.0) || !(cfg.rm_fraction < 1.0)) throw ConfigError("train_step: rm_fraction must be in (0, 1)");
  if (!(cfg.pb_prob >= 0.0) || !(cfg.pb_prob <= 1.0)) throw ConfigError("train_step: pb_prob must be in [0, 1]");
  check_batch(batch);
  const DiffusionSchedule& sched = model.schedule();
  const int t = int(rng.uniform_int(1, sched.T));

  struct WindowPlan {
    size_t w;
    MaskPair mp;
    Matrix eps;
  };
  std::vector<WindowPlan> plans;
  double n_total = 0.0;
  for (size_t w = 0; w < batch.size(); ++w) {
    MaskPair mp;
    try {
      mp = cfg.strategy == MaskStrategy::rm ? rm_split(batch.observed[w], cfg.rm_fraction, rng)
                                            : mpb_split(batch.observed[w], cfg.rm_fraction, cfg.pb_prob, rng);
    } catch (const ArgError&) {
      continue;  // window without observed cells
    } catch (const DataError&) {
      continue;  // blackout never intersected the observed set
    }
    Matrix eps(mp.target.rows, mp.target.cols);
    for (size_t i = 0; i < eps.v.size(); ++i)
      if (mp.target.v[i] == 1.0) eps.v[i] = rng.normal();
    n_total += double(count_ones(mp.target));
    plans.push_back({w, std::move(mp), std::move(eps)});
  }
  if (plans.empty() || n_total < 1.0) throw DataError("train_step: degenerate batch, no imputation targets");

  nn::GradMap grads;
  for (const auto& [name, p] : model.params().entries) grads.emplace(name, Matrix(p.rows(), p.cols()));

  double loss_value = 0.0;
  for (const WindowPlan& plan : plans) {
    Matrix x0_ta = apply_mask(batch.values[plan.w], plan.mp.target);
    Matrix xt_ta = forward_noise(x0_ta, t, plan.eps, sched);
    Matrix x0_co = apply_mask(batch.values[plan.w], plan.mp.cond);
    DenoiserOutput out = model.denoise(xt_ta, x0_co, plan.mp.cond, t);
    auto [body, n] = detail::masked_loss_terms(plan.eps, out.eps1, out.eps2, out.eps_theta, plan.mp.target);
    nn::Tensor root = nn::scale(body, 1.0 / (2.0 * n_total));
    loss_value += root.value()(0, 0);
    nn::GradBuffer buf;
    nn::backprop(root, buf);
    for (auto& [name, g] : grads)
      if (const Matrix* pg = buf.find(model.params().at(name))) nn::add_into(g, *pg);
  }

  nn::clip_grad_norm(grads, cfg.clip_norm);
  nn::adam_step(model.params(), grads, opt);
  return loss_value;
}

struct HistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_mse = std::numeric_limits<double>::quiet_NaN();  // NaN when the epoch had no validation pass
};

struct FitResult {
  std::vector<HistoryRow> history;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int skipped_batches = 0;
};

// Imputation MSE of the current parameters on the validation split under
// fixed masks, pooled over windows.
inline double validation_mse(const Denoiser& model, const TimeSeriesBatch& val, const std::vector<MaskPair>& masks,
                             int S, const Rng& base) {
  DenoiseFn fn = model_denoise_fn(model);
  PooledMse acc;
  for (size_t w = 0; w < val.size(); ++w) {
    Matrix x0_co = apply_mask(val.values[w], masks[w].cond);
    ImputationResult res = impute(x0_co, masks[w].cond, fn, model.schedule(), S, base.fork(w));
    acc.add(res.point, val.values[w], masks[w].target);
  }
  return acc.mean();
}

// Epoch loop: shuffled non-overlapping batches, periodic validation under a
// per-fit fixed blackout pattern, best-validation checkpointing, and a hard
// abort on non-finite loss (any checkpoint already on disk stays).
inline FitResult fit(Denoiser& model, const TimeSeriesBatch& train, const TimeSeriesBatch& val,
                     const TrainConfig& cfg, bool warm_start = false) {
  validate_train_config(cfg, warm_start);
  if (train.size() == 0) throw ArgError("fit: empty training set");
  check_batch(train);
  if (val.size() > 0) check_batch(val);

  const Rng root(cfg.seed);
  Rng order_rng = root.fork(1);
  Rng batch_rng = root.fork(2);
  Rng val_mask_rng = root.fork(3);

  std::vector<MaskPair> val_masks;
  for (size_t w = 0; w < val.size(); ++w)
    val_masks.push_back(pb_eval_pattern(val.observed[w], cfg.val_pattern, val_mask_rng));

  nn::AdamState opt;
  opt.cfg.lr = cfg.lr;

  auto save = [&](int epoch, double val_mse) {
    if (cfg.checkpoint_path.empty()) return;
    nlohmann::json extra{{"model", model_config_to_json(model.cfg())},
                         {"train", train_config_to_json(cfg)},
                         {"epoch", epoch}};
    if (std::isfinite(val_mse)) extra["val_mse"] = val_mse;
    nn::save_checkpoint(cfg.checkpoint_path, model.params(), extra);
  };

  FitResult res;
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += size_t(cfg.batch_size)) {
      TimeSeriesBatch b;
      const size_t end = std::min(order.size(), begin + size_t(cfg.batch_size));
      for (size_t i = begin; i < end; ++i) {
        b.values.push_back(train.values[order[i]]);
        b.observed.push_back(train.observed[order[i]]);
      }
      double loss;
      try {
        loss = train_step(model, b, cfg, opt, batch_rng);
      } catch (const DataError&) {
        ++res.skipped_batches;
        continue;
      }
      if (!std::isfinite(loss))
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) + "; aborting");
      epoch_loss += loss;
      ++batches;
    }

    HistoryRow row;
    row.epoch = epoch;
    row.train_loss = batches > 0 ? epoch_loss / double(batches) : std::numeric_limits<double>::quiet_NaN();
    if (val.size() > 0 && (epoch % cfg.val_every == 0 || epoch == cfg.epochs)) {
      row.val_mse = validation_mse(model, val, val_masks, cfg.val_samples, root.fork(1000 + uint64_t(epoch)));
      if (row.val_mse < res.best_val) {
        res.best_val = row.val_mse;
        res.best_epoch = epoch;
        save(epoch, row.val_mse);
      }
    }
    res.history.push_back(row);
  }

  // Without a validation split the final parameters are the checkpoint.
  if (val.size() == 0 && cfg.epochs > 0) save(cfg.epochs, std::numeric_limits<double>::quiet_NaN());
  return res;
}

inline std::string history_to_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,train_loss,val_mse\n";
  for (const HistoryRow& r : rows) {
    out += std::to_string(r.epoch);
    out += ',';
    out += format_double(r.train_loss);
    out += ',';
    if (std::isfinite(r.val_mse)) out += format_double(r.val_mse);
    out += '\n';
  }
  return out;
}

}  // namespace sadi
