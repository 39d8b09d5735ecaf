#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sadi/diffusion.hpp"
#include "sadi/errors.hpp"
#include "sadi/nn/ops.hpp"
#include "sadi/nn/param_store.hpp"

namespace sadi {

enum class Ablation { full, no_fde, no_second_block, no_weighted_comb };

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_fde: return "no_fde";
    case Ablation::no_second_block: return "no_second_block";
    case Ablation::no_weighted_comb: return "no_weighted_comb";
  }
  throw ConfigError("ablation_name: bad enum");
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "no_fde") return Ablation::no_fde;
  if (s == "no_second_block") return Ablation::no_second_block;
  if (s == "no_weighted_comb") return Ablation::no_weighted_comb;
  throw ConfigError("unknown ablation '" + s + "'");
}

struct ModelConfig {
  int L = 32;
  int K = 8;
  int n_fde = 2;
  int n_gta = 4;
  int d_model = 64;
  int heads = 8;
  int d_emb = 128;
  int T = 50;
  ScheduleKind schedule_kind = ScheduleKind::quadratic;
  double beta_min = 1e-4;
  double beta_max = 0.5;
  Ablation ablation = Ablation::full;
};

inline void validate_config(const ModelConfig& c) {
  if (c.L < 1 || c.K < 1) throw ConfigError("ModelConfig: L and K must be >= 1");
  if (c.n_fde < 0) throw ConfigError("ModelConfig: n_fde must be >= 0");
  if (c.n_gta < 1) throw ConfigError("ModelConfig: n_gta must be >= 1");
  if (c.d_model < 1 || c.heads < 1 || c.d_model % c.heads != 0)
    throw ConfigError("ModelConfig: heads must divide d_model");
  if (c.d_emb < 2 || c.d_emb % 2 != 0) throw ConfigError("ModelConfig: d_emb must be even and >= 2");
  if (c.T < 1) throw ConfigError("ModelConfig: T must be >= 1");
  // Layer n of the FDE stack dilates by n; kernel taps must fit the window.
  if (c.n_fde > 0 && c.n_fde > c.L - 1)
    throw ConfigError("ModelConfig: n_fde=" + std::to_string(c.n_fde) + " dilation exceeds window length " +
                      std::to_string(c.L));
  if (!(c.beta_min > 0.0) || !(c.beta_min <= c.beta_max) || !(c.beta_max < 1.0))
    throw ConfigError("ModelConfig: need 0 < beta_min <= beta_max < 1");
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"L", c.L},
          {"K", c.K},
          {"n_fde", c.n_fde},
          {"n_gta", c.n_gta},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"d_emb", c.d_emb},
          {"T", c.T},
          {"schedule_kind", schedule_kind_name(c.schedule_kind)},
          {"beta_min", c.beta_min},
          {"beta_max", c.beta_max},
          {"ablation", ablation_name(c.ablation)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.L = j.at("L").get<int>();
    c.K = j.at("K").get<int>();
    c.n_fde = j.at("n_fde").get<int>();
    c.n_gta = j.at("n_gta").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.heads = j.at("heads").get<int>();
    c.d_emb = j.at("d_emb").get<int>();
    c.T = j.at("T").get<int>();
    c.schedule_kind = parse_schedule_kind(j.at("schedule_kind").get<std::string>());
    c.beta_min = j.at("beta_min").get<double>();
    c.beta_max = j.at("beta_max").get<double>();
    c.ablation = parse_ablation(j.at("ablation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  validate_config(c);
  return c;
}

// Everything the two-stage pass produces. Tensors stay attached to the tape
// so the trainer can differentiate the three-term loss.
struct DenoiserOutput {
  nn::Tensor eps1;
  nn::Tensor eps2;
  nn::Tensor eps_theta;
  nn::Tensor w_l;      // L x L, head-averaged attention feeding the combiner
  nn::Tensor w_tilde;  // L x K combination weights
};

// Time positional encoding for a K-wide signal; odd K uses the first K
// columns of the next even table (the core op keeps its even-width contract).
inline Matrix pos_enc_cols(int len, int k) {
  if (k % 2 == 0) return nn::sinusoidal_pos_enc(len, k);
  Matrix full = nn::sinusoidal_pos_enc(len, k + 1);
  Matrix out(len, k);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < k; ++j) out(i, j) = full(i, j);
  return out;
}

namespace detail {

struct AttnNames {
  std::string q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
  explicit AttnNames(const std::string& prefix)
      : q_w(prefix + ".q.w"),
        q_b(prefix + ".q.b"),
        k_w(prefix + ".k.w"),
        k_b(prefix + ".k.b"),
        v_w(prefix + ".v.w"),
        v_b(prefix + ".v.b"),
        out_w(prefix + ".out.w"),
        out_b(prefix + ".out.b") {}
};

inline void add_attn_params(nn::ParamStore& ps, Rng& rng, const std::string& prefix, int d) {
  AttnNames n(prefix);
  ps.add(n.q_w, nn::fan_in_uniform(rng, d, d, d));
  ps.add(n.q_b, Matrix(1, d));
  ps.add(n.k_w, nn::fan_in_uniform(rng, d, d, d));
  ps.add(n.k_b, Matrix(1, d));
  ps.add(n.v_w, nn::fan_in_uniform(rng, d, d, d));
  ps.add(n.v_b, Matrix(1, d));
  ps.add(n.out_w, nn::fan_in_uniform(rng, d, d, d));
  ps.add(n.out_b, Matrix(1, d));
}

inline nn::AttnParams attn_params(const nn::ParamStore& ps, const std::string& prefix) {
  AttnNames n(prefix);
  return {ps.at(n.q_w), ps.at(n.q_b), ps.at(n.k_w), ps.at(n.k_b),
          ps.at(n.v_w), ps.at(n.v_b), ps.at(n.out_w), ps.at(n.out_b)};
}

}  // namespace detail

// Two-stage conditional denoiser: feature-dependency encoder stack, two gated
// temporal attention blocks, and a learned per-cell combination of their
// noise estimates.
class Denoiser {
 public:
  // Fresh model with randomly initialized parameters.
  Denoiser(const ModelConfig& cfg, Rng& rng) : cfg_(cfg), sched_(build_schedule(cfg.T, cfg.beta_min, cfg.beta_max, cfg.schedule_kind)) {
    validate_config(cfg_);
    init_params(rng);
    pe_ = pos_enc_cols(cfg_.L, cfg_.K);
  }

  // Model wrapping restored parameters; shapes and names must match exactly.
  Denoiser(const ModelConfig& cfg, nn::ParamStore&& restored)
      : cfg_(cfg), sched_(build_schedule(cfg.T, cfg.beta_min, cfg.beta_max, cfg.schedule_kind)) {
    validate_config(cfg_);
    params_ = std::move(restored);
    check_params();
    pe_ = pos_enc_cols(cfg_.L, cfg_.K);
  }

  const ModelConfig& cfg() const { return cfg_; }
  const DiffusionSchedule& schedule() const { return sched_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // Full two-stage forward pass for one window at diffusion step t.
  DenoiserOutput denoise(const Matrix& xt_ta, const Matrix& x0_co, const Matrix& mask_co, int t) const {
    sched_.check_t(t);
    check_same_shape(xt_ta, x0_co, "denoise");
    check_same_shape(xt_ta, mask_co, "denoise");
    if (xt_ta.rows != cfg_.L || xt_ta.cols != cfg_.K)
      throw DimError("denoise: window is " + shape_str(xt_ta) + ", model expects " + std::to_string(cfg_.L) + "x" +
                     std::to_string(cfg_.K));
    using namespace nn;
    const ParamStore& ps = params_;

    // Inputs enter the graph as constants; mask algebra via binary weights.
    Tensor x_ta = Tensor::constant(xt_ta);
    Tensor x_co = Tensor::constant(x0_co);
    Tensor m = Tensor::constant(mask_co);
    Matrix inv_mask_m(mask_co.rows, mask_co.cols);
    for (size_t i = 0; i < inv_mask_m.v.size(); ++i) inv_mask_m.v[i] = 1.0 - mask_co.v[i];
    Tensor inv_m = Tensor::constant(inv_mask_m);
    Tensor pe = Tensor::constant(pe_);

    // (1) Merge the noisy targets with the observed values, add the trainable
    // input position table.
    Tensor x = add(add(hadamard(m, x_co), hadamard(inv_m, x_ta)), ps.at("input_pos.table"));

    // (2) Feature dependency encoding.
    if (cfg_.ablation != Ablation::no_fde) x = fde_forward(x);

    // (3) Stage 1 over time, conditioned on the observed values.
    Tensor t_emb = step_mlp(t);
    Tensor x_pos = add(x, pe);
    Tensor cond_pos = add(x_co, pe);
    const int stage1_layers = cfg_.ablation == Ablation::no_second_block ? 2 * cfg_.n_gta : cfg_.n_gta;
    auto [h1, wl1, skips1] = gta_block("gta1", stage1_layers, x_pos, cond_pos, t_emb);
    Tensor eps1 = aggregate_skips("gta1", skips1);

    DenoiserOutput out;
    out.eps1 = eps1;
    if (cfg_.ablation == Ablation::no_second_block) {
      out.eps2 = eps1;
      out.eps_theta = eps1;
      out.w_l = wl1;
      out.w_tilde = Tensor::constant(Matrix(cfg_.L, cfg_.K, 0.5));
      return out;
    }

    // (4) Invert the closed form with the stage-1 estimate, keep observed
    // cells, re-encode positions, and refine. Gradient flows through eps1.
    const double ab = sched_.alpha_bar_at(t);
    Tensor x0_hat = affine(sub(x_ta, scale(eps1, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
    Tensor merged = add(hadamard(m, x_co), hadamard(inv_m, x0_hat));
    Tensor stage2_in = add(merged, pe);
    auto [h2, wl2, skips2] = gta_block("gta2", cfg_.n_gta, stage2_in, cond_pos, t_emb);
    Tensor eps2 = aggregate_skips("gta2", skips2);
    out.eps2 = eps2;
    out.w_l = wl2;

    // (5) Learned combination from stage-2 attention and the mask.
    if (cfg_.ablation == Ablation::no_weighted_comb) {
      out.eps_theta = eps2;
      out.w_tilde = Tensor::constant(Matrix(cfg_.L, cfg_.K, 1.0));
      return out;
    }
    Tensor wt = combine_weights(wl2, m);
    out.w_tilde = wt;
    Tensor ones = Tensor::constant(Matrix(cfg_.L, cfg_.K, 1.0));
    out.eps_theta = add(hadamard(sub(ones, wt), eps1), hadamard(wt, eps2));
    return out;
  }

  // Total GTA layers instantiated: two blocks of n_gta, or one of 2*n_gta.
  int gta_layer_count() const { return 2 * cfg_.n_gta; }

 private:
  void init_params(Rng& rng) {
    using namespace nn;
    const int L = cfg_.L, K = cfg_.K, d = cfg_.d_model, de = cfg_.d_emb;
    {
      Matrix t(L, K);
      for (double& e : t.v) e = (2.0 * rng.uniform() - 1.0) * 0.02;
      params_.add("input_pos.table", std::move(t));
    }
    if (cfg_.ablation != Ablation::no_fde) {
      for (int n = 0; n < cfg_.n_fde; ++n) {
        const std::string p = idx("fde", n);
        params_.add(p + ".conv.kernel", fan_in_uniform(rng, K, 3 * K, 3 * K));
        params_.add(p + ".in_proj.w", fan_in_uniform(rng, L, d, L));
        params_.add(p + ".in_proj.b", Matrix(1, d));
        sadi::detail::add_attn_params(params_, rng, p + ".attn", d);
        params_.add(p + ".norm1.gain", Matrix(1, d, 1.0));
        params_.add(p + ".norm1.shift", Matrix(1, d));
        params_.add(p + ".norm2.gain", Matrix(1, d, 1.0));
        params_.add(p + ".norm2.shift", Matrix(1, d));
        params_.add(p + ".ffn.w1", fan_in_uniform(rng, d, 2 * d, d));
        params_.add(p + ".ffn.b1", Matrix(1, 2 * d));
        params_.add(p + ".ffn.w2", fan_in_uniform(rng, 2 * d, d, 2 * d));
        params_.add(p + ".ffn.b2", Matrix(1, d));
        params_.add(p + ".out_proj.w", fan_in_uniform(rng, d, L, d));
        params_.add(p + ".out_proj.b", Matrix(1, L));
      }
    }
    params_.add("temb.lin1.w", fan_in_uniform(rng, de, de, de));
    params_.add("temb.lin1.b", Matrix(1, de));
    params_.add("temb.lin2.w", fan_in_uniform(rng, de, de, de));
    params_.add("temb.lin2.b", Matrix(1, de));

    auto add_gta_layer = [&](const std::string& p) {
      params_.add(p + ".in_proj.w", fan_in_uniform(rng, K, d, K));
      params_.add(p + ".in_proj.b", Matrix(1, d));
      params_.add(p + ".t_proj.w", fan_in_uniform(rng, de, d, de));
      params_.add(p + ".t_proj.b", Matrix(1, d));
      sadi::detail::add_attn_params(params_, rng, p + ".attn", d);
      params_.add(p + ".cond_proj.w", fan_in_uniform(rng, K, d, K));
      params_.add(p + ".cond_proj.b", Matrix(1, d));
      params_.add(p + ".gate.w", fan_in_uniform(rng, d, 2 * d, d));
      params_.add(p + ".gate.b", Matrix(1, 2 * d));
      // Zero so an untrained layer passes its input through and contributes
      // no skip; the whole fresh denoiser then predicts zero noise.
      params_.add(p + ".out_proj.w", Matrix(d, 2 * K));
      params_.add(p + ".out_proj.b", Matrix(1, 2 * K));
    };
    const int stage1_layers = cfg_.ablation == Ablation::no_second_block ? 2 * cfg_.n_gta : cfg_.n_gta;
    for (int n = 0; n < stage1_layers; ++n) add_gta_layer(idx("gta1", n));
    params_.add("gta1.agg.w", fan_in_uniform(rng, K, K, K));
    params_.add("gta1.agg.b", Matrix(1, K));
    if (cfg_.ablation != Ablation::no_second_block) {
      for (int n = 0; n < cfg_.n_gta; ++n) add_gta_layer(idx("gta2", n));
      params_.add("gta2.agg.w", fan_in_uniform(rng, K, K, K));
      params_.add("gta2.agg.b", Matrix(1, K));
      if (cfg_.ablation != Ablation::no_weighted_comb) {
        params_.add("combine.linear.w", fan_in_uniform(rng, L + K, K, L + K));
        params_.add("combine.linear.b", Matrix(1, K));
      }
    }
  }

  // Restored parameter sets must carry exactly the names and shapes this
  // config would create; extra, missing, or misshapen entries are hard errors.
  void check_params() const {
    Rng probe(0);
    Denoiser fresh(cfg_, probe);
    const auto& want = fresh.params_.entries;
    if (params_.entries.size() != want.size())
      throw ConfigError("checkpoint parameters do not match config: " + std::to_string(params_.entries.size()) +
                        " entries, expected " + std::to_string(want.size()));
    auto it1 = params_.entries.begin();
    auto it2 = want.begin();
    for (; it2 != want.end(); ++it1, ++it2) {
      if (it1->first != it2->first)
        throw ConfigError("checkpoint parameter '" + it1->first + "' unexpected; wanted '" + it2->first + "'");
      if (!it1->second.value().same_shape(it2->second.value()))
        throw ConfigError("checkpoint parameter '" + it1->first + "' has shape " + shape_str(it1->second.value()) +
                          ", expected " + shape_str(it2->second.value()));
    }
  }

 public:
  // The stages below are part of the public surface: tests pin each one
  // against straight-line reference compositions.

  nn::Tensor step_mlp(int t) const {
    using namespace nn;
    const ParamStore& ps = params_;
    Tensor e = Tensor::constant(step_embedding_table(t, cfg_.d_emb));
    e = silu(linear(e, ps.at("temb.lin1.w"), ps.at("temb.lin1.b")));
    e = silu(linear(e, ps.at("temb.lin2.w"), ps.at("temb.lin2.b")));
    return e;
  }

  // One encoder layer per n: dilated conv across time (features as channels),
  // then a transformer block over the feature axis where each of the K tokens
  // carries its time profile.
  nn::Tensor fde_forward(nn::Tensor x) const {
    using namespace nn;
    const ParamStore& ps = params_;
    for (int n = 0; n < cfg_.n_fde; ++n) {
      const std::string p = idx("fde", n);
      Tensor c = transpose(conv1d_dilated(transpose(x), ps.at(p + ".conv.kernel"), n + 1));
      Tensor tokens = linear(transpose(c), ps.at(p + ".in_proj.w"), ps.at(p + ".in_proj.b"));  // K x d
      Tensor attn_out = mhsa(tokens, cfg_.heads, sadi::detail::attn_params(ps, p + ".attn")).first;
      Tensor h1 = layer_norm(add(tokens, attn_out), ps.at(p + ".norm1.gain"), ps.at(p + ".norm1.shift"));
      Tensor f = linear(silu(linear(h1, ps.at(p + ".ffn.w1"), ps.at(p + ".ffn.b1"))), ps.at(p + ".ffn.w2"),
                        ps.at(p + ".ffn.b2"));
      Tensor h2 = layer_norm(add(h1, f), ps.at(p + ".norm2.gain"), ps.at(p + ".norm2.shift"));
      x = transpose(linear(h2, ps.at(p + ".out_proj.w"), ps.at(p + ".out_proj.b")));  // back to L x K
    }
    return x;
  }

  // DiffWave-style residual layers over the time axis. Returns the final
  // hidden state, the last layer's head-averaged attention, and one skip
  // output per layer.
  std::tuple<nn::Tensor, nn::Tensor, std::vector<nn::Tensor>> gta_block(const std::string& block, int layers,
                                                                        nn::Tensor h, const nn::Tensor& cond_pos,
                                                                        const nn::Tensor& t_emb) const {
    using namespace nn;
    const ParamStore& ps = params_;
    const int K = cfg_.K;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    std::vector<Tensor> skips;
    Tensor w_l;
    for (int n = 0; n < layers; ++n) {
      const std::string p = idx(block, n);
      Tensor z = linear(h, ps.at(p + ".in_proj.w"), ps.at(p + ".in_proj.b"));
      z = add_rowvec(z, linear(t_emb, ps.at(p + ".t_proj.w"), ps.at(p + ".t_proj.b")));
      auto [attn_out, attn_w] = mhsa(z, cfg_.heads, sadi::detail::attn_params(ps, p + ".attn"));
      Tensor a = add(attn_out, linear(cond_pos, ps.at(p + ".cond_proj.w"), ps.at(p + ".cond_proj.b")));
      Tensor g = glu(linear(a, ps.at(p + ".gate.w"), ps.at(p + ".gate.b")));
      Tensor o = linear(g, ps.at(p + ".out_proj.w"), ps.at(p + ".out_proj.b"));
      Tensor res = slice_cols(o, 0, K);
      skips.push_back(slice_cols(o, K, 2 * K));
      h = scale(add(h, res), inv_sqrt2);
      w_l = attn_w;
    }
    return {h, w_l, std::move(skips)};
  }

  // eps_i = linear(sum of skips / sqrt(2)).
  nn::Tensor aggregate_skips(const std::string& block, const std::vector<nn::Tensor>& skips) const {
    using namespace nn;
    if (skips.empty()) throw ArgError("aggregate_skips: empty skip list");
    const ParamStore& ps = params_;
    Tensor s = skips[0];
    for (size_t i = 1; i < skips.size(); ++i) s = add(s, skips[i]);
    s = scale(s, 1.0 / std::sqrt(2.0));
    return linear(s, ps.at(block + ".agg.w"), ps.at(block + ".agg.b"));
  }

  // W_tilde = sigmoid(linear(concat(W_L, mask))).
  nn::Tensor combine_weights(const nn::Tensor& w_l, const nn::Tensor& mask) const {
    using namespace nn;
    const ParamStore& ps = params_;
    Tensor cat = concat_cols(w_l, mask);
    return sigmoid(linear(cat, ps.at("combine.linear.w"), ps.at("combine.linear.b")));
  }

 private:
  ModelConfig cfg_;
  DiffusionSchedule sched_;
  nn::ParamStore params_;
  Matrix pe_;

  static std::string idx(const std::string& prefix, int i) { return prefix + "." + std::to_string(i); }
};

}  // namespace sadi
