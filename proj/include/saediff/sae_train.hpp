// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adam training of Top-K / L1 SAEs on masked shard streams, and FVU
// evaluation on held-out shards.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/core/adam.hpp"
#include "saediff/core/csv.hpp"
#include "saediff/core/stats.hpp"
#include "saediff/sae.hpp"

namespace saediff {

// Random-access view over a shard collection; file-backed streams keep one
// shard resident at a time.
class ShardStream {
 public:
  virtual ~ShardStream() = default;
  virtual std::size_t size() const = 0;
  virtual const ActivationShard& get(std::size_t i) = 0;
};

class MemoryShardStream final : public ShardStream {
 public:
  explicit MemoryShardStream(std::span<const ActivationShard> shards) : shards_(shards) {}
  std::size_t size() const override { return shards_.size(); }
  const ActivationShard& get(std::size_t i) override { return shards_[i]; }

 private:
  std::span<const ActivationShard> shards_;
};

class FileShardStream final : public ShardStream {
 public:
  explicit FileShardStream(std::vector<std::filesystem::path> paths) : paths_(std::move(paths)) {}
  std::size_t size() const override { return paths_.size(); }
  const ActivationShard& get(std::size_t i) override {
    if (cached_ != i) {
      current_ = read_shard(paths_[i]);
      cached_ = i;
    }
    return current_;
  }

 private:
  std::vector<std::filesystem::path> paths_;
  ActivationShard current_;
  std::optional<std::size_t> cached_;
};

// ---------------------------------------------------------------------------

enum class LrRule { InvSqrtLayer, Constant };

inline double layer_lr_scale(LrRule rule, std::uint32_t layer) {
  return rule == LrRule::InvSqrtLayer ? 1.0 / std::sqrt(1.0 + layer) : 1.0;
}

struct TrainConfig {
  double base_lr = 1e-3;
  LrRule lr_rule = LrRule::InvSqrtLayer;
  std::size_t batch_size = 256;
  std::uint64_t max_tokens = 100'000;
  LossMode loss_mode = LossMode::topk();
  std::uint64_t seed = 0;
  std::string init = "random";  // "warm" or "random"; recorded in the sidecar
  std::uint64_t eval_every_tokens = 10'000;
  bool normalize_decoder = true;
  AdamConfig adam{};
};

struct EvalReport {
  double fvu = 0;  // pooled over all selected tokens
  double fvu_mean = 0, fvu_std = 0, fvu_min = 0, fvu_max = 0;  // across shards
  std::uint64_t tokens_seen = 0;
  double l0_mean = 0;
  std::vector<std::pair<std::uint64_t, double>> fvu_curve;

  // First recorded point with fvu <= threshold.
  std::optional<std::uint64_t> tokens_to_reach(double threshold) const {
    for (const auto& [t, v] : fvu_curve)
      if (v <= threshold) return t;
    return std::nullopt;
  }
};

// ---------------------------------------------------------------------------

struct SaeGrads {
  Matrix<double> w_enc, w_dec;
  std::vector<double> b_enc, b_dec;

  explicit SaeGrads(const SaeParams& p)
      : w_enc(p.f(), p.d()), w_dec(p.d(), p.f()), b_enc(p.f(), 0.0), b_dec(p.d(), 0.0) {}

  void zero() {
    w_enc.fill(0);
    w_dec.fill(0);
    std::fill(b_enc.begin(), b_enc.end(), 0.0);
    std::fill(b_dec.begin(), b_dec.end(), 0.0);
  }
};

// Adds d(scale·loss(x))/dθ for one token; returns its reconstruction error.
// The Top-K selection is treated as fixed (straight-through on kept codes).
inline double accumulate_token_grad(const SaeParams& p, std::span<const float> x, const LossMode& mode,
                                    double scale, SaeGrads& g) {
  const std::size_t D = p.d(), F = p.f();
  const auto code = encode(p, x, mode);
  const auto xhat = decode(p, code);
  std::vector<double> dx(D);
  double err = 0;
  for (std::size_t i = 0; i < D; ++i) {
    const double e = double(xhat[i]) - x[i];
    err += e * e;
    dx[i] = 2.0 * e * scale;
    g.b_dec[i] += dx[i];
  }
  for (std::size_t n = 0; n < code.nnz(); ++n) {
    const auto f = code.index[n];
    const double z = code.value[n];
    double dz = 0;
    for (std::size_t i = 0; i < D; ++i) {
      g.w_dec(i, f) += dx[i] * z;
      dz += dx[i] * p.w_dec.data()[i * F + f];
    }
    if (mode.kind == LossMode::Kind::VanillaL1) dz += mode.lambda * scale;  // z > 0 on kept codes
    g.b_enc[f] += dz;
    double* gw = g.w_enc.data() + f * D;
    for (std::size_t i = 0; i < D; ++i) gw[i] += dz * x[i];
  }
  return err;
}

// Gradient of the mean per-token loss over the tokens `regime` selects.
// Excluded tokens are never read, so their contribution is exactly zero.
inline std::size_t accumulate_shard_grad(const SaeParams& p, const ActivationShard& shard,
                                         MaskRegime regime, const LossMode& mode, SaeGrads& g) {
  const auto idx = mask_tokens(shard, regime);
  if (idx.empty()) return 0;
  const double scale = 1.0 / static_cast<double>(idx.size());
  for (auto t : idx) accumulate_token_grad(p, shard.hidden.row(t), mode, scale, g);
  return idx.size();
}

// ---------------------------------------------------------------------------

inline EvalReport eval_fvu(const SaeParams& p, ShardStream& shards, MaskRegime regime,
                           const LossMode& mode = LossMode::topk()) {
  const std::size_t D = p.d();
  std::vector<double> mean(D, 0.0);
  std::uint64_t n = 0;
  for (std::size_t s = 0; s < shards.size(); ++s) {
    const auto& sh = shards.get(s);
    if (sh.d_model() != D) throw DimensionError("eval_fvu: shard d_model differs from SAE D");
    for (auto t : mask_tokens(sh, regime)) {
      const auto x = sh.hidden.row(t);
      for (std::size_t i = 0; i < D; ++i) mean[i] += x[i];
      ++n;
    }
  }
  if (n == 0) throw EmptyInputError("eval_fvu: no tokens selected in the evaluation set");
  for (auto& m : mean) m /= static_cast<double>(n);

  double sse = 0, var = 0, l0 = 0;
  std::vector<double> per_shard;
  for (std::size_t s = 0; s < shards.size(); ++s) {
    const auto& sh = shards.get(s);
    double s_sse = 0, s_var = 0;
    const auto idx = mask_tokens(sh, regime);
    for (auto t : idx) {
      const auto x = sh.hidden.row(t);
      const auto code = encode(p, x, mode);
      const auto xhat = decode(p, code);
      l0 += static_cast<double>(code.nnz());
      for (std::size_t i = 0; i < D; ++i) {
        const double e = double(x[i]) - xhat[i];
        const double c = double(x[i]) - mean[i];
        s_sse += e * e;
        s_var += c * c;
      }
    }
    sse += s_sse;
    var += s_var;
    if (!idx.empty() && s_var > 0) per_shard.push_back(s_sse / s_var);
  }
  if (!(var > 0)) throw EmptyInputError("eval_fvu: evaluation set has zero variance");
  EvalReport r;
  r.fvu = sse / var;
  const auto m = stats::moments(per_shard);
  r.fvu_mean = m.mean;
  r.fvu_std = m.std;
  r.fvu_min = m.min;
  r.fvu_max = m.max;
  r.l0_mean = l0 / static_cast<double>(n);
  return r;
}

inline EvalReport eval_fvu(const SaeParams& p, std::span<const ActivationShard> shards, MaskRegime regime,
                           const LossMode& mode = LossMode::topk()) {
  MemoryShardStream s(shards);
  return eval_fvu(p, s, regime, mode);
}

// ---------------------------------------------------------------------------

struct TrainResult {
  SaeParams params;
  EvalReport report;
};

// Adam over mini-batches of masked tokens drawn from `train` in a seeded
// shard order, epoch after epoch, until max_tokens have been consumed.
// Held-out FVU is recorded at token 0, every eval_every_tokens, and at the end.
inline TrainResult train(SaeParams params, ShardStream& train_shards, ShardStream& heldout,
                         MaskRegime regime, const TrainConfig& cfg) {
  validate(params);
  if (cfg.base_lr <= 0) throw ConfigError("train: base_lr must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (train_shards.size() == 0) throw EmptyInputError("train: empty shard stream");

  std::uint64_t selectable = 0;
  for (std::size_t s = 0; s < train_shards.size(); ++s) {
    const auto& sh = train_shards.get(s);
    if (sh.layer != params.layer)
      throw InvariantError("train: shard " + sh.sample_id + " is layer " + std::to_string(sh.layer) +
                           ", SAE is layer " + std::to_string(params.layer));
    if (sh.d_model() != params.d()) throw DimensionError("train: shard d_model differs from SAE D");
    selectable += mask_tokens(sh, regime).size();
  }
  if (selectable == 0) throw EmptyInputError("train: empty training signal (regime selects no tokens)");

  const double lr = cfg.base_lr * layer_lr_scale(cfg.lr_rule, params.layer);
  Adam adam(cfg.adam);
  const auto b_wenc = adam.add_block(params.w_enc.size());
  const auto b_benc = adam.add_block(params.b_enc.size());
  const auto b_wdec = adam.add_block(params.w_dec.size());
  const auto b_bdec = adam.add_block(params.b_dec.size());

  SaeGrads g(params);
  std::vector<float> gbuf;
  auto step = [&](std::size_t n_batch) {
    adam.begin_step();
    const double inv = 1.0 / static_cast<double>(n_batch);
    auto apply = [&](std::size_t block, std::span<float> param, std::span<const double> grad) {
      gbuf.resize(grad.size());
      for (std::size_t i = 0; i < grad.size(); ++i) gbuf[i] = static_cast<float>(grad[i] * inv);
      adam.update<float>(block, param, gbuf, lr);
    };
    apply(b_wenc, params.w_enc.flat(), g.w_enc.flat());
    apply(b_benc, params.b_enc, g.b_enc);
    apply(b_wdec, params.w_dec.flat(), g.w_dec.flat());
    apply(b_bdec, params.b_dec, g.b_dec);
    if (cfg.normalize_decoder) normalize_decoder_columns(params);
    g.zero();
  };

  EvalReport report;
  report.fvu_curve.emplace_back(0, eval_fvu(params, heldout, regime, cfg.loss_mode).fvu);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_shards.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t seen = 0, next_eval = cfg.eval_every_tokens;
  std::size_t in_batch = 0;
  double batch_err = 0;
  while (seen < cfg.max_tokens) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto s : order) {
      if (seen >= cfg.max_tokens) break;
      const auto& sh = train_shards.get(s);
      for (auto t : mask_tokens(sh, regime)) {
        if (seen >= cfg.max_tokens) break;
        batch_err += accumulate_token_grad(params, sh.hidden.row(t), cfg.loss_mode, 1.0, g);
        ++in_batch;
        ++seen;
        if (in_batch == cfg.batch_size) {
          if (!std::isfinite(batch_err))
            throw TrainingError("train: non-finite loss after " + std::to_string(seen) +
                                " tokens (layer " + std::to_string(params.layer) + ", lr " +
                                std::to_string(lr) + ")");
          step(in_batch);
          in_batch = 0;
          batch_err = 0;
        }
        if (cfg.eval_every_tokens > 0 && seen >= next_eval) {
          report.fvu_curve.emplace_back(seen, eval_fvu(params, heldout, regime, cfg.loss_mode).fvu);
          next_eval += cfg.eval_every_tokens;
        }
      }
    }
  }
  if (in_batch > 0) {
    if (!std::isfinite(batch_err)) throw TrainingError("train: non-finite loss in final batch");
    step(in_batch);
  }
  auto final_eval = eval_fvu(params, heldout, regime, cfg.loss_mode);
  if (report.fvu_curve.back().first != seen) report.fvu_curve.emplace_back(seen, final_eval.fvu);
  final_eval.fvu_curve = std::move(report.fvu_curve);
  final_eval.tokens_seen = seen;
  return {std::move(params), std::move(final_eval)};
}

inline TrainResult train(SaeParams params, std::span<const ActivationShard> train_shards,
                         std::span<const ActivationShard> heldout, MaskRegime regime, const TrainConfig& cfg) {
  MemoryShardStream tr(train_shards), ho(heldout);
  return train(std::move(params), tr, ho, regime, cfg);
}

// ---------------------------------------------------------------------------
// Sidecar JSON and CSV exports

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},
          {"lr_rule", c.lr_rule == LrRule::InvSqrtLayer ? "inv_sqrt_layer" : "constant"},
          {"batch_size", c.batch_size},
          {"max_tokens", c.max_tokens},
          {"loss_mode", c.loss_mode.kind == LossMode::Kind::TopK ? "topk" : "l1"},
          {"lambda", c.loss_mode.lambda},
          {"seed", c.seed},
          {"init", c.init},
          {"eval_every_tokens", c.eval_every_tokens},
          {"normalize_decoder", c.normalize_decoder},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.base_lr = j.value("base_lr", c.base_lr);
  const auto rule = j.value("lr_rule", std::string("inv_sqrt_layer"));
  if (rule == "inv_sqrt_layer") c.lr_rule = LrRule::InvSqrtLayer;
  else if (rule == "constant") c.lr_rule = LrRule::Constant;
  else throw ConfigError("unknown lr_rule '" + rule + "'");
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  const auto mode = j.value("loss_mode", std::string("topk"));
  if (mode == "topk") c.loss_mode = LossMode::topk();
  else if (mode == "l1") c.loss_mode = LossMode::l1(j.value("lambda", 0.0));
  else throw ConfigError("unknown loss_mode '" + mode + "'");
  c.seed = j.value("seed", c.seed);
  c.init = j.value("init", c.init);
  c.eval_every_tokens = j.value("eval_every_tokens", c.eval_every_tokens);
  c.normalize_decoder = j.value("normalize_decoder", c.normalize_decoder);
  if (j.contains("adam")) {
    c.adam.beta1 = j["adam"].value("beta1", c.adam.beta1);
    c.adam.beta2 = j["adam"].value("beta2", c.adam.beta2);
    c.adam.eps = j["adam"].value("eps", c.adam.eps);
  }
  return c;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [t, v] : r.fvu_curve) curve.push_back({t, v});
  return {{"fvu", r.fvu},           {"fvu_mean", r.fvu_mean}, {"fvu_std", r.fvu_std},
          {"fvu_min", r.fvu_min},   {"fvu_max", r.fvu_max},   {"tokens_seen", r.tokens_seen},
          {"l0_mean", r.l0_mean},   {"fvu_curve", curve}};
}

inline std::string fvu_curve_csv(const EvalReport& r) {
  csv::Table t({"tokens_seen", "fvu"});
  for (const auto& [tok, v] : r.fvu_curve) t.add({std::to_string(tok), csv::num(v)});
  return t.str();
}

// Rows mean/std/min/max, one column per regime label.
inline std::string fvu_summary_csv(const std::vector<std::pair<std::string, EvalReport>>& by_regime) {
  std::vector<std::string> header{"stat"};
  for (const auto& [name, _] : by_regime) header.push_back(name);
  csv::Table t(header);
  auto row = [&](const char* stat, auto get) {
    std::vector<std::string> r{stat};
    for (const auto& [_, rep] : by_regime) r.push_back(csv::num(get(rep)));
    t.add(r);
  };
  row("mean", [](const EvalReport& e) { return e.fvu_mean; });
  row("std", [](const EvalReport& e) { return e.fvu_std; });
  row("min", [](const EvalReport& e) { return e.fvu_min; });
  row("max", [](const EvalReport& e) { return e.fvu_max; });
  return t.str();
}

}  // namespace saediff
