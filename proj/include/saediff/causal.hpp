// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Attribution patching on the toy model with an exact patching oracle, and
// decoder-direction ablation.
//
// Method A: score = Σ (corrupt − clean) · ∇_clean
// Method B: score = Σ (clean − corrupt) · ∇_corrupt
// Scores sum over a head's Q and K activations (V optional) and over token
// positions (all by default, visual rows optionally).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "saediff/code_cache.hpp"
#include "saediff/core/csv.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/core/stats.hpp"
#include "saediff/sae.hpp"
#include "saediff/toymodel/forward.hpp"
#include "saediff/toymodel/task.hpp"
#include "saediff/toymodel/train.hpp"

namespace saediff::causal {

using toy::Hooks;
using toy::ModelInput;
using toy::ModelParams;
using toy::Site;
using toy::Tape;

enum class Positions { All, Text, Visual };

inline std::string to_string(Positions p) {
  switch (p) {
    case Positions::All: return "all";
    case Positions::Text: return "text";
    case Positions::Visual: return "visual";
  }
  return "?";
}

inline Positions parse_positions(const std::string& s) {
  if (s == "all") return Positions::All;
  if (s == "text") return Positions::Text;
  if (s == "visual") return Positions::Visual;
  throw ConfigError("unknown position set '" + s + "' (expected all, text or visual)");
}

inline std::vector<std::size_t> position_rows(std::size_t n_visual, std::size_t n_tokens, Positions p) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < n_tokens; ++t) {
    const bool vis = t < n_visual;
    if (p == Positions::All || (p == Positions::Visual) == vis) out.push_back(t);
  }
  return out;
}

inline std::string head_name(std::size_t layer, std::size_t head) {
  return "L" + std::to_string(layer) + "H" + std::to_string(head);
}

// ---------------------------------------------------------------------------
// Feature objective: Σ_{t ∈ positions} ⟨resid_L(t), d⟩ with d a decoder column.

template <class T>
struct FeatureObjective : toy::Objective<T> {
  std::uint32_t layer = 0;
  std::vector<T> direction;
  Positions positions = Positions::Text;

  FeatureObjective(std::uint32_t l, std::vector<T> d, Positions p) : layer(l), direction(std::move(d)), positions(p) {}

  const Matrix<T>& resid(const Tape<T>& tp) const {
    if (layer >= tp.layers.size() || tp.layers[layer].out.empty())
      throw UnknownSiteError("feature objective: layer " + std::to_string(layer) + " missing from tape");
    const auto& r = tp.layers[layer].out;
    require_dims(r.cols() == direction.size(), "feature objective: decoder width " + std::to_string(direction.size()) +
                                                   " != d_model " + std::to_string(r.cols()));
    return r;
  }
  T value(const Tape<T>& tp) const override {
    const auto& r = resid(tp);
    double acc = 0;
    for (auto t : position_rows(tp.n_visual, tp.n_tokens, positions))
      acc += dot<T, double>(r.row(t), direction);
    return static_cast<T>(acc);
  }
  void seed(const Tape<T>& tp, toy::SiteGrads<T>& seeds) const override {
    const auto& r = resid(tp);
    auto& g = seeds[Site::resid(layer)];
    if (g.empty()) g = Matrix<T>(r.rows(), r.cols());
    for (auto t : position_rows(tp.n_visual, tp.n_tokens, positions))
      for (std::size_t i = 0; i < direction.size(); ++i) g(t, i) += direction[i];
  }
};

template <class T>
FeatureObjective<T> feature_objective(const SaeParams& sae, std::uint32_t feature, Positions p = Positions::Text) {
  if (feature >= sae.f()) throw DimensionError("feature " + std::to_string(feature) + " out of range");
  std::vector<T> d(sae.d());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(sae.w_dec(i, feature));
  return FeatureObjective<T>(sae.layer, std::move(d), p);
}

// ---------------------------------------------------------------------------
// Runs, corruption and scores

struct AttributionOptions {
  bool include_v = false;
  Positions score_positions = Positions::All;
};

inline std::vector<Site> head_sites(std::uint32_t l, std::uint32_t h, bool include_v) {
  std::vector<Site> s{Site::query(l, h), Site::key(l, h)};
  if (include_v) s.push_back(Site::value(l, h));
  return s;
}

inline std::vector<Site> attribution_sites(const toy::ModelConfig& c, bool include_v) {
  std::vector<Site> out;
  for (std::uint32_t l = 0; l < c.n_layers; ++l)
    for (std::uint32_t h = 0; h < c.n_heads; ++h)
      for (const auto& s : head_sites(l, h, include_v)) out.push_back(s);
  return out;
}

// A forward pass plus objective gradients at every head site.
template <class T>
struct Run {
  Tape<T> tape;
  toy::SiteGrads<T> grads;
  T objective = 0;
};

template <class T>
Run<T> run_with_grads(const ModelParams<T>& p, const ModelInput& in, const toy::Objective<T>& obj,
                      const Hooks<T>& hooks, bool include_v) {
  Run<T> r;
  r.tape = toy::forward(p, in, hooks);
  r.objective = obj.value(r.tape);
  r.grads = toy::backward(p, r.tape, obj, attribution_sites(p.config, include_v), hooks);
  return r;
}

// Layer-0 visual rows moved toward the mean embedding:
// clean + α·(mean − clean). α = 1 replaces them outright.
template <class T>
toy::SitePatch<T> corruption(const Matrix<T>& clean_embed, const Matrix<T>& mean_visual, double alpha = 1.0) {
  require_dims(mean_visual.rows() <= clean_embed.rows() && mean_visual.cols() == clean_embed.cols(),
               "corruption: mean embedding shape does not fit the sample");
  Matrix<T> v = clean_embed;
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < mean_visual.rows(); ++t) {
    rows.push_back(t);
    for (std::size_t i = 0; i < v.cols(); ++i)
      v(t, i) = static_cast<T>(clean_embed(t, i) + alpha * (double(mean_visual(t, i)) - double(clean_embed(t, i))));
  }
  toy::SitePatch<T> patch;
  patch.set(Site::embedding(), std::move(v), std::move(rows));
  return patch;
}

// Σ over rows and coordinates of (other − base)·grad for one site.
template <class T>
double site_score(const Matrix<T>& base, const Matrix<T>& other, const Matrix<T>& grad,
                  const std::vector<std::size_t>& rows, std::vector<double>* per_row = nullptr) {
  require_dims(base.rows() == other.rows() && base.cols() == other.cols() && grad.rows() == base.rows() &&
                   grad.cols() == base.cols(),
               "attribution: site mismatch between runs");
  double acc = 0;
  for (auto r : rows) {
    double rs = 0;
    for (std::size_t c = 0; c < base.cols(); ++c) rs += (double(other(r, c)) - double(base(r, c))) * double(grad(r, c));
    if (per_row) (*per_row)[r] += rs;
    acc += rs;
  }
  return acc;
}

enum class Method { A, B };

struct HeadScores {
  Matrix<double> scores;               // [n_layers × n_heads]
  Matrix<double> per_position;         // [(layer·n_heads + head) × n_tokens]
};

// Method A uses the clean run's gradients, Method B the corrupt run's.
template <class T>
HeadScores attribution(const Run<T>& clean, const Run<T>& corrupt, Method m, const toy::ModelConfig& c,
                       const AttributionOptions& opt = {}) {
  const Run<T>& base = m == Method::A ? clean : corrupt;
  const Run<T>& other = m == Method::A ? corrupt : clean;
  if (clean.tape.n_tokens != corrupt.tape.n_tokens || clean.tape.n_visual != corrupt.tape.n_visual)
    throw DimensionError("attribution: runs cover different sequences");
  const auto rows = position_rows(base.tape.n_visual, base.tape.n_tokens, opt.score_positions);
  HeadScores out{Matrix<double>(c.n_layers, c.n_heads), Matrix<double>(c.n_layers * c.n_heads, base.tape.n_tokens)};
  for (std::uint32_t l = 0; l < c.n_layers; ++l)
    for (std::uint32_t h = 0; h < c.n_heads; ++h) {
      std::vector<double> per_row(base.tape.n_tokens, 0.0);
      double s = 0;
      for (const auto& site : head_sites(l, h, opt.include_v)) {
        auto g = base.grads.find(site);
        if (g == base.grads.end()) throw UnknownSiteError("attribution: no gradient for site " + site.str());
        s += site_score(base.tape.site(site), other.tape.site(site), g->second, rows, &per_row);
      }
      out.scores(l, h) = s;
      for (std::size_t t = 0; t < per_row.size(); ++t) out.per_position(l * c.n_heads + h, t) = per_row[t];
    }
  return out;
}

// Re-runs `in` under `base_hooks` with `sites` (restricted to `rows`, empty =
// all) replaced by their values in `source`; returns objective(patched) −
// objective(unpatched).
template <class T>
double exact_patch(const ModelParams<T>& p, const ModelInput& in, const Hooks<T>& base_hooks,
                   const Tape<T>& source, const std::vector<Site>& sites, const toy::Objective<T>& obj,
                   const std::vector<std::size_t>& rows = {}) {
  for (const auto& s : sites) toy::check_site(p.config, s);
  const double before = obj.value(toy::forward(p, in, base_hooks));
  toy::SitePatch<T> patch;
  for (const auto& s : sites) patch.set(s, source.site(s), rows);
  Hooks<T> hooks = base_hooks;
  hooks.push_back(&patch);
  return double(obj.value(toy::forward(p, in, hooks))) - before;
}

// Exact per-head effects matching the method's direction: A patches corrupt
// values into the clean run, B patches clean values into the corrupt run.
template <class T>
Matrix<double> exact_head_effects(const ModelParams<T>& p, const ModelInput& in, const toy::SitePatch<T>& corrupt_hook,
                                  const Run<T>& clean, const Run<T>& corrupt, Method m, const toy::Objective<T>& obj,
                                  const AttributionOptions& opt = {}) {
  const auto& c = p.config;
  Hooks<T> base_hooks;
  if (m == Method::B) base_hooks.push_back(&corrupt_hook);
  const Tape<T>& source = m == Method::A ? corrupt.tape : clean.tape;
  std::vector<std::size_t> rows;
  if (opt.score_positions != Positions::All) rows = position_rows(clean.tape.n_visual, clean.tape.n_tokens, opt.score_positions);
  Matrix<double> out(c.n_layers, c.n_heads);
  for (std::uint32_t l = 0; l < c.n_layers; ++l)
    for (std::uint32_t h = 0; h < c.n_heads; ++h)
      out(l, h) = exact_patch(p, in, base_hooks, source, head_sites(l, h, opt.include_v), obj, rows);
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample attribution and aggregation

struct SampleAttribution {
  std::string sample_id;
  double clean_objective = 0, corrupt_objective = 0;
  HeadScores a, b;
  std::optional<Matrix<double>> exact_a, exact_b;
  std::size_t n_visual = 0;
};

struct AttributionConfig {
  std::size_t top_k_samples = 10;
  std::size_t top_heads = 3;
  AttributionOptions options;
  Positions objective_positions = Positions::Text;
  bool exact = true;  // also run the per-head patching oracle
};

template <class T>
SampleAttribution attribute_sample(const ModelParams<T>& p, const toy::Objective<T>& obj,
                                   const toy::TaskSample& s, const Matrix<T>& mean_visual,
                                   const AttributionConfig& cfg) {
  const auto in = s.input();
  const Hooks<T> none;
  const auto clean = run_with_grads(p, in, obj, none, cfg.options.include_v);
  const auto hook = corruption(clean.tape.embed, mean_visual, 1.0);
  const auto corrupt = run_with_grads(p, in, obj, Hooks<T>{&hook}, cfg.options.include_v);
  SampleAttribution out;
  out.sample_id = s.sample_id;
  out.n_visual = clean.tape.n_visual;
  out.clean_objective = clean.objective;
  out.corrupt_objective = corrupt.objective;
  out.a = attribution(clean, corrupt, Method::A, p.config, cfg.options);
  out.b = attribution(clean, corrupt, Method::B, p.config, cfg.options);
  if (cfg.exact) {
    out.exact_a = exact_head_effects(p, in, hook, clean, corrupt, Method::A, obj, cfg.options);
    out.exact_b = exact_head_effects(p, in, hook, clean, corrupt, Method::B, obj, cfg.options);
  }
  return out;
}

struct AttributionReport {
  FeatureId feature;
  std::size_t n_samples = 0;
  std::vector<std::string> sample_ids;
  AttributionOptions options;
  Positions objective_positions = Positions::Text;
  Matrix<double> method_a, method_b;  // mean per-head scores [n_layers × n_heads]
  std::vector<double> layer_a, layer_b;
  std::vector<std::string> top_a, bottom_a, top_b, bottom_b;
  std::set<std::string> overlap;
  std::optional<Matrix<double>> exact_a, exact_b;
  std::optional<double> spearman_a, spearman_b;
  Matrix<double> visual_map_a, visual_map_b;  // mean per-head score on each visual row [(l·H + h) × n_visual]
};

namespace detail {

inline std::vector<std::string> ranked_heads(const Matrix<double>& m, std::size_t k, bool descending) {
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  for (std::size_t l = 0; l < m.rows(); ++l)
    for (std::size_t h = 0; h < m.cols(); ++h) idx.push_back({l, h});
  std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) {
    const double a = m(x.first, x.second), b = m(y.first, y.second);
    return descending ? a > b : a < b;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(k, idx.size()); ++i) out.push_back(head_name(idx[i].first, idx[i].second));
  return out;
}

inline std::vector<double> flat(const Matrix<double>& m) { return {m.flat().begin(), m.flat().end()}; }

}  // namespace detail

inline std::vector<double> layer_curve(const Matrix<double>& heads) {
  std::vector<double> out(heads.rows(), 0.0);
  for (std::size_t l = 0; l < heads.rows(); ++l)
    for (std::size_t h = 0; h < heads.cols(); ++h) out[l] += heads(l, h);
  return out;
}

inline AttributionReport aggregate_attribution(const FeatureId& feature, std::span<const SampleAttribution> samples,
                                               const AttributionConfig& cfg = {}) {
  if (samples.empty()) throw EmptyInputError("aggregate_attribution: no samples");
  const std::size_t L = samples[0].a.scores.rows(), H = samples[0].a.scores.cols(), NV = samples[0].n_visual;
  AttributionReport r;
  r.feature = feature;
  r.n_samples = samples.size();
  r.options = cfg.options;
  r.objective_positions = cfg.objective_positions;
  r.method_a = Matrix<double>(L, H);
  r.method_b = Matrix<double>(L, H);
  r.visual_map_a = Matrix<double>(L * H, NV);
  r.visual_map_b = Matrix<double>(L * H, NV);
  const bool exact = std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.exact_a.has_value(); });
  if (exact) {
    r.exact_a = Matrix<double>(L, H);
    r.exact_b = Matrix<double>(L, H);
  }
  const double n = double(samples.size());
  for (const auto& s : samples) {
    require_dims(s.a.scores.rows() == L && s.a.scores.cols() == H && s.n_visual == NV,
                 "aggregate_attribution: samples from different models");
    r.sample_ids.push_back(s.sample_id);
    for (std::size_t i = 0; i < L * H; ++i) {
      r.method_a.flat()[i] += s.a.scores.flat()[i] / n;
      r.method_b.flat()[i] += s.b.scores.flat()[i] / n;
      if (exact) {
        r.exact_a->flat()[i] += s.exact_a->flat()[i] / n;
        r.exact_b->flat()[i] += s.exact_b->flat()[i] / n;
      }
      for (std::size_t t = 0; t < NV; ++t) {
        r.visual_map_a(i, t) += s.a.per_position(i, t) / n;
        r.visual_map_b(i, t) += s.b.per_position(i, t) / n;
      }
    }
  }
  r.layer_a = layer_curve(r.method_a);
  r.layer_b = layer_curve(r.method_b);
  r.top_a = detail::ranked_heads(r.method_a, cfg.top_heads, true);
  r.bottom_a = detail::ranked_heads(r.method_a, cfg.top_heads, false);
  r.top_b = detail::ranked_heads(r.method_b, cfg.top_heads, true);
  r.bottom_b = detail::ranked_heads(r.method_b, cfg.top_heads, false);
  for (const auto& h : r.top_a)
    if (std::find(r.top_b.begin(), r.top_b.end(), h) != r.top_b.end()) r.overlap.insert(h);
  if (exact) {
    const auto ea = detail::flat(*r.exact_a), eb = detail::flat(*r.exact_b);
    const auto sa = detail::flat(r.method_a), sb = detail::flat(r.method_b);
    r.spearman_a = stats::spearman(sa, ea);
    r.spearman_b = stats::spearman(sb, eb);
  }
  return r;
}

// Top-k samples for a feature by max activation, drawn only from `samples`
// (the task samples that produced the cache, or a split of them).
inline std::vector<toy::TaskSample> top_task_samples(const CodeCache& cache, std::uint32_t feature,
                                                     std::span<const toy::TaskSample> samples, std::size_t k,
                                                     MaskRegime regime = MaskRegime::TextOnly) {
  std::map<std::string, const toy::TaskSample*> by_id;
  std::set<std::string> pool;
  for (const auto& s : samples) {
    by_id[s.sample_id] = &s;
    pool.insert(s.sample_id);
  }
  std::vector<toy::TaskSample> out;
  for (const auto& sa : top_samples(cache, feature, k, regime, &pool)) out.push_back(*by_id.at(sa.sample_id));
  return out;
}

template <class T>
AttributionReport attribute_feature(const ModelParams<T>& p, const SaeParams& sae, std::uint32_t feature,
                                    std::span<const toy::TaskSample> top, const Matrix<T>& mean_visual,
                                    const AttributionConfig& cfg = {}) {
  if (top.empty()) throw EmptyInputError("attribution for " + FeatureId{sae.layer, feature}.str() + ": no samples");
  const auto obj = feature_objective<T>(sae, feature, cfg.objective_positions);
  std::vector<SampleAttribution> per;
  for (std::size_t i = 0; i < std::min(cfg.top_k_samples, top.size()); ++i)
    per.push_back(attribute_sample(p, obj, top[i], mean_visual, cfg));
  return aggregate_attribution({sae.layer, feature}, per, cfg);
}

// ---------------------------------------------------------------------------
// Exports

inline nlohmann::json matrix_json(const Matrix<double>& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

inline nlohmann::json to_json(const AttributionReport& r) {
  nlohmann::json j{{"feature_id", r.feature.str()},
                   {"layer", r.feature.layer},
                   {"index", r.feature.index},
                   {"n_samples", r.n_samples},
                   {"sample_ids", r.sample_ids},
                   {"sites", r.options.include_v ? "qkv" : "qk"},
                   {"score_positions", to_string(r.options.score_positions)},
                   {"objective_positions", to_string(r.objective_positions)},
                   {"method_a", matrix_json(r.method_a)},
                   {"method_b", matrix_json(r.method_b)},
                   {"layer_a", r.layer_a},
                   {"layer_b", r.layer_b},
                   {"top_a", r.top_a},
                   {"bottom_a", r.bottom_a},
                   {"top_b", r.top_b},
                   {"bottom_b", r.bottom_b},
                   {"overlap", std::vector<std::string>(r.overlap.begin(), r.overlap.end())}};
  j["exact_a"] = r.exact_a ? matrix_json(*r.exact_a) : nlohmann::json(nullptr);
  j["exact_b"] = r.exact_b ? matrix_json(*r.exact_b) : nlohmann::json(nullptr);
  j["spearman_a"] = r.spearman_a ? nlohmann::json(*r.spearman_a) : nlohmann::json(nullptr);
  j["spearman_b"] = r.spearman_b ? nlohmann::json(*r.spearman_b) : nlohmann::json(nullptr);
  return j;
}

// "Overlap: L1H0, L1H3"
inline std::string overlap_label(const std::set<std::string>& heads) {
  std::string s = "Overlap: ";
  bool first = true;
  for (const auto& h : heads) {
    s += (first ? "" : ", ") + h;
    first = false;
  }
  return s;
}

// [n_layers × n_heads] with a leading layer column.
inline std::string head_scores_csv(const Matrix<double>& m) {
  std::vector<std::string> header{"layer"};
  for (std::size_t h = 0; h < m.cols(); ++h) header.push_back("H" + std::to_string(h));
  csv::Table t(header);
  for (std::size_t l = 0; l < m.rows(); ++l) {
    std::vector<std::string> row{std::to_string(l)};
    for (std::size_t h = 0; h < m.cols(); ++h) row.push_back(csv::num(m(l, h)));
    t.add(row);
  }
  return t.str();
}

// Attention from `query_row` (default: final token) to each visual position,
// laid out as the grid×grid image.
template <class T>
std::string attention_grid_csv(const Tape<T>& tp, std::size_t layer, std::size_t head, std::size_t grid,
                               std::optional<std::size_t> query_row = std::nullopt) {
  if (grid * grid != tp.n_visual)
    throw DimensionError("attention grid: " + std::to_string(grid) + "² != " + std::to_string(tp.n_visual) +
                         " visual tokens");
  const auto row = tp.attention(layer, head, query_row.value_or(tp.n_tokens - 1));
  std::vector<std::string> header;
  for (std::size_t c = 0; c < grid; ++c) header.push_back("col" + std::to_string(c));
  csv::Table t(header);
  for (std::size_t r = 0; r < grid; ++r) {
    std::vector<std::string> cells;
    for (std::size_t c = 0; c < grid; ++c) cells.push_back(csv::num(double(row[r * grid + c])));
    t.add(cells);
  }
  return t.str();
}

// ---------------------------------------------------------------------------
// Ablation

template <class T>
toy::DirectionAblation<T> feature_ablation(const SaeParams& sae, std::uint32_t feature, std::size_t n_visual) {
  if (feature >= sae.f()) throw DimensionError("feature " + std::to_string(feature) + " out of range");
  std::vector<T> v(sae.d());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(sae.w_dec(i, feature));
  return toy::DirectionAblation<T>::from_row(Site::resid(sae.layer), std::move(v), n_visual);
}

struct AblationConfig {
  std::size_t n_controls = 5;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct AblationReport {
  FeatureId feature;
  std::string relation;
  double delta_task_acc = 0;      // fractions, ablated − clean
  double delta_task_prob = 0;
  double delta_general_acc = 0;
  double delta_ctrl = 0;
  std::vector<double> delta_ctrl_by_seed;
  std::vector<std::vector<FeatureId>> controls_by_seed;
  double odds_ratio = 0;
  std::size_t n_task = 0, n_general = 0;
  std::vector<std::uint64_t> seeds;
  double clean_task_acc = 0, clean_general_acc = 0;
};

// Relation kind most common among a feature's top samples (existence
// questions ignored; ties go to the alphabetically first kind).
inline std::optional<std::string> dominant_relation(std::span<const toy::TaskSample> top) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : top)
    if (s.kind != "exists" && s.kind != "neutral") ++counts[s.kind];
  std::optional<std::string> best;
  std::size_t n = 0;
  for (const auto& [k, c] : counts)
    if (c > n) best = k, n = c;
  return best;
}

// Same-layer features with E_v > 0, excluding `feature`, drawn without
// replacement.
inline std::vector<FeatureId> draw_controls(const FeatureId& feature, std::span<const double> e_v, std::size_t n,
                                            std::uint64_t seed) {
  std::vector<std::uint32_t> pool;
  for (std::uint32_t g = 0; g < e_v.size(); ++g)
    if (g != feature.index && e_v[g] > 0) pool.push_back(g);
  if (pool.empty()) throw EmptyInputError("ablation controls: no same-layer feature with E_v > 0");
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(n, pool.size()));
  std::sort(pool.begin(), pool.end());
  std::vector<FeatureId> out;
  for (auto g : pool) out.push_back({feature.layer, g});
  return out;
}

inline AblationReport ablation_eval(const ModelParams<float>& p, const SaeParams& sae, std::uint32_t feature,
                                    const std::string& relation, std::span<const toy::TaskSample> task_subset,
                                    std::span<const toy::TaskSample> general_set, std::span<const double> e_v,
                                    double odds_ratio, toy::AnswerIds ids, const AblationConfig& cfg = {}) {
  if (task_subset.empty()) throw EmptyInputError("ablation: empty relation subset '" + relation + "'");
  if (general_set.empty()) throw EmptyInputError("ablation: empty general set");
  if (e_v.size() != sae.f()) throw DimensionError("ablation: E_v has " + std::to_string(e_v.size()) + " entries");
  if (cfg.seeds.empty()) throw ConfigError("ablation: at least one seed required");
  const std::size_t nv = p.config.n_visual_tokens;
  AblationReport r;
  r.feature = {sae.layer, feature};
  r.relation = relation;
  r.odds_ratio = odds_ratio;
  r.n_task = task_subset.size();
  r.n_general = general_set.size();
  r.seeds = cfg.seeds;

  const auto clean_task = toy::evaluate(p, task_subset, ids);
  const auto clean_gen = toy::evaluate(p, general_set, ids);
  r.clean_task_acc = clean_task.accuracy;
  r.clean_general_acc = clean_gen.accuracy;
  const auto ab = feature_ablation<float>(sae, feature, nv);
  const auto abl_task = toy::evaluate(p, task_subset, ids, {&ab});
  const auto abl_gen = toy::evaluate(p, general_set, ids, {&ab});
  r.delta_task_acc = abl_task.accuracy - clean_task.accuracy;
  r.delta_task_prob = abl_task.mean_p_correct - clean_task.mean_p_correct;
  r.delta_general_acc = abl_gen.accuracy - clean_gen.accuracy;

  for (auto seed : cfg.seeds) {
    const auto controls = draw_controls(r.feature, e_v, cfg.n_controls, seed);
    double sum = 0;
    for (const auto& c : controls) {
      const auto hook = feature_ablation<float>(sae, c.index, nv);
      sum += toy::evaluate(p, task_subset, ids, {&hook}).accuracy - clean_task.accuracy;
    }
    r.delta_ctrl_by_seed.push_back(sum / double(controls.size()));
    r.controls_by_seed.push_back(controls);
  }
  double s = 0;
  for (double d : r.delta_ctrl_by_seed) s += d;
  r.delta_ctrl = s / double(r.delta_ctrl_by_seed.size());
  return r;
}

inline nlohmann::json to_json(const AblationReport& r) {
  nlohmann::json controls = nlohmann::json::array();
  for (const auto& cs : r.controls_by_seed) {
    std::vector<std::string> ids;
    for (const auto& c : cs) ids.push_back(c.str());
    controls.push_back(ids);
  }
  return {{"feature_id", r.feature.str()},
          {"layer", r.feature.layer},
          {"index", r.feature.index},
          {"relation", r.relation},
          {"units", "fraction"},
          {"delta_task_acc", r.delta_task_acc},
          {"delta_task_prob", r.delta_task_prob},
          {"delta_general_acc", r.delta_general_acc},
          {"delta_ctrl", r.delta_ctrl},
          {"delta_ctrl_by_seed", r.delta_ctrl_by_seed},
          {"controls_by_seed", controls},
          {"odds_ratio", r.odds_ratio},
          {"clean_task_acc", r.clean_task_acc},
          {"clean_general_acc", r.clean_general_acc},
          {"n_task", r.n_task},
          {"n_general", r.n_general},
          {"seeds", r.seeds}};
}

// One row per feature: layer, feature, ΔAcc, ΔProb, ΔGeneral, ΔCtrl, OR,
// relation (deltas as fractions).
inline std::string ablation_table_csv(std::span<const AblationReport> rows) {
  csv::Table t({"layer", "feature", "delta_acc", "delta_prob", "delta_general", "delta_ctrl", "odds_ratio",
                "relation"});
  for (const auto& r : rows)
    t.add({std::to_string(r.feature.layer), r.feature.str(), csv::num(r.delta_task_acc), csv::num(r.delta_task_prob),
           csv::num(r.delta_general_acc), csv::num(r.delta_ctrl), csv::num(r.odds_ratio), r.relation});
  return t.str();
}

}  // namespace saediff::causal
