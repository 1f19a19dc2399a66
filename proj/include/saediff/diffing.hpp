// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Stage-wise dictionary comparison: decoder cosine between aligned base and
// adapted dictionaries, visual energy, and adapted-feature selection.

#pragma once

#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "saediff/code_cache.hpp"
#include "saediff/core/csv.hpp"
#include "saediff/core/stats.hpp"
#include "saediff/sae.hpp"

namespace saediff {

// Selection flags. The setters keep selected ⇒ lexically_robust ⇒
// shift_candidate and selected ⇒ adapted; clearing a flag clears the flags
// that depend on it.
class FeatureFlags {
 public:
  bool adapted() const { return adapted_; }
  bool shift_candidate() const { return candidate_; }
  bool lexically_robust() const { return robust_; }
  bool selected() const { return selected_; }

  void set_adapted(bool v) {
    adapted_ = v;
    if (!v) selected_ = false;
  }
  void set_shift_candidate(bool v) {
    candidate_ = v;
    if (!v) robust_ = selected_ = false;
  }
  void set_lexically_robust(bool v) {
    if (v && !candidate_) throw InvariantError("flags: lexically_robust requires shift_candidate");
    robust_ = v;
    if (!v) selected_ = false;
  }
  void set_selected(bool v) {
    if (v && !(robust_ && adapted_)) throw InvariantError("flags: selected requires adapted and lexically_robust");
    selected_ = v;
  }

  std::string str() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += '|';
      s += name;
    };
    add(adapted_, "adapted");
    add(candidate_, "shift_candidate");
    add(robust_, "lexically_robust");
    add(selected_, "selected");
    return s;
  }

 private:
  bool adapted_ = false, candidate_ = false, robust_ = false, selected_ = false;
};

struct FeatureStats {
  FeatureId id;
  double c_f = 0;
  bool zero_norm = false;
  double e_v = 0;
  std::map<std::string, double> p_by_split;
  double delta_p = 0;
  double odds_ratio = 1;
  FeatureFlags flags;
};

using FeatureTable = std::vector<FeatureStats>;

// ---------------------------------------------------------------------------

struct DecoderCosine {
  std::vector<double> c;
  std::vector<bool> zero_norm;
};

// Cosine between decoder column f of two index-aligned dictionaries.
inline DecoderCosine decoder_cosine(const SaeParams& base, const SaeParams& adapted) {
  if (base.d() != adapted.d() || base.f() != adapted.f())
    throw DimensionError("decoder_cosine: dictionaries differ in shape (" + std::to_string(base.d()) + "x" +
                         std::to_string(base.f()) + " vs " + std::to_string(adapted.d()) + "x" +
                         std::to_string(adapted.f()) + ")");
  const std::size_t D = base.d(), F = base.f();
  DecoderCosine out{std::vector<double>(F, 0.0), std::vector<bool>(F, false)};
  for (std::size_t f = 0; f < F; ++f) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < D; ++i) {
      const double a = base.w_dec(i, f), b = adapted.w_dec(i, f);
      d += a * b;
      na += a * a;
      nb += b * b;
    }
    if (na == 0 || nb == 0) {
      out.zero_norm[f] = true;
      continue;
    }
    out.c[f] = std::clamp(d / std::sqrt(na * nb), -1.0, 1.0);
  }
  return out;
}

// E_v(f): mean of h_f² over the token positions `mask` selects.
inline std::vector<double> visual_energy(const CodeCache& cache, MaskRegime mask = MaskRegime::TextOnly) {
  std::vector<double> e(cache.n_features, 0.0);
  std::uint64_t n = 0;
  for (const auto& s : cache.samples)
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      if (!regime_selects(s.visual, mask, t)) continue;
      ++n;
      const auto& c = s.tokens[t];
      for (std::size_t j = 0; j < c.nnz(); ++j) e[c.index[j]] += double(c.value[j]) * c.value[j];
    }
  if (n == 0) throw EmptyInputError("visual_energy: mask selects no tokens");
  for (auto& v : e) v /= static_cast<double>(n);
  return e;
}

inline std::vector<double> visual_energy(const SaeParams& sae, std::span<const ActivationShard> shards,
                                         MaskRegime mask = MaskRegime::TextOnly) {
  return visual_energy(build_code_cache(sae, shards), mask);
}

// Fills a table for one layer from the cosine and energy vectors.
inline FeatureTable make_feature_table(std::uint32_t layer, const DecoderCosine& cos, std::span<const double> e_v) {
  if (cos.c.size() != e_v.size()) throw DimensionError("feature table: cosine and energy sizes differ");
  FeatureTable t(cos.c.size());
  for (std::size_t f = 0; f < t.size(); ++f) {
    t[f].id = {layer, static_cast<std::uint32_t>(f)};
    t[f].c_f = cos.c[f];
    t[f].zero_norm = cos.zero_norm[f];
    t[f].e_v = e_v[f];
  }
  return t;
}

// ---------------------------------------------------------------------------

enum class PercentileScope { Global, PerLayer };

// E_v > eps and c_f strictly below the p_cos quantile of the pool (zero-norm
// columns excluded). Pure: flags are not touched.
inline std::set<FeatureId> adapted_set(const FeatureTable& table, double eps, double p_cos,
                                       PercentileScope scope = PercentileScope::Global) {
  std::map<std::uint32_t, std::vector<double>> pools;
  for (const auto& s : table) {
    if (s.zero_norm) continue;
    pools[scope == PercentileScope::Global ? 0u : s.id.layer].push_back(s.c_f);
  }
  std::map<std::uint32_t, double> cut;
  for (auto& [key, pool] : pools) cut[key] = stats::quantile(pool, p_cos);
  std::set<FeatureId> out;
  for (const auto& s : table) {
    if (s.zero_norm) continue;
    const double q = cut[scope == PercentileScope::Global ? 0u : s.id.layer];
    if (s.e_v > eps && s.c_f < q) out.insert(s.id);
  }
  return out;
}

inline std::set<FeatureId> select_adapted(FeatureTable& table, double eps = 1e-3, double p_cos = 0.25,
                                          PercentileScope scope = PercentileScope::Global) {
  auto sel = adapted_set(table, eps, p_cos, scope);
  for (auto& s : table) s.flags.set_adapted(sel.count(s.id) > 0);
  return sel;
}

// ---------------------------------------------------------------------------

struct SweepPoint {
  double eps = 0, p_cos = 0;
  std::size_t count = 0;
  double jaccard = 0;
  std::optional<double> layer_correlation;  // Pearson of per-layer counts vs baseline
};

inline std::map<std::uint32_t, double> per_layer_counts(const FeatureTable& table, const std::set<FeatureId>& sel) {
  std::map<std::uint32_t, double> c;
  for (const auto& s : table) c.try_emplace(s.id.layer, 0.0);
  for (const auto& id : sel) c[id.layer] += 1;
  return c;
}

inline std::vector<SweepPoint> threshold_sweep(const FeatureTable& table, std::span<const double> eps_grid,
                                               std::span<const double> p_grid, double base_eps, double base_p,
                                               PercentileScope scope = PercentileScope::Global) {
  const auto baseline = adapted_set(table, base_eps, base_p, scope);
  std::vector<double> base_counts;
  for (const auto& [_, c] : per_layer_counts(table, baseline)) base_counts.push_back(c);
  std::vector<SweepPoint> out;
  for (double p : p_grid)
    for (double e : eps_grid) {
      const auto sel = adapted_set(table, e, p, scope);
      std::vector<double> counts;
      for (const auto& [_, c] : per_layer_counts(table, sel)) counts.push_back(c);
      out.push_back({e, p, sel.size(), stats::jaccard(sel, baseline), stats::pearson(counts, base_counts)});
    }
  return out;
}

inline std::string sweep_csv(std::span<const SweepPoint> pts) {
  csv::Table t({"eps", "p_cos", "count", "jaccard", "layer_correlation"});
  for (const auto& p : pts)
    t.add({csv::num(p.eps), csv::num(p.p_cos), std::to_string(p.count), csv::num(p.jaccard),
           csv::num(p.layer_correlation)});
  return t.str();
}

// ---------------------------------------------------------------------------

struct LayerStat {
  std::uint32_t layer = 0;
  std::size_t n_features = 0;
  std::size_t adapted_count = 0;
  std::optional<double> mean_c_adapted;  // absent when nothing is adapted
  double mean_c_all = 0;
};

inline std::vector<LayerStat> layer_stats(const FeatureTable& table) {
  std::map<std::uint32_t, LayerStat> by;
  std::map<std::uint32_t, double> sum_all, sum_adapted;
  std::map<std::uint32_t, std::size_t> n_pool;
  for (const auto& s : table) {
    auto& ls = by[s.id.layer];
    ls.layer = s.id.layer;
    ++ls.n_features;
    if (s.zero_norm) continue;
    sum_all[s.id.layer] += s.c_f;
    ++n_pool[s.id.layer];
    if (s.flags.adapted()) {
      ++ls.adapted_count;
      sum_adapted[s.id.layer] += s.c_f;
    }
  }
  std::vector<LayerStat> out;
  for (auto& [layer, ls] : by) {
    if (n_pool[layer]) ls.mean_c_all = sum_all[layer] / static_cast<double>(n_pool[layer]);
    if (ls.adapted_count) ls.mean_c_adapted = sum_adapted[layer] / static_cast<double>(ls.adapted_count);
    out.push_back(ls);
  }
  return out;
}

inline std::string layer_stats_csv(std::span<const LayerStat> rows) {
  csv::Table t({"layer", "n_features", "adapted_count", "mean_c_adapted", "mean_c_all"});
  for (const auto& r : rows)
    t.add({std::to_string(r.layer), std::to_string(r.n_features), std::to_string(r.adapted_count),
           csv::num(r.mean_c_adapted), csv::num(r.mean_c_all)});
  return t.str();
}

// ---------------------------------------------------------------------------
// Exports: one row per feature, plot-ready (c_f vs E_v scatter).

inline std::vector<std::string> split_names(const FeatureTable& table) {
  std::set<std::string> names;
  for (const auto& s : table)
    for (const auto& [k, _] : s.p_by_split) names.insert(k);
  return {names.begin(), names.end()};
}

inline std::string feature_table_csv(const FeatureTable& table) {
  const auto splits = split_names(table);
  std::vector<std::string> header{"layer", "index", "c_f", "E_v"};
  for (const auto& s : splits) header.push_back("p_" + s);
  for (const char* h : {"delta_p", "odds_ratio", "zero_norm", "flags"}) header.push_back(h);
  csv::Table t(header);
  for (const auto& s : table) {
    std::vector<std::string> r{std::to_string(s.id.layer), std::to_string(s.id.index), csv::num(s.c_f),
                               csv::num(s.e_v)};
    for (const auto& name : splits) {
      const auto it = s.p_by_split.find(name);
      r.push_back(it == s.p_by_split.end() ? "" : csv::num(it->second));
    }
    r.push_back(csv::num(s.delta_p));
    r.push_back(csv::num(s.odds_ratio));
    r.push_back(s.zero_norm ? "1" : "0");
    r.push_back(s.flags.str());
    t.add(r);
  }
  return t.str();
}

inline nlohmann::json to_json(const FeatureStats& s) {
  return {{"feature_id", s.id.str()},
          {"layer", s.id.layer},
          {"index", s.id.index},
          {"c_f", s.c_f},
          {"E_v", s.e_v},
          {"zero_norm", s.zero_norm},
          {"p_by_split", s.p_by_split},
          {"delta_p", s.delta_p},
          {"odds_ratio", s.odds_ratio},
          {"flags",
           {{"adapted", s.flags.adapted()},
            {"shift_candidate", s.flags.shift_candidate()},
            {"lexically_robust", s.flags.lexically_robust()},
            {"selected", s.flags.selected()}}}};
}

inline nlohmann::json feature_table_json(const FeatureTable& table) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : table) arr.push_back(to_json(s));
  return arr;
}

inline FeatureTable feature_table_from_json(const nlohmann::json& arr) {
  FeatureTable t;
  for (const auto& j : arr) {
    FeatureStats s;
    s.id = {j.at("layer").get<std::uint32_t>(), j.at("index").get<std::uint32_t>()};
    s.c_f = j.at("c_f").get<double>();
    s.e_v = j.at("E_v").get<double>();
    s.zero_norm = j.value("zero_norm", false);
    s.p_by_split = j.value("p_by_split", std::map<std::string, double>{});
    s.delta_p = j.value("delta_p", 0.0);
    s.odds_ratio = j.value("odds_ratio", 1.0);
    const auto& fl = j.at("flags");
    s.flags.set_adapted(fl.value("adapted", false));
    s.flags.set_shift_candidate(fl.value("shift_candidate", false));
    s.flags.set_lexically_robust(fl.value("lexically_robust", false));
    s.flags.set_selected(fl.value("selected", false));
    t.push_back(std::move(s));
  }
  return t;
}

}  // namespace saediff
