// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Firing-frequency shift between a base split and a spatial split, with a
// lexical-robustness check against neutral-prompt re-runs.

#pragma once

#include <algorithm>
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
#include "saediff/diffing.hpp"

namespace saediff {

struct FiringCounts {
  std::vector<std::uint64_t> fires;  // tokens where h_f > 0, per feature
  std::uint64_t n_tokens = 0;

  double p(std::size_t f) const { return static_cast<double>(fires[f]) / static_cast<double>(n_tokens); }
};

// Counts over samples in `ids` (every sample when null) and tokens that
// `regime` selects.
inline FiringCounts firing_counts(const CodeCache& cache, MaskRegime regime,
                                  const std::set<std::string>* ids = nullptr) {
  FiringCounts c{std::vector<std::uint64_t>(cache.n_features, 0), 0};
  for (const auto& s : cache.samples) {
    if (ids && !ids->count(s.sample_id)) continue;
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      if (!regime_selects(s.visual, regime, t)) continue;
      ++c.n_tokens;
      const auto& code = s.tokens[t];
      for (std::size_t j = 0; j < code.nnz(); ++j)
        if (code.value[j] > 0.f) ++c.fires[code.index[j]];
    }
  }
  if (c.n_tokens == 0) throw EmptyInputError("firing_counts: no tokens selected");
  return c;
}

inline std::vector<double> firing_frequency(const CodeCache& cache, MaskRegime regime = MaskRegime::TextOnly,
                                            const std::set<std::string>* ids = nullptr) {
  const auto c = firing_counts(cache, regime, ids);
  std::vector<double> p(c.fires.size());
  for (std::size_t f = 0; f < p.size(); ++f) p[f] = c.p(f);
  return p;
}

inline std::vector<double> firing_frequency(const SaeParams& sae, std::span<const ActivationShard> split_shards,
                                            MaskRegime regime = MaskRegime::TextOnly) {
  return firing_frequency(build_code_cache(sae, split_shards), regime);
}

struct DeltaOr {
  double delta_p = 0;
  double odds_ratio = 1;
};

// Odds ratio with `s` added to each of the four 2×2 cells.
inline DeltaOr delta_and_or(std::uint64_t fires_base, std::uint64_t n_base, std::uint64_t fires_shift,
                            std::uint64_t n_shift, double s = 0.5) {
  if (n_base == 0 || n_shift == 0) throw EmptyInputError("delta_and_or: empty split");
  if (fires_base > n_base || fires_shift > n_shift) throw InvariantError("delta_and_or: fires exceed tokens");
  const double a = double(fires_shift), ns = double(n_shift), b = double(fires_base), nb = double(n_base);
  return {a / ns - b / nb, ((a + s) / (ns - a + s)) / ((b + s) / (nb - b + s))};
}

// Same statistic from frequencies, with the smoothing applied to the
// frequencies themselves.
inline DeltaOr delta_and_or(double p_base, double p_shift, double s) {
  return {p_shift - p_base, ((p_shift + s) / (1 - p_shift + s)) / ((p_base + s) / (1 - p_base + s))};
}

// ---------------------------------------------------------------------------

struct ShiftThresholds {
  double delta_p_min = 0.005;
  double or_min = 2.0;
  double rho = 0.25;
  double smoothing = 0.5;
};

enum class LexicalStatus { NotChecked, Robust, Dropped, Unverified };

inline std::string to_string(LexicalStatus s) {
  switch (s) {
    case LexicalStatus::Robust: return "robust";
    case LexicalStatus::Dropped: return "dropped";
    case LexicalStatus::Unverified: return "unverified";
    default: return "not_checked";
  }
}

struct ShiftRow {
  FeatureId id;
  std::uint64_t fires_base = 0, fires_shift = 0;
  double p_base = 0, p_shift = 0;
  DeltaOr stat;
  bool candidate = false;
  LexicalStatus lexical = LexicalStatus::NotChecked;
  double orig_freq = 0;
  std::optional<double> neutral_freq;
};

struct ShiftReport {
  std::string base_split, shift_split;
  std::uint32_t layer = 0;
  std::uint64_t n_base = 0, n_shift = 0;
  ShiftThresholds thresholds;
  std::vector<ShiftRow> rows;
};

inline ShiftReport compute_shift(const CodeCache& cache, const SplitResult& base, const SplitResult& shift,
                                 MaskRegime regime = MaskRegime::TextOnly, const ShiftThresholds& th = {}) {
  const auto cb = firing_counts(cache, regime, &base.sample_ids);
  const auto cs = firing_counts(cache, regime, &shift.sample_ids);
  ShiftReport r{base.name, shift.name, cache.layer, cb.n_tokens, cs.n_tokens, th, {}};
  r.rows.resize(cache.n_features);
  for (std::size_t f = 0; f < cache.n_features; ++f) {
    auto& row = r.rows[f];
    row.id = {cache.layer, static_cast<std::uint32_t>(f)};
    row.fires_base = cb.fires[f];
    row.fires_shift = cs.fires[f];
    row.p_base = cb.p(f);
    row.p_shift = cs.p(f);
    row.stat = delta_and_or(cb.fires[f], cb.n_tokens, cs.fires[f], cs.n_tokens, th.smoothing);
  }
  return r;
}

// Δp ≥ Δp_min and OR ≥ OR_min, and the feature must actually fire more
// often on the shift split (Δp > 0), so permissive bounds still only flag
// recruited features.
inline std::set<FeatureId> select_candidates(ShiftReport& r) {
  std::set<FeatureId> out;
  for (auto& row : r.rows) {
    row.candidate = row.stat.delta_p > 0 && row.stat.delta_p >= r.thresholds.delta_p_min &&
                    row.stat.odds_ratio >= r.thresholds.or_min;
    if (row.candidate) out.insert(row.id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lexical filter. Neutral re-runs carry the tag "neutral_of:<sample_id>" of
// the sample they rephrase.

inline constexpr char kNeutralTagPrefix[] = "neutral_of:";

inline std::optional<std::string> neutral_source(const CodedSample& s) {
  for (const auto& t : s.split_tags)
    if (t.rfind(kNeutralTagPrefix, 0) == 0) return t.substr(std::char_traits<char>::length(kNeutralTagPrefix));
  return std::nullopt;
}

struct LexicalConfig {
  std::size_t top_k = 20;
  MaskRegime regime = MaskRegime::TextOnly;
  std::optional<std::set<std::string>> pool;  // where top samples are drawn from; default all
};

// Fraction of `regime` tokens, across `ids`, where f fires.
inline double fire_fraction(const CodeCache& cache, std::uint32_t f, const std::set<std::string>& ids,
                            MaskRegime regime, bool by_neutral_source) {
  std::uint64_t n = 0, k = 0;
  for (const auto& s : cache.samples) {
    const std::string key = by_neutral_source ? neutral_source(s).value_or("") : s.sample_id;
    if (!ids.count(key)) continue;
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      if (!regime_selects(s.visual, regime, t)) continue;
      ++n;
      if (s.activation(t, f) > 0.f) ++k;
    }
  }
  return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0;
}

// For each candidate: frequency over its top-k original samples vs over the
// neutral re-runs of those samples. Robust when the neutral frequency is
// nonzero and at least rho times the original. A candidate with any top
// sample lacking a neutral re-run is Unverified and excluded.
inline std::set<FeatureId> lexical_filter(ShiftReport& r, const CodeCache& original, const CodeCache& neutral,
                                          const LexicalConfig& cfg = {}) {
  std::set<std::string> have_neutral;
  for (const auto& s : neutral.samples)
    if (auto src = neutral_source(s)) have_neutral.insert(*src);
  std::set<FeatureId> robust;
  for (auto& row : r.rows) {
    if (!row.candidate) continue;
    const auto top = top_samples(original, row.id.index, cfg.top_k, cfg.regime, cfg.pool ? &*cfg.pool : nullptr);
    std::set<std::string> ids;
    bool missing = top.empty();
    for (const auto& t : top) {
      ids.insert(t.sample_id);
      if (!have_neutral.count(t.sample_id)) missing = true;
    }
    row.orig_freq = fire_fraction(original, row.id.index, ids, cfg.regime, false);
    if (missing) {
      row.lexical = LexicalStatus::Unverified;
      row.neutral_freq.reset();
      continue;
    }
    const double nf = fire_fraction(neutral, row.id.index, ids, cfg.regime, true);
    row.neutral_freq = nf;
    const bool ok = nf > 0 && nf >= r.thresholds.rho * row.orig_freq;
    row.lexical = ok ? LexicalStatus::Robust : LexicalStatus::Dropped;
    if (ok) robust.insert(row.id);
  }
  return robust;
}

// Copies shift results into the feature table and marks the final
// selection (robust ∩ adapted).
inline std::set<FeatureId> merge_shift(FeatureTable& table, const ShiftReport& r) {
  std::map<FeatureId, const ShiftRow*> by;
  for (const auto& row : r.rows) by[row.id] = &row;
  std::set<FeatureId> selected;
  for (auto& s : table) {
    const auto it = by.find(s.id);
    if (it == by.end()) continue;
    const auto& row = *it->second;
    s.p_by_split[r.base_split] = row.p_base;
    s.p_by_split[r.shift_split] = row.p_shift;
    s.delta_p = row.stat.delta_p;
    s.odds_ratio = row.stat.odds_ratio;
    s.flags.set_shift_candidate(row.candidate);
    s.flags.set_lexically_robust(row.candidate && row.lexical == LexicalStatus::Robust);
    const bool sel = s.flags.lexically_robust() && s.flags.adapted();
    s.flags.set_selected(sel);
    if (sel) selected.insert(s.id);
  }
  return selected;
}

inline std::set<FeatureId> intersect_with_adapted(const std::set<FeatureId>& robust,
                                                  const std::set<FeatureId>& adapted) {
  std::set<FeatureId> out;
  for (const auto& f : robust)
    if (adapted.count(f)) out.insert(f);
  return out;
}

// ---------------------------------------------------------------------------

inline std::string shift_csv(const ShiftReport& r) {
  csv::Table t({"layer", "index", "fires_base", "fires_shift", "p_base", "p_shift", "delta_p", "odds_ratio",
                "candidate", "lexical", "orig_freq", "neutral_freq"});
  for (const auto& row : r.rows)
    t.add({std::to_string(row.id.layer), std::to_string(row.id.index), std::to_string(row.fires_base),
           std::to_string(row.fires_shift), csv::num(row.p_base), csv::num(row.p_shift),
           csv::num(row.stat.delta_p), csv::num(row.stat.odds_ratio), row.candidate ? "1" : "0",
           to_string(row.lexical), csv::num(row.orig_freq), csv::num(row.neutral_freq)});
  return t.str();
}

namespace detail {
inline std::size_t bin_of(double v, double lo, double hi, std::size_t bins) {
  const double w = (hi - lo) / static_cast<double>(bins);
  auto b = static_cast<long long>(std::floor((v - lo) / w));
  return static_cast<std::size_t>(std::clamp<long long>(b, 0, static_cast<long long>(bins) - 1));
}
}  // namespace detail

// Per-split firing-frequency histogram: equal-width bins on [0, hi], one
// count column per split. Values above hi land in the last bin.
inline std::string frequency_histogram_csv(const ShiftReport& r, std::size_t bins = 50, double hi = 1.0) {
  if (bins == 0 || !(hi > 0)) throw ConfigError("histogram: need bins > 0 and hi > 0");
  std::vector<std::uint64_t> hb(bins, 0), hs(bins, 0);
  for (const auto& row : r.rows) {
    ++hb[detail::bin_of(row.p_base, 0, hi, bins)];
    ++hs[detail::bin_of(row.p_shift, 0, hi, bins)];
  }
  csv::Table t({"bin_lo", "bin_hi", "count_" + r.base_split, "count_" + r.shift_split});
  const double w = hi / static_cast<double>(bins);
  for (std::size_t i = 0; i < bins; ++i)
    t.add({csv::num(w * double(i)), csv::num(w * double(i + 1)), std::to_string(hb[i]), std::to_string(hs[i])});
  return t.str();
}

// Histogram of Δp on [lo, hi]; out-of-range values are clamped into the end bins.
inline std::string delta_p_histogram_csv(const ShiftReport& r, std::size_t bins = 40, double lo = -0.1,
                                         double hi = 0.1) {
  if (bins == 0 || !(hi > lo)) throw ConfigError("histogram: need bins > 0 and hi > lo");
  std::vector<std::uint64_t> h(bins, 0);
  for (const auto& row : r.rows) ++h[detail::bin_of(row.stat.delta_p, lo, hi, bins)];
  csv::Table t({"bin_lo", "bin_hi", "count"});
  const double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i < bins; ++i)
    t.add({csv::num(lo + w * double(i)), csv::num(lo + w * double(i + 1)), std::to_string(h[i])});
  return t.str();
}

inline nlohmann::json to_json(const ShiftReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    if (!row.candidate) continue;
    rows.push_back({{"feature_id", row.id.str()},
                    {"layer", row.id.layer},
                    {"index", row.id.index},
                    {"p_base", row.p_base},
                    {"p_shift", row.p_shift},
                    {"delta_p", row.stat.delta_p},
                    {"odds_ratio", row.stat.odds_ratio},
                    {"lexical", to_string(row.lexical)},
                    {"orig_freq", row.orig_freq},
                    {"neutral_freq", row.neutral_freq ? nlohmann::json(*row.neutral_freq) : nlohmann::json()}});
  }
  return {{"base_split", r.base_split},
          {"shift_split", r.shift_split},
          {"layer", r.layer},
          {"n_base_tokens", r.n_base},
          {"n_shift_tokens", r.n_shift},
          {"thresholds",
           {{"delta_p_min", r.thresholds.delta_p_min},
            {"or_min", r.thresholds.or_min},
            {"rho", r.thresholds.rho},
            {"smoothing", r.thresholds.smoothing}}},
          {"candidates", rows}};
}

}  // namespace saediff
