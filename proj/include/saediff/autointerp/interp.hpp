// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Feature descriptions and their F1 validation through a chat client.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/autointerp/client.hpp"
#include "saediff/code_cache.hpp"
#include "saediff/core/csv.hpp"
#include "saediff/core/errors.hpp"

namespace saediff::interp {

inline constexpr char kDescriptionStem[] = "this neuron activates for";

enum class Variant { Raw, Overlay };

inline std::string to_string(Variant v) { return v == Variant::Raw ? "RAW" : "OVERLAY"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "RAW" || s == "raw") return Variant::Raw;
  if (s == "OVERLAY" || s == "overlay") return Variant::Overlay;
  throw ConfigError("unknown interp variant '" + s + "' (expected RAW or OVERLAY)");
}

struct InterpSample {
  std::string sample_id;
  std::string split;
  std::string question;
  std::string context;  // scene text, when known
  float max_activation = 0;
  std::size_t argmax_token = 0;
};

struct NamedCache {
  std::string split;
  const CodeCache* cache = nullptr;
};

struct TopSamples {
  std::vector<InterpSample> samples;
  std::optional<std::string> warning;
};

// Top-k samples by max activation over all splits, one entry per sample_id
// (the split where it peaks first wins). Ties order by sample_id.
inline TopSamples collect_top_samples(const FeatureId& f, std::span<const NamedCache> splits, std::size_t k = 5,
                                      MaskRegime regime = MaskRegime::TextOnly,
                                      const std::map<std::string, std::string>* contexts = nullptr) {
  std::map<std::string, InterpSample> best;
  for (const auto& nc : splits) {
    if (!nc.cache) throw InvariantError("collect_top_samples: null cache for split " + nc.split);
    if (nc.cache->layer != f.layer)
      throw DimensionError("collect_top_samples: cache for split " + nc.split + " is layer " +
                           std::to_string(nc.cache->layer) + ", feature is " + f.str());
    if (f.index >= nc.cache->n_features) throw DimensionError("collect_top_samples: " + f.str() + " out of range");
    for (const auto& s : nc.cache->samples) {
      float m = 0;
      std::size_t at = 0;
      for (std::size_t t = 0; t < s.tokens.size(); ++t) {
        if (!regime_selects(s.visual, regime, t)) continue;
        const float a = s.activation(t, f.index);
        if (a > m) m = a, at = t;
      }
      if (m <= 0) continue;
      auto it = best.find(s.sample_id);
      if (it != best.end() && it->second.max_activation >= m) continue;
      InterpSample is{s.sample_id, nc.split, s.question, "", m, at};
      if (contexts)
        if (auto c = contexts->find(s.sample_id); c != contexts->end()) is.context = c->second;
      best[s.sample_id] = std::move(is);
    }
  }
  TopSamples out;
  for (auto& [id, s] : best) out.samples.push_back(std::move(s));
  std::sort(out.samples.begin(), out.samples.end(), [](const auto& a, const auto& b) {
    return a.max_activation > b.max_activation || (a.max_activation == b.max_activation && a.sample_id < b.sample_id);
  });
  if (out.samples.size() > k) out.samples.resize(k);
  if (out.samples.empty()) out.warning = f.str() + " never fires in the given splits";
  return out;
}

// ---------------------------------------------------------------------------
// Prompts

inline std::string sample_block(std::span<const InterpSample> samples, bool with_activation) {
  std::ostringstream os;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    os << "[" << (i + 1) << "] question: " << s.question << "\n";
    if (!s.context.empty()) os << "    scene: " << s.context << "\n";
    if (with_activation) os << "    max activation: " << csv::num(s.max_activation) << "\n";
  }
  return os.str();
}

inline ChatRequest description_request(const FeatureId& f, std::span<const InterpSample> samples, Variant v,
                                       const std::string& overlay_evidence = "") {
  ChatRequest r;
  r.messages.push_back(
      {"system", std::string("You study single features of a vision-language model through the samples that "
                             "activate them most (scene text and question") +
                     (v == Variant::Overlay ? ", plus per-head attribution grids" : "") + ")."});
  std::string u = "Task: write one short, lower-case sentence completing \"" + std::string(kDescriptionStem) +
                  " ...\".\nUse patterns the samples share; be specific; do not hedge.\n"
                  "Return: {\"description\": \"one concise sentence\"}\n\nFeature: " +
                  f.str() + "\nSamples:\n" + sample_block(samples, true);
  if (v == Variant::Overlay && !overlay_evidence.empty()) u += "\nHead scores (rows = layers, columns = heads):\n" + overlay_evidence;
  r.messages.push_back({"user", u});
  return r;
}

inline ChatRequest validation_request(const std::string& description, std::span<const InterpSample> samples,
                                      Variant v, const std::string& overlay_evidence = "") {
  ChatRequest r;
  r.messages.push_back({"system", std::string("You check a feature description against short examples") +
                                      (v == Variant::Overlay ? " (with per-head attribution grids)" : "") + "."});
  std::string u = "Description: " + description +
                  "\nTask: for each sample, output 1 if it reasonably matches the description; else 0.\n"
                  "Return: {\"classifications\": [0/1, ...]} with exactly " +
                  std::to_string(samples.size()) + " entries.\n\nSamples:\n" + sample_block(samples, false);
  if (v == Variant::Overlay && !overlay_evidence.empty()) u += "\nHead scores (rows = layers, columns = heads):\n" + overlay_evidence;
  r.messages.push_back({"user", u});
  return r;
}

namespace detail {

inline nlohmann::json parse_object(const std::string& content, const char* what) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(content);
  } catch (const nlohmann::json::parse_error&) {
    throw ApiError(std::string("malformed ") + what + " response (not a JSON object): " + content.substr(0, 200));
  }
  if (!j.is_object()) throw ApiError(std::string("malformed ") + what + " response (not a JSON object)");
  return j;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

}  // namespace detail

// {"description": "..."}: a non-empty single sentence.
inline std::string parse_description(const std::string& content) {
  const auto j = detail::parse_object(content, "description");
  if (!j.contains("description") || !j["description"].is_string())
    throw ApiError("malformed description response: missing string field \"description\"");
  const auto d = detail::trim(j["description"].get<std::string>());
  if (d.empty()) throw ApiError("malformed description response: empty description");
  if (d.find('\n') != std::string::npos) throw ApiError("malformed description response: more than one line");
  const auto end = d.find_first_of(".!?");
  if (end != std::string::npos && end + 1 != d.size())
    throw ApiError("malformed description response: more than one sentence");
  return d;
}

// {"classifications": [0/1, ...]} with exactly n entries.
inline std::vector<bool> parse_classifications(const std::string& content, std::size_t n) {
  const auto j = detail::parse_object(content, "classification");
  if (!j.contains("classifications") || !j["classifications"].is_array())
    throw ApiError("malformed classification response: missing array \"classifications\"");
  const auto& a = j["classifications"];
  if (a.size() != n)
    throw ApiError("classification count mismatch: got " + std::to_string(a.size()) + ", expected " + std::to_string(n));
  std::vector<bool> out;
  for (const auto& x : a) {
    if (!x.is_number_integer() || (x.get<int>() != 0 && x.get<int>() != 1))
      throw ApiError("malformed classification response: entries must be 0 or 1");
    out.push_back(x.get<int>() == 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Description and validation

inline std::string describe(const FeatureId& f, std::span<const InterpSample> samples, ApiClient& client,
                            Variant v = Variant::Raw, const std::string& overlay_evidence = "") {
  if (samples.empty()) throw EmptyInputError("describe " + f.str() + ": no samples");
  return parse_description(client.complete(description_request(f, samples, v, overlay_evidence)));
}

struct Outcome {
  std::string sample_id;
  bool truth = false;
  bool predicted = false;
  int round = 0;
};

struct F1Score {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0;
};

// Positives are the true class. Undefined ratios (no predicted or no actual
// positives) count as 0.
inline F1Score f1_score(std::span<const Outcome> outcomes) {
  F1Score s;
  for (const auto& o : outcomes) {
    if (o.truth && o.predicted) ++s.tp;
    else if (!o.truth && o.predicted) ++s.fp;
    else if (o.truth && !o.predicted) ++s.fn;
    else ++s.tn;
  }
  if (s.tp + s.fp) s.precision = double(s.tp) / double(s.tp + s.fp);
  if (s.tp + s.fn) s.recall = double(s.tp) / double(s.tp + s.fn);
  if (s.tp) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

struct ValidationConfig {
  std::size_t rounds = 2;
  std::uint64_t seed = 0;
};

struct ValidationResult {
  std::vector<Outcome> outcomes;
  F1Score score;
};

// Sample i of each class goes to round i mod rounds; each round is shuffled
// with the seed so classes are interleaved. Outcomes are pooled.
inline ValidationResult validate(const std::string& description, std::span<const InterpSample> positives,
                                 std::span<const InterpSample> negatives, ApiClient& client, Variant v = Variant::Raw,
                                 const ValidationConfig& cfg = {}, const std::string& overlay_evidence = "") {
  if (positives.empty() || negatives.empty())
    throw EmptyInputError("validate: need at least one positive and one negative sample");
  if (cfg.rounds == 0) throw ConfigError("validate: rounds must be positive");
  std::mt19937_64 rng(cfg.seed);
  ValidationResult res;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    std::vector<std::pair<const InterpSample*, bool>> items;
    for (std::size_t i = r; i < positives.size(); i += cfg.rounds) items.push_back({&positives[i], true});
    for (std::size_t i = r; i < negatives.size(); i += cfg.rounds) items.push_back({&negatives[i], false});
    if (items.empty()) continue;
    std::shuffle(items.begin(), items.end(), rng);
    std::vector<InterpSample> batch;
    for (const auto& [s, _] : items) batch.push_back(*s);
    const auto pred = parse_classifications(client.complete(validation_request(description, batch, v, overlay_evidence)),
                                            batch.size());
    for (std::size_t i = 0; i < items.size(); ++i)
      res.outcomes.push_back({items[i].first->sample_id, items[i].second, pred[i], static_cast<int>(r)});
  }
  res.score = f1_score(res.outcomes);
  return res;
}

// ---------------------------------------------------------------------------
// Records

struct InterpRecord {
  FeatureId feature;
  std::string description;
  Variant variant = Variant::Raw;
  std::vector<std::string> examples;
  std::vector<Outcome> outcomes;
  F1Score score;
  std::string client;
  std::optional<std::string> reviewer_notes;
};

inline nlohmann::json to_json(const InterpRecord& r) {
  nlohmann::json outs = nlohmann::json::array();
  for (const auto& o : r.outcomes)
    outs.push_back({{"sample_id", o.sample_id}, {"truth", o.truth ? 1 : 0}, {"predicted", o.predicted ? 1 : 0},
                    {"round", o.round}});
  return {{"feature_id", r.feature.str()},
          {"layer", r.feature.layer},
          {"index", r.feature.index},
          {"description", r.description},
          {"variant", to_string(r.variant)},
          {"examples", r.examples},
          {"classifications", outs},
          {"precision", r.score.precision},
          {"recall", r.score.recall},
          {"f1", r.score.f1},
          {"client", r.client},
          {"reviewer_notes", r.reviewer_notes ? nlohmann::json(*r.reviewer_notes) : nlohmann::json(nullptr)}};
}

// Rejects records whose stored F1 disagrees with their outcomes.
inline InterpRecord interp_record_from_json(const nlohmann::json& j) {
  InterpRecord r;
  try {
    r.feature = {j.at("layer").get<std::uint32_t>(), j.at("index").get<std::uint32_t>()};
    r.description = j.at("description").get<std::string>();
    r.variant = parse_variant(j.at("variant").get<std::string>());
    r.examples = j.at("examples").get<std::vector<std::string>>();
    for (const auto& o : j.at("classifications"))
      r.outcomes.push_back({o.at("sample_id").get<std::string>(), o.at("truth").get<int>() == 1,
                            o.at("predicted").get<int>() == 1, o.at("round").get<int>()});
    r.client = j.value("client", "");
    if (j.contains("reviewer_notes") && j["reviewer_notes"].is_string())
      r.reviewer_notes = j["reviewer_notes"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("interp record: ") + e.what());
  }
  r.score = f1_score(r.outcomes);
  if (std::abs(r.score.f1 - j.value("f1", -1.0)) > 1e-12)
    throw FormatError("interp record " + r.feature.str() + ": stored f1 does not match classifications");
  return r;
}

struct InterpConfig {
  std::size_t k = 5;            // description examples
  std::size_t n_positives = 5;  // held-out positives, next in rank after the examples
  ValidationConfig validation;
  MaskRegime regime = MaskRegime::TextOnly;
};

struct InterpSelection {
  std::vector<InterpSample> examples, positives, negatives;
  std::optional<std::string> warning;
};

// Examples are the top k, positives the next n_positives, negatives a seeded
// draw of the same size from `general` excluding both. Shared by both
// variants.
inline InterpSelection select_samples(const FeatureId& f, std::span<const NamedCache> splits, const NamedCache& general,
                                      const InterpConfig& cfg,
                                      const std::map<std::string, std::string>* contexts = nullptr) {
  auto top = collect_top_samples(f, splits, cfg.k + cfg.n_positives, cfg.regime, contexts);
  InterpSelection sel;
  sel.warning = top.warning;
  for (std::size_t i = 0; i < top.samples.size(); ++i)
    (i < cfg.k ? sel.examples : sel.positives).push_back(top.samples[i]);
  std::set<std::string> used;
  for (const auto& s : top.samples) used.insert(s.sample_id);
  std::vector<const CodedSample*> pool;
  for (const auto& s : general.cache->samples)
    if (!used.count(s.sample_id)) pool.push_back(&s);
  std::mt19937_64 rng(cfg.validation.seed ^ (std::uint64_t(f.layer) << 32 | f.index));
  std::shuffle(pool.begin(), pool.end(), rng);
  for (std::size_t i = 0; i < std::min(sel.positives.size(), pool.size()); ++i) {
    InterpSample s{pool[i]->sample_id, general.split, pool[i]->question, "", 0.f, 0};
    if (contexts)
      if (auto c = contexts->find(s.sample_id); c != contexts->end()) s.context = c->second;
    sel.negatives.push_back(std::move(s));
  }
  std::sort(sel.negatives.begin(), sel.negatives.end(),
            [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; });
  return sel;
}

inline InterpRecord interp_feature(const FeatureId& f, const InterpSelection& sel, ApiClient& client, Variant v,
                                   const InterpConfig& cfg = {}, const std::string& overlay_evidence = "") {
  InterpRecord r;
  r.feature = f;
  r.variant = v;
  r.client = client.name();
  for (const auto& s : sel.examples) r.examples.push_back(s.sample_id);
  r.description = describe(f, sel.examples, client, v, overlay_evidence);
  auto val = validate(r.description, sel.positives, sel.negatives, client, v, cfg.validation, overlay_evidence);
  r.outcomes = std::move(val.outcomes);
  r.score = val.score;
  return r;
}

// ---------------------------------------------------------------------------
// Offline mock used by `--mock-api`: describes a feature by the most common
// relation word (or, failing that, content word) in its examples and
// classifies a sample as matching when its text contains that word.

namespace detail {

inline std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out;
  std::string w;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
      w += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!w.empty()) {
      out.push_back(w);
      w.clear();
    }
  }
  if (!w.empty()) out.push_back(w);
  return out;
}

inline std::vector<std::string> section_lines(const std::string& text, const std::string& key) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto p = line.find(key);
    if (p != std::string::npos) out.push_back(line.substr(p + key.size()));
  }
  return out;
}

}  // namespace detail

inline MockClient keyword_mock() {
  return MockClient([](const ChatRequest& req) -> std::string {
    const auto text = req.all_content();
    static const std::set<std::string> stop{"is", "the", "a", "there", "an", "of", "in", "at", "describe", "objects",
                                            "image", "and"};
    static const std::vector<std::string> relations{"above", "below", "left", "right"};
    if (text.find("\"description\"") != std::string::npos && text.find("Description: ") == std::string::npos) {
      std::map<std::string, std::size_t> counts;
      for (const auto& q : detail::section_lines(text, "question: "))
        for (const auto& w : detail::words(q))
          if (!stop.count(w)) ++counts[w];
      std::string best;
      std::size_t n = 0;
      for (const auto& r : relations)
        if (counts.count(r) && counts[r] > n) best = r, n = counts[r];
      if (best.empty())
        for (const auto& [w, c] : counts)
          if (c > n) best = w, n = c;
      if (best.empty()) best = "nothing in particular";
      return nlohmann::json{{"description", std::string(kDescriptionStem) + " " + best}}.dump();
    }
    const auto desc = detail::section_lines(text, "Description: ");
    const auto dw = desc.empty() ? std::vector<std::string>{} : detail::words(desc.front());
    const std::string key = dw.empty() ? "" : dw.back();
    std::vector<int> cls;
    for (const auto& q : detail::section_lines(text, "question: ")) {
      const auto w = detail::words(q);
      cls.push_back(!key.empty() && std::find(w.begin(), w.end(), key) != w.end() ? 1 : 0);
    }
    return nlohmann::json{{"classifications", cls}}.dump();
  });
}

}  // namespace saediff::interp
