// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pipeline configuration: one JSON document with a section per stage.
// validate_config() fills every default and reports all problems at once;
// its output is a fixed point (validating a normalized config returns it
// unchanged).

#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/autointerp/client.hpp"
#include "saediff/autointerp/interp.hpp"
#include "saediff/causal.hpp"
#include "saediff/core/binary_io.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/diffing.hpp"
#include "saediff/sae_train.hpp"
#include "saediff/shift.hpp"
#include "saediff/toymodel/task.hpp"
#include "saediff/toymodel/train.hpp"

namespace saediff::pipeline {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Checking helpers. Every accessor records problems instead of throwing and
// writes the effective value into the normalized output.

class Checker {
 public:
  std::vector<std::string> errors;
  void error(const std::string& path, const std::string& msg) { errors.push_back(path + ": " + msg); }
};

class Section {
 public:
  Section(Checker& c, std::string path, const json* src, json& dst) : c_(c), path_(std::move(path)), src_(src), dst_(dst) {
    if (src_ && !src_->is_object()) {
      c_.error(path_.empty() ? "<root>" : path_, "expected an object");
      src_ = nullptr;
    }
    if (!dst_.is_object()) dst_ = json::object();
  }

  Section child(const std::string& key) {
    used_.insert(key);
    const json* s = has(key) ? &(*src_)[key] : nullptr;
    if (s && s->is_null()) s = nullptr;
    return Section(c_, at(key), s, dst_[key]);
  }

  double number(const std::string& key, std::optional<double> def, double lo = -inf(), double hi = inf(),
                bool lo_open = false) {
    const json* v = fetch(key);
    if (!v) return missing(key, def, [](double d) { return json(d); }).value_or(0.0);
    if (!v->is_number()) return bad(key, "expected a number", def.value_or(0.0));
    const double d = v->get<double>();
    if (d < lo || d > hi || (lo_open && d == lo))
      return bad(key, "must be in " + std::string(lo_open ? "(" : "[") + fmt(lo) + ", " + fmt(hi) + "], got " + fmt(d),
                 d);
    dst_[key] = d;
    return d;
  }

  std::uint64_t integer(const std::string& key, std::optional<std::uint64_t> def, std::uint64_t lo = 0,
                        std::uint64_t hi = std::numeric_limits<std::uint64_t>::max()) {
    const json* v = fetch(key);
    if (!v) return missing(key, def, [](std::uint64_t d) { return json(d); }).value_or(0);
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0))
      return bad(key, "expected a non-negative integer", def.value_or(0));
    const auto x = v->get<std::uint64_t>();
    if (x < lo || x > hi) return bad(key, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "], got " +
                                              std::to_string(x), x);
    dst_[key] = x;
    return x;
  }

  bool boolean(const std::string& key, bool def) {
    const json* v = fetch(key);
    if (!v) {
      dst_[key] = def;
      return def;
    }
    if (!v->is_boolean()) return bad(key, "expected true or false", def);
    dst_[key] = v->get<bool>();
    return v->get<bool>();
  }

  std::string string(const std::string& key, std::optional<std::string> def,
                     const std::vector<std::string>& choices = {}) {
    const json* v = fetch(key);
    if (!v) return missing(key, def, [](const std::string& d) { return json(d); }).value_or("");
    if (!v->is_string()) return bad(key, "expected a string", def.value_or(""));
    const auto s = v->get<std::string>();
    if (!choices.empty() && std::find(choices.begin(), choices.end(), s) == choices.end()) {
      std::string opts;
      for (const auto& c : choices) opts += (opts.empty() ? "" : ", ") + c;
      return bad(key, "must be one of {" + opts + "}, got '" + s + "'", s);
    }
    dst_[key] = s;
    return s;
  }

  // Array of strings or null; null/absent means "use the derived default".
  std::optional<std::vector<std::string>> optional_strings(const std::string& key) {
    const json* v = fetch(key);
    if (!v) {
      dst_[key] = nullptr;
      return std::nullopt;
    }
    used_.erase(key);
    return list<std::string>(key, std::nullopt);
  }

  // String or null; null/absent means "use the derived default".
  std::optional<std::string> optional_string(const std::string& key) {
    const json* v = fetch(key);
    if (!v) {
      dst_[key] = nullptr;
      return std::nullopt;
    }
    if (!v->is_string()) {
      bad(key, "expected a string or null", 0);
      return std::nullopt;
    }
    dst_[key] = *v;
    return v->get<std::string>();
  }

  template <class T>
  std::vector<T> list(const std::string& key, std::optional<std::vector<T>> def, bool non_empty = false) {
    const json* v = fetch(key);
    if (!v) return missing(key, def, [](const std::vector<T>& d) { return json(d); }).value_or(std::vector<T>{});
    std::vector<T> out;
    bool ok = v->is_array();
    if (ok)
      for (const auto& x : *v) {
        if constexpr (std::is_same_v<T, std::string>) ok = ok && x.is_string();
        else if constexpr (std::is_floating_point_v<T>) ok = ok && x.is_number();
        else ok = ok && x.is_number_integer() && (x.is_number_unsigned() || x.get<std::int64_t>() >= 0);
        if (ok) out.push_back(x.get<T>());
      }
    if (!ok) return bad(key, std::string("expected an array of ") + type_name<T>(), def.value_or(std::vector<T>{}));
    if (non_empty && out.empty()) return bad(key, "must not be empty", out);
    dst_[key] = out;
    return out;
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  void error(const std::string& key, const std::string& msg) { c_.error(at(key), msg); }
  json& out() { return dst_; }

  // Unknown keys are errors: they are almost always typos.
  void finish() {
    if (!src_) return;
    for (const auto& [k, _] : src_->items())
      if (!used_.count(k)) c_.error(at(k), "unknown field");
  }

 private:
  static double inf() { return std::numeric_limits<double>::infinity(); }
  static std::string fmt(double d) {
    if (std::isinf(d)) return d > 0 ? "inf" : "-inf";
    if (d == std::floor(d) && std::abs(d) < 1e15) return std::to_string(static_cast<long long>(d));
    return json(d).dump();
  }
  template <class T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, std::string>) return "strings";
    else if constexpr (std::is_floating_point_v<T>) return "numbers";
    else return "non-negative integers";
  }

  bool has(const std::string& key) const { return src_ && src_->contains(key); }
  const json* fetch(const std::string& key) {
    used_.insert(key);
    if (!has(key) || (*src_)[key].is_null()) return nullptr;
    return &(*src_)[key];
  }
  template <class T, class F>
  std::optional<T> missing(const std::string& key, const std::optional<T>& def, F to_json) {
    if (!def) {
      c_.error(at(key), "required field missing");
      dst_[key] = nullptr;
      return std::nullopt;
    }
    dst_[key] = to_json(*def);
    return def;
  }
  template <class T>
  T bad(const std::string& key, const std::string& msg, T fallback) {
    c_.error(at(key), msg);
    dst_[key] = (*src_)[key];
    return fallback;
  }

  Checker& c_;
  std::string path_;
  const json* src_;
  json& dst_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------

struct PipelineConfig {
  json normalized;
  std::filesystem::path base_dir;  // relative paths resolve against this

  // run
  std::filesystem::path out;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> layers;

  // paths (resolved)
  std::filesystem::path train_shards, eval_shards, neutral_shards;
  std::optional<std::string> base_sae_template, adapted_sae_template;

  // task / toy
  toy::TaskConfig task;
  std::size_t n_train = 0, n_eval = 0;
  std::uint64_t train_seed = 0, eval_seed = 0;
  toy::ModelConfig model;
  std::uint64_t init_seed = 0;
  toy::ToyTrainConfig toy_train;

  // export
  std::string export_source = "toy";

  // sae
  std::size_t n_features = 0, k = 0;
  std::uint64_t sae_init_seed = 0;
  TrainConfig base_train, adapted_train;
  MaskRegime base_regime = MaskRegime::TextOnly, adapted_regime = MaskRegime::Full;

  // diff
  double epsilon = 1e-3, p_cos = 0.25;
  MaskRegime energy_mask = MaskRegime::TextOnly;
  PercentileScope scope = PercentileScope::Global;
  std::vector<double> sweep_eps, sweep_p;

  // shift
  SplitSpec base_split, shift_split;
  ShiftThresholds thresholds;
  MaskRegime shift_regime = MaskRegime::TextOnly;
  std::size_t lexical_top_k = 20;

  // causal
  causal::AttributionConfig attribution;
  causal::AblationConfig ablation;
  std::optional<std::vector<FeatureId>> features;  // default: the shift selection

  // interp
  std::vector<interp::Variant> variants;
  interp::InterpConfig interp;
  bool mock_api = false;
  interp::HttpClientConfig client;

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base_dir / q;
  }
  std::filesystem::path base_sae(std::uint32_t layer) const { return sae_path(base_sae_template, "base", layer); }
  std::filesystem::path adapted_sae(std::uint32_t layer) const {
    return sae_path(adapted_sae_template, "adapted", layer);
  }

 private:
  std::filesystem::path sae_path(const std::optional<std::string>& tmpl, const char* kind, std::uint32_t layer) const {
    if (!tmpl) return out / "sae" / (std::string(kind) + ".L" + std::to_string(layer) + ".saep");
    std::string s = *tmpl;
    const auto at = s.find("{layer}");
    if (at != std::string::npos) s.replace(at, 7, std::to_string(layer));
    return resolve(s);
  }
};

struct ValidationResult {
  json normalized;
  std::vector<std::string> errors;
  bool ok() const { return errors.empty(); }
};

inline const std::vector<std::string>& regime_names() {
  static const std::vector<std::string> r{"full", "image", "text"};
  return r;
}

inline std::optional<FeatureId> parse_feature_id(const std::string& s) {
  // L<layer>F<index>
  if (s.size() < 4 || s[0] != 'L') return std::nullopt;
  const auto f = s.find('F');
  if (f == std::string::npos || f == 1 || f + 1 == s.size()) return std::nullopt;
  try {
    std::size_t a = 0, b = 0;
    const auto layer = std::stoul(s.substr(1, f - 1), &a);
    const auto index = std::stoul(s.substr(f + 1), &b);
    if (a != f - 1 || b != s.size() - f - 1) return std::nullopt;
    return FeatureId{static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(index)};
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

namespace detail {

inline void split_section(Section s, const std::string& name, const std::vector<std::string>& tags) {
  s.string("name", name);
  s.list<std::string>("keywords", std::vector<std::string>{});
  s.list<std::string>("tags", tags);
  s.finish();
}

inline void sae_train_section(Section s, const std::string& regime, std::uint64_t seed, std::uint64_t max_tokens) {
  s.string("regime", regime, regime_names());
  s.number("base_lr", 3e-3, 0, 10, true);
  s.string("lr_rule", "inv_sqrt_layer", {"inv_sqrt_layer", "constant"});
  s.integer("batch_size", 256, 1);
  s.integer("max_tokens", max_tokens, 1);
  s.integer("eval_every_tokens", 10'000, 1);
  s.integer("seed", seed);
  s.boolean("normalize_decoder", true);
  s.finish();
}

}  // namespace detail

// Checks `raw` and returns it with every default filled. Named seeds left
// unset derive from run.seed by fixed offsets.
inline ValidationResult validate_config(const json& raw) {
  Checker c;
  json out = json::object();
  Section root(c, "", &raw, out);

  auto run = root.child("run");
  run.string("out", std::nullopt);
  const auto seed = run.integer("seed", std::nullopt);
  const auto layers = run.list<std::uint64_t>("layers", std::nullopt, true);
  run.finish();

  auto paths = root.child("paths");
  for (const char* k : {"train_shards", "eval_shards", "neutral_shards", "base_sae", "adapted_sae"})
    paths.optional_string(k);
  paths.finish();

  auto task = root.child("task");
  const toy::TaskConfig td;
  task.integer("grid", td.grid, 2, 16);
  task.list<std::string>("objects", td.objects, true);
  task.integer("min_objects", td.min_objects, 2);
  task.integer("max_objects", td.max_objects, 2);
  task.list<std::string>("relations", td.relations);
  task.number("relation_fraction", td.relation_fraction, 0, 1);
  task.integer("d_patch", td.d_patch, 1);
  task.integer("codebook_seed", td.codebook_seed);
  task.number("patch_noise", td.patch_noise, 0);
  task.integer("n_train", 4000, 1);
  task.integer("n_eval", 1000, 1);
  task.integer("train_seed", seed + 1);
  task.integer("eval_seed", seed + 2);
  task.finish();

  auto toy_s = root.child("toy");
  const auto n_layers = toy_s.integer("n_layers", 2, 1, 64);
  const auto n_heads = toy_s.integer("n_heads", 4, 1, 64);
  const auto d_model = toy_s.integer("d_model", 32, 1);
  toy_s.integer("d_mlp", 2 * d_model, 1);
  toy_s.integer("init_seed", seed + 3);
  if (n_heads && d_model % n_heads) toy_s.error("d_model", "must be divisible by n_heads");
  {
    auto tr = toy_s.child("train");
    const toy::ToyTrainConfig t;
    tr.integer("epochs", t.epochs, 1);
    tr.integer("batch_size", t.batch_size, 1);
    tr.number("lr", t.lr, 0, 10, true);
    tr.boolean("cosine", t.cosine);
    tr.integer("warmup_steps", t.warmup_steps);
    tr.number("weight_decay", t.weight_decay, 0);
    tr.integer("seed", seed + 11);
    tr.finish();
  }
  toy_s.finish();

  auto exp = root.child("export");
  const auto source = exp.string("source", "toy", {"toy", "dumps"});
  exp.finish();
  if (source == "toy")
    for (const char* k : {"train_shards", "eval_shards", "neutral_shards"})
      if (!out["paths"][k].is_null()) c.error(std::string("paths.") + k, "only valid with export.source = \"dumps\"");
  if (source == "dumps" && out["paths"]["eval_shards"].is_null())
    c.error("paths.eval_shards", "required when export.source = \"dumps\"");

  auto sae = root.child("sae");
  const auto n_features = sae.integer("n_features", 64, 1);
  const auto k = sae.integer("k", 4, 1);
  if (n_features && k > n_features) sae.error("k", "must not exceed n_features");
  sae.integer("init_seed", seed + 4);
  detail::sae_train_section(sae.child("base"), "text", seed + 5, 200'000);
  detail::sae_train_section(sae.child("adapted"), "full", seed + 6, 100'000);
  sae.finish();

  auto diff = root.child("diff");
  diff.number("epsilon", 1e-3, 0);
  diff.number("p_cos", 0.25, 0, 1);
  diff.string("energy_mask", "text", regime_names());
  diff.string("percentile_scope", "global", {"global", "per_layer"});
  diff.list<double>("sweep_epsilon", std::vector<double>{});
  diff.list<double>("sweep_p_cos", std::vector<double>{});
  diff.finish();
  for (const json& e : out["diff"]["sweep_epsilon"].is_array() ? out["diff"]["sweep_epsilon"] : json::array())
    if (e.is_number() && e.get<double>() < 0) c.error("diff.sweep_epsilon", "entries must be >= 0");
  for (const json& p : out["diff"]["sweep_p_cos"].is_array() ? out["diff"]["sweep_p_cos"] : json::array())
    if (p.is_number() && (p.get<double>() < 0 || p.get<double>() > 1)) c.error("diff.sweep_p_cos", "entries must be in [0, 1]");

  auto shift = root.child("shift");
  detail::split_section(shift.child("base_split"), "general", {"general"});
  detail::split_section(shift.child("shift_split"), "spatial", {"spatial"});
  shift.number("delta_p_min", 0.005, 0, 1);
  shift.number("or_min", 2.0, 0);
  shift.number("rho", 0.25, 0, 1);
  shift.number("smoothing", 0.5, 0, 10, true);
  shift.string("regime", "text", regime_names());
  shift.integer("lexical_top_k", 20, 1);
  shift.finish();

  auto causal_s = root.child("causal");
  causal_s.integer("top_k_samples", 10, 1);
  causal_s.integer("top_heads", 3, 1);
  causal_s.integer("n_controls", 5, 1);
  causal_s.list<std::uint64_t>("seeds", std::vector<std::uint64_t>{seed, seed + 1, seed + 2}, true);
  causal_s.boolean("include_v", false);
  causal_s.string("score_positions", "all", {"all", "text", "visual"});
  causal_s.string("objective_positions", "text", {"all", "text", "visual"});
  causal_s.boolean("exact", true);
  if (const auto ids = causal_s.optional_strings("features"))
    for (const auto& id : *ids)
      if (!parse_feature_id(id)) causal_s.error("features", "'" + id + "' is not a feature id like L0F12");
  causal_s.finish();

  auto in = root.child("interp");
  const auto variants = in.list<std::string>("variants", std::vector<std::string>{"RAW", "OVERLAY"}, true);
  for (const auto& v : variants)
    if (v != "RAW" && v != "OVERLAY") in.error("variants", "entries must be RAW or OVERLAY, got '" + v + "'");
  in.integer("k", 5, 1);
  in.integer("n_positives", 5, 1);
  in.integer("rounds", 2, 1);
  in.integer("seed", seed);
  in.string("regime", "text", regime_names());
  in.boolean("mock", false);
  {
    auto cl = in.child("client");
    const interp::HttpClientConfig h;
    cl.string("base_url", h.base_url);
    cl.string("path", h.path);
    cl.string("model", h.model);
    cl.string("api_key_env", h.api_key_env);
    cl.integer("timeout_seconds", static_cast<std::uint64_t>(h.timeout_seconds), 1, 3600);
    cl.integer("max_retries", static_cast<std::uint64_t>(h.max_retries), 0, 20);
    cl.boolean("debug", h.debug);
    cl.finish();
  }
  in.finish();

  root.finish();

  // Cross-field checks that need several sections.
  const auto task_errors = std::count_if(c.errors.begin(), c.errors.end(),
                                         [](const auto& e) { return e.rfind("task.", 0) == 0; });
  if (task_errors == 0) {
    try {
      toy::task_config_from_json(out["task"]);
    } catch (const std::exception& e) {
      c.error("task", e.what());
    }
  }
  for (auto l : layers)
    if (source == "toy" && n_layers && l >= n_layers)
      c.error("run.layers", "layer " + std::to_string(l) + " >= toy.n_layers (" + std::to_string(n_layers) + ")");
  return {out, c.errors};
}

// ---------------------------------------------------------------------------

// Empty or whitespace-only text reads as {} so that every required field is
// reported. Syntax errors carry line, column and the offending line.
inline json parse_config_text(const std::string& text, const std::string& name = "config") {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t at = e.byte == 0 ? 0 : std::min<std::size_t>(e.byte - 1, text.size());
    std::size_t line = 1, col = 1, start = 0;
    for (std::size_t i = 0; i < at; ++i) {
      if (text[i] == '\n') ++line, col = 1, start = i + 1;
      else ++col;
    }
    const auto end = text.find('\n', start);
    const auto src = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    std::string msg = e.what();
    if (const auto p = msg.find("syntax error"); p != std::string::npos) msg = msg.substr(p);
    throw ConfigError(name + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + msg + "\n  " + src +
                      "\n  " + std::string(col > 1 ? col - 1 : 0, ' ') + "^");
  }
}

struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<std::uint32_t>> layers;
  bool mock_api = false;
};

inline void apply_overrides(json& raw, const Overrides& o) {
  if (!raw.is_object()) return;
  auto& run = raw["run"];
  if (!run.is_object()) run = json::object();
  if (o.out) run["out"] = *o.out;
  if (o.seed) run["seed"] = *o.seed;
  if (o.layers) run["layers"] = *o.layers;
  if (o.mock_api) {
    if (!raw["interp"].is_object()) raw["interp"] = json::object();
    raw["interp"]["mock"] = true;
  }
}

// Builds the typed config from a normalized document.
inline PipelineConfig load_pipeline_config(const json& n, const std::filesystem::path& base_dir) {
  PipelineConfig c;
  c.normalized = n;
  c.base_dir = base_dir;
  const auto& run = n["run"];
  c.out = c.resolve(run["out"].get<std::string>());
  c.seed = run["seed"].get<std::uint64_t>();
  for (auto l : run["layers"]) c.layers.push_back(l.get<std::uint32_t>());
  std::sort(c.layers.begin(), c.layers.end());
  c.layers.erase(std::unique(c.layers.begin(), c.layers.end()), c.layers.end());

  const auto& p = n["paths"];
  auto path_or = [&](const char* key, const std::filesystem::path& def) {
    return p[key].is_null() ? def : c.resolve(p[key].get<std::string>());
  };
  c.train_shards = path_or("train_shards", c.out / "shards" / "train");
  c.eval_shards = path_or("eval_shards", c.out / "shards" / "eval");
  c.neutral_shards = path_or("neutral_shards", c.out / "shards" / "neutral");
  if (!p["base_sae"].is_null()) c.base_sae_template = p["base_sae"].get<std::string>();
  if (!p["adapted_sae"].is_null()) c.adapted_sae_template = p["adapted_sae"].get<std::string>();

  const auto& t = n["task"];
  c.task = toy::task_config_from_json(t);
  c.n_train = t["n_train"];
  c.n_eval = t["n_eval"];
  c.train_seed = t["train_seed"];
  c.eval_seed = t["eval_seed"];

  const auto& ty = n["toy"];
  c.model.n_layers = ty["n_layers"];
  c.model.n_heads = ty["n_heads"];
  c.model.d_model = ty["d_model"];
  c.model.d_head = c.model.d_model / c.model.n_heads;
  c.model.d_mlp = ty["d_mlp"];
  c.model.vocab_size = toy::Vocab(c.task.objects).size();
  c.model.n_visual_tokens = c.task.n_visual();
  c.model.d_patch = c.task.d_patch;
  c.model.max_seq = c.task.n_visual() + 12;
  toy::validate(c.model);
  c.init_seed = ty["init_seed"];
  c.toy_train = toy::toy_train_config_from_json(ty["train"]);

  c.export_source = n["export"]["source"].get<std::string>();

  const auto& s = n["sae"];
  c.n_features = s["n_features"];
  c.k = s["k"];
  c.sae_init_seed = s["init_seed"];
  c.base_train = train_config_from_json(s["base"]);
  c.base_train.init = "random";
  c.adapted_train = train_config_from_json(s["adapted"]);
  c.adapted_train.init = "warm";
  c.base_regime = parse_regime(s["base"]["regime"].get<std::string>());
  c.adapted_regime = parse_regime(s["adapted"]["regime"].get<std::string>());

  const auto& d = n["diff"];
  c.epsilon = d["epsilon"];
  c.p_cos = d["p_cos"];
  c.energy_mask = parse_regime(d["energy_mask"].get<std::string>());
  c.scope = d["percentile_scope"] == "per_layer" ? PercentileScope::PerLayer : PercentileScope::Global;
  c.sweep_eps = d["sweep_epsilon"].get<std::vector<double>>();
  c.sweep_p = d["sweep_p_cos"].get<std::vector<double>>();

  const auto& sh = n["shift"];
  auto split = [](const json& j) {
    return SplitSpec{j["name"].get<std::string>(), j["keywords"].get<std::vector<std::string>>(), j["tags"].get<std::vector<std::string>>()};
  };
  c.base_split = split(sh["base_split"]);
  c.shift_split = split(sh["shift_split"]);
  c.thresholds = {sh["delta_p_min"].get<double>(), sh["or_min"].get<double>(), sh["rho"].get<double>(),
                  sh["smoothing"].get<double>()};
  c.shift_regime = parse_regime(sh["regime"].get<std::string>());
  c.lexical_top_k = sh["lexical_top_k"];

  const auto& ca = n["causal"];
  c.attribution.top_k_samples = ca["top_k_samples"];
  c.attribution.top_heads = ca["top_heads"];
  c.attribution.options.include_v = ca["include_v"];
  c.attribution.options.score_positions = causal::parse_positions(ca["score_positions"].get<std::string>());
  c.attribution.objective_positions = causal::parse_positions(ca["objective_positions"].get<std::string>());
  c.attribution.exact = ca["exact"];
  c.ablation.n_controls = ca["n_controls"];
  c.ablation.seeds = ca["seeds"].get<std::vector<std::uint64_t>>();
  if (!ca["features"].is_null()) {
    c.features.emplace();
    for (const auto& id : ca["features"]) c.features->push_back(*parse_feature_id(id.get<std::string>()));
  }

  const auto& in = n["interp"];
  for (const auto& v : in["variants"]) c.variants.push_back(interp::parse_variant(v.get<std::string>()));
  c.interp.k = in["k"];
  c.interp.n_positives = in["n_positives"];
  c.interp.validation.rounds = in["rounds"];
  c.interp.validation.seed = in["seed"];
  c.interp.regime = parse_regime(in["regime"].get<std::string>());
  c.mock_api = in["mock"];
  c.client = interp::http_client_config_from_json(in["client"]);
  return c;
}

inline json read_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path.string());
  return parse_config_text(bin::read_text(path), path.filename().string());
}

}  // namespace saediff::pipeline
