// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// The pipeline stages. Each one reads the previous stages' artifacts from the
// run directory, writes its own under a stage directory and is wrapped by
// run_stage() for manifests and restarts.

#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/autointerp/interp.hpp"
#include "saediff/causal.hpp"
#include "saediff/code_cache.hpp"
#include "saediff/core/encoding.hpp"
#include "saediff/diffing.hpp"
#include "saediff/pipeline/config.hpp"
#include "saediff/pipeline/run_dir.hpp"
#include "saediff/sae_train.hpp"
#include "saediff/shift.hpp"
#include "saediff/toymodel/capture.hpp"
#include "saediff/toymodel/task.hpp"
#include "saediff/toymodel/train.hpp"

namespace saediff::pipeline {

inline constexpr char kReportSchema[] = "sae-diff.report/1";

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"gen-data", "train-toy", "export-acts", "train-sae", "eval-fvu", "diff",
                                          "shift",    "patch",     "ablate",      "interp",    "report"};
  return s;
}

using ClientFactory = std::function<std::unique_ptr<interp::ApiClient>()>;

struct RunContext {
  const PipelineConfig& cfg;
  std::string config_hash;
  ClientFactory make_client;  // used by `interp` when not mocked
};

struct Layout {
  fs::path out;
  fs::path data() const { return out / "data"; }
  fs::path train_data() const { return data() / "train.jsonl"; }
  fs::path eval_data() const { return data() / "eval.jsonl"; }
  fs::path neutral_data() const { return data() / "neutral.jsonl"; }
  fs::path toy() const { return out / "toy"; }
  fs::path model() const { return toy() / "model.toym"; }
  fs::path shards() const { return out / "shards"; }
  fs::path exported() const { return out / "export"; }
  fs::path sae() const { return out / "sae"; }
  fs::path fvu() const { return out / "eval-fvu"; }
  fs::path diff() const { return out / "diff"; }
  fs::path shift() const { return out / "shift"; }
  fs::path patch() const { return out / "patch"; }
  fs::path ablate() const { return out / "ablate"; }
  fs::path interp() const { return out / "interp"; }
  fs::path report() const { return out / "report"; }
};

inline std::string config_hash(const json& normalized) { return enc::sha256_hex(normalized.dump()); }

namespace detail {

inline void write_json(const fs::path& p, const json& j) { bin::write_text(p, j.dump(2) + "\n"); }
inline json read_json(const fs::path& p) {
  try {
    return json::parse(bin::read_text(p));
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline json sections(const PipelineConfig& c, std::initializer_list<const char*> names) {
  json j = json::object();
  j["layers"] = c.normalized["run"]["layers"];
  for (const char* n : names) j[n] = c.normalized[n];
  return j;
}

inline std::vector<ActivationShard> load_layer(const fs::path& dir, std::uint32_t layer) {
  if (!fs::is_directory(dir)) throw IoError("shard directory not found: " + dir.string());
  auto shards = load_shards(dir, layer);
  if (shards.empty()) throw EmptyInputError("no layer-" + std::to_string(layer) + " shards in " + dir.string());
  return shards;
}

inline std::vector<fs::path> sae_paths(const PipelineConfig& c, bool base, bool adapted) {
  std::vector<fs::path> out;
  for (auto l : c.layers) {
    if (base) out.push_back(c.base_sae(l));
    if (adapted) out.push_back(c.adapted_sae(l));
  }
  return out;
}

inline CodeCache cache_subset(const CodeCache& c, const std::set<std::string>& ids) {
  CodeCache out{c.layer, c.n_features, {}};
  for (const auto& s : c.samples)
    if (ids.count(s.sample_id)) out.samples.push_back(s);
  return out;
}

inline std::string scene_text(const toy::TaskSample& s) {
  std::string t;
  for (const auto& p : s.scene)
    t += (t.empty() ? "" : "; ") + p.object + " at row " + std::to_string(p.row) + ", col " + std::to_string(p.col);
  return t;
}

// Feature table from the latest stage that wrote one.
inline FeatureTable load_table(const Layout& lay) {
  const auto shifted = lay.shift() / "features.json";
  return feature_table_from_json(read_json(fs::exists(shifted) ? shifted : lay.diff() / "features.json"));
}

inline std::vector<FeatureId> target_features(const PipelineConfig& c, const Layout& lay) {
  if (c.features) return *c.features;
  std::vector<FeatureId> out;
  for (const auto& id : read_json(lay.shift() / "selected.json"))
    out.push_back(*parse_feature_id(id.get<std::string>()));
  return out;
}

inline fs::path feature_file(const fs::path& dir, const FeatureId& f, const std::string& suffix) {
  return dir / (f.str() + suffix);
}

struct ToyInputs {
  toy::ModelParams<float> model;
  toy::TaskDataset eval;
};

inline ToyInputs load_toy(const Layout& lay) {
  return {toy::load_model(lay.model()), toy::read_dataset(lay.eval_data())};
}

// Top samples of `f` among the evaluation samples of the shift split.
inline std::vector<toy::TaskSample> feature_top(const PipelineConfig& c, const CodeCache& cache,
                                                const std::vector<toy::TaskSample>& eval, std::uint32_t f) {
  const auto split = build_split<toy::TaskSample>(eval, c.shift_split);
  std::vector<toy::TaskSample> pool;
  for (const auto& s : eval)
    if (split.sample_ids.count(s.sample_id)) pool.push_back(s);
  return causal::top_task_samples(cache, f, pool, c.attribution.top_k_samples, c.shift_regime);
}

inline void require_layer(const PipelineConfig& c, const FeatureId& f) {
  if (std::find(c.layers.begin(), c.layers.end(), f.layer) == c.layers.end())
    throw ConfigError("feature " + f.str() + " is on a layer not listed in run.layers");
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline StageSpec gen_data_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  return {"gen-data",
          detail::sections(c, {"task", "shift"}),
          {{"train_seed", c.train_seed}, {"eval_seed", c.eval_seed}, {"codebook_seed", c.task.codebook_seed}},
          {},
          {},
          {lay.data()}};
}

inline std::vector<std::string> gen_data(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  fs::create_directories(lay.data() / "splits");
  toy::TaskDataset train{c.task, toy::gen_task(c.task, c.n_train, c.train_seed, "tr")};
  toy::TaskDataset eval{c.task, toy::gen_task(c.task, c.n_eval, c.eval_seed, "ev")};
  toy::TaskDataset neutral{c.task, {}};
  for (const auto& s : eval.samples) neutral.samples.push_back(toy::neutral_rerun(c.task, s));
  toy::write_dataset(train, lay.train_data());
  toy::write_dataset(eval, lay.eval_data());
  toy::write_dataset(neutral, lay.neutral_data());
  std::vector<std::string> warnings;
  for (const auto& spec : {c.base_split, c.shift_split}) {
    const auto split = build_split<toy::TaskSample>(eval.samples, spec);
    warnings.insert(warnings.end(), split.warnings.begin(), split.warnings.end());
    detail::write_json(lay.data() / "splits" / (spec.name + ".json"), split_manifest(split));
  }
  return warnings;
}

inline StageSpec train_toy_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  return {"train-toy",
          detail::sections(c, {"task", "toy"}),
          {{"init_seed", c.init_seed}, {"train_seed", c.toy_train.seed}},
          {lay.train_data(), lay.eval_data()},
          {},
          {lay.toy()}};
}

inline std::vector<std::string> train_toy(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  const auto train = toy::read_dataset(lay.train_data());
  const auto eval = toy::read_dataset(lay.eval_data());
  auto params = toy::init_model(c.model, c.init_seed);
  const auto rep = toy::train_task(params, train.samples, eval.samples, toy::answer_ids(c.task), c.toy_train);
  fs::create_directories(lay.toy());
  toy::save_model(params, lay.model());
  detail::write_json(lay.toy() / "train_report.json", toy::to_json(rep));
  std::vector<std::string> warnings;
  if (rep.heldout.accuracy < 0.75)
    warnings.push_back("toy model held-out accuracy is " + json(rep.heldout.accuracy).dump() +
                       "; causal stages will be uninformative");
  return warnings;
}

inline StageSpec export_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  StageSpec s{"export-acts", detail::sections(c, {"export"}), json::object(), {}, {}, {lay.exported()}};
  if (c.export_source == "toy") {
    s.inputs = {lay.model(), lay.train_data(), lay.eval_data(), lay.neutral_data()};
    s.outputs.push_back(lay.shards());
  } else {
    s.inputs = {c.eval_shards};
    s.optional_inputs = {c.train_shards, c.neutral_shards};
  }
  return s;
}

// Toy source: captures block outputs for every configured layer. Dump
// source: checks the exporter's shards parse and agree on d_model per layer.
inline std::vector<std::string> export_acts(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  std::vector<std::string> warnings;
  if (c.export_source == "toy") {
    const auto model = toy::load_model(lay.model());
    for (auto l : c.layers)
      if (l >= model.config.n_layers)
        throw ConfigError("run.layers: layer " + std::to_string(l) + " does not exist in the toy model");
    for (const auto& [dir, data] : {std::pair{c.train_shards, lay.train_data()}, std::pair{c.eval_shards, lay.eval_data()},
                                    std::pair{c.neutral_shards, lay.neutral_data()}}) {
      fs::create_directories(dir);
      const auto ds = toy::read_dataset(data);
      for (const auto& s : ds.samples) {
        const auto tp = toy::forward(model, s.input());
        for (auto l : c.layers) write_shard(toy::shard_from_tape(tp, s, l), dir / shard_filename(s.sample_id, l));
      }
    }
  }
  json index = json::object();
  for (const auto& [name, dir] : {std::pair{"train", c.train_shards}, std::pair{"eval", c.eval_shards},
                                  std::pair{"neutral", c.neutral_shards}}) {
    if (!fs::is_directory(dir)) {
      warnings.push_back(std::string(name) + " shards not found at " + dir.string());
      continue;
    }
    json layers = json::object();
    for (auto l : c.layers) {
      const auto files = list_shards(dir, l);
      std::size_t tokens = 0;
      std::optional<std::size_t> d;
      for (const auto& f : files) {
        const auto sh = read_shard(f);
        if (d && *d != sh.d_model())
          throw DimensionError(f.string() + ": d_model " + std::to_string(sh.d_model()) + " differs from " +
                               std::to_string(*d));
        d = sh.d_model();
        tokens += sh.n_tokens();
      }
      if (files.empty()) warnings.push_back(std::string(name) + ": no layer-" + std::to_string(l) + " shards");
      layers[std::to_string(l)] = {{"shards", files.size()}, {"tokens", tokens}, {"d_model", d.value_or(0)}};
    }
    index[name] = {{"dir", display_path(dir, c.out)}, {"layers", layers}};
  }
  fs::create_directories(lay.exported());
  detail::write_json(lay.exported() / "index.json", index);
  return warnings;
}

inline StageSpec train_sae_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  StageSpec s{"train-sae",
              detail::sections(c, {"sae"}),
              {{"init_seed", c.sae_init_seed}, {"base_seed", c.base_train.seed}, {"adapted_seed", c.adapted_train.seed}},
              {c.eval_shards},
              {},
              {lay.sae()}};
  if (!c.base_sae_template || !c.adapted_sae_template) s.inputs.push_back(c.train_shards);
  if (c.base_sae_template) {
    auto b = detail::sae_paths(c, true, false);
    s.inputs.insert(s.inputs.end(), b.begin(), b.end());
  }
  return s;
}

// Base: random init trained under the base regime (or a given checkpoint).
// Adapted: warm start from base, trained under the adapted regime.
inline std::vector<std::string> train_sae(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  fs::create_directories(lay.sae());
  std::vector<std::string> warnings;
  if (c.base_sae_template && c.adapted_sae_template) {
    warnings.push_back("both SAE checkpoints are given in paths; nothing to train");
    return warnings;
  }
  for (auto l : c.layers) {
    FileShardStream tr(list_shards(c.train_shards, l));
    FileShardStream held(list_shards(c.eval_shards, l));
    if (tr.size() == 0 || held.size() == 0)
      throw EmptyInputError("train-sae: no layer-" + std::to_string(l) + " shards");
    const std::size_t D = tr.get(0).d_model();
    auto save = [&](const std::string& kind, const TrainResult& r, const TrainConfig& tc, MaskRegime regime) {
      const auto stem = kind + ".L" + std::to_string(l);
      save_sae(r.params, lay.sae() / (stem + ".saep"));
      detail::write_json(lay.sae() / (stem + ".json"),
                         {{"train_config", to_json(tc)}, {"regime", to_string(regime)}, {"eval", to_json(r.report)}});
      bin::write_text(lay.sae() / (stem + ".fvu_curve.csv"), fvu_curve_csv(r.report));
    };
    SaeParams base;
    if (c.base_sae_template) {
      base = load_sae(c.base_sae(l));
    } else {
      const auto r = train(init_random(D, c.n_features, c.k, c.sae_init_seed + l, l), tr, held, c.base_regime,
                           c.base_train);
      save("base", r, c.base_train, c.base_regime);
      base = r.params;
    }
    if (!c.adapted_sae_template) {
      const auto r = train(init_warm(base, D, base.f(), c.k), tr, held, c.adapted_regime, c.adapted_train);
      save("adapted", r, c.adapted_train, c.adapted_regime);
    }
  }
  return warnings;
}

inline StageSpec eval_fvu_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  StageSpec s{"eval-fvu", detail::sections(c, {}), json::object(), {c.eval_shards}, {}, {lay.fvu()}};
  const auto saes = detail::sae_paths(c, true, true);
  s.inputs.insert(s.inputs.end(), saes.begin(), saes.end());
  return s;
}

inline std::vector<std::string> eval_fvu_stage(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  fs::create_directories(lay.fvu());
  json all = json::object();
  for (auto l : c.layers) {
    const auto shards = detail::load_layer(c.eval_shards, l);
    std::vector<std::pair<std::string, EvalReport>> cols;
    json layer = json::object();
    for (const auto& [kind, sae] : {std::pair{"base", load_sae(c.base_sae(l))}, std::pair{"adapted", load_sae(c.adapted_sae(l))}})
      for (auto regime : {MaskRegime::Full, MaskRegime::TextOnly, MaskRegime::ImageOnly}) {
        const std::string name = std::string(kind) + "_" + to_string(regime);
        const auto rep = eval_fvu(sae, shards, regime);
        layer[name] = to_json(rep);
        cols.push_back({name, rep});
      }
    all[std::to_string(l)] = layer;
    bin::write_text(lay.fvu() / ("fvu_summary.L" + std::to_string(l) + ".csv"), fvu_summary_csv(cols));
  }
  detail::write_json(lay.fvu() / "fvu.json", all);
  return {};
}

inline StageSpec diff_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  StageSpec s{"diff", detail::sections(c, {"diff"}), json::object(), {c.eval_shards}, {}, {lay.diff()}};
  const auto saes = detail::sae_paths(c, true, true);
  s.inputs.insert(s.inputs.end(), saes.begin(), saes.end());
  return s;
}

inline std::vector<std::string> diff_stage(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  FeatureTable table;
  std::vector<std::string> warnings;
  for (auto l : c.layers) {
    const auto base = load_sae(c.base_sae(l));
    const auto adapted = load_sae(c.adapted_sae(l));
    const auto shards = detail::load_layer(c.eval_shards, l);
    const auto cache = build_code_cache(adapted, shards);
    const auto cos = decoder_cosine(base, adapted);
    const auto ev = visual_energy(cache, c.energy_mask);
    const auto t = make_feature_table(l, cos, ev);
    table.insert(table.end(), t.begin(), t.end());
    const auto zero = std::count(cos.zero_norm.begin(), cos.zero_norm.end(), true);
    if (zero) warnings.push_back("layer " + std::to_string(l) + ": " + std::to_string(zero) + " zero-norm decoder columns");
  }
  const auto sel = select_adapted(table, c.epsilon, c.p_cos, c.scope);
  fs::create_directories(lay.diff());
  bin::write_text(lay.diff() / "features.csv", feature_table_csv(table));
  detail::write_json(lay.diff() / "features.json", feature_table_json(table));
  bin::write_text(lay.diff() / "layer_stats.csv", layer_stats_csv(layer_stats(table)));
  std::vector<std::string> ids;
  for (const auto& f : sel) ids.push_back(f.str());
  detail::write_json(lay.diff() / "adapted.json", ids);
  if (!c.sweep_eps.empty() && !c.sweep_p.empty())
    bin::write_text(lay.diff() / "sweep.csv",
                    sweep_csv(threshold_sweep(table, c.sweep_eps, c.sweep_p, c.epsilon, c.p_cos, c.scope)));
  return warnings;
}

inline StageSpec shift_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  StageSpec s{"shift",
              detail::sections(c, {"shift"}),
              json::object(),
              {lay.diff() / "features.json", c.eval_shards},
              {c.neutral_shards},
              {lay.shift()}};
  const auto saes = detail::sae_paths(c, false, true);
  s.inputs.insert(s.inputs.end(), saes.begin(), saes.end());
  return s;
}

inline std::vector<std::string> shift_stage(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  auto table = feature_table_from_json(detail::read_json(lay.diff() / "features.json"));
  std::vector<std::string> warnings;
  fs::create_directories(lay.shift() / "splits");
  json reports = json::array();
  for (auto l : c.layers) {
    const auto adapted = load_sae(c.adapted_sae(l));
    const auto shards = detail::load_layer(c.eval_shards, l);
    const auto cache = build_code_cache(adapted, shards);
    const auto base = build_split<ActivationShard>(shards, c.base_split);
    const auto shifted = build_split<ActivationShard>(shards, c.shift_split);
    for (const auto* sp : {&base, &shifted}) {
      warnings.insert(warnings.end(), sp->warnings.begin(), sp->warnings.end());
      detail::write_json(lay.shift() / "splits" / (sp->name + ".L" + std::to_string(l) + ".json"), split_manifest(*sp));
    }
    auto rep = compute_shift(cache, base, shifted, c.shift_regime, c.thresholds);
    select_candidates(rep);
    std::vector<ActivationShard> neutral;
    if (fs::is_directory(c.neutral_shards)) neutral = load_shards(c.neutral_shards, l);
    if (neutral.empty()) warnings.push_back("layer " + std::to_string(l) + ": no neutral re-runs; candidates are unverified");
    const auto neutral_cache = build_code_cache(adapted, neutral);
    LexicalConfig lc;
    lc.top_k = c.lexical_top_k;
    lc.regime = c.shift_regime;
    lc.pool = shifted.sample_ids;
    lexical_filter(rep, cache, neutral_cache, lc);
    merge_shift(table, rep);
    const auto stem = "shift.L" + std::to_string(l);
    bin::write_text(lay.shift() / (stem + ".csv"), shift_csv(rep));
    bin::write_text(lay.shift() / ("frequency_hist.L" + std::to_string(l) + ".csv"), frequency_histogram_csv(rep));
    bin::write_text(lay.shift() / ("delta_p_hist.L" + std::to_string(l) + ".csv"), delta_p_histogram_csv(rep));
    reports.push_back(to_json(rep));
  }
  detail::write_json(lay.shift() / "shift.json", reports);
  bin::write_text(lay.shift() / "features.csv", feature_table_csv(table));
  detail::write_json(lay.shift() / "features.json", feature_table_json(table));
  std::vector<std::string> ids;
  for (const auto& s : table)
    if (s.flags.selected()) ids.push_back(s.id.str());
  detail::write_json(lay.shift() / "selected.json", ids);
  if (ids.empty()) warnings.push_back("no feature is both adapted and a lexically robust shift candidate");
  return warnings;
}

inline std::vector<fs::path> target_inputs(const PipelineConfig& c, const Layout& lay) {
  if (c.features) return {};
  return {lay.shift() / "selected.json"};
}

inline StageSpec patch_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  StageSpec s{"patch", detail::sections(c, {"causal", "shift"}), json::object(),
              {lay.model(), lay.eval_data(), c.eval_shards}, {}, {lay.patch()}};
  const auto t = target_inputs(c, lay);
  s.inputs.insert(s.inputs.end(), t.begin(), t.end());
  const auto saes = detail::sae_paths(c, false, true);
  s.inputs.insert(s.inputs.end(), saes.begin(), saes.end());
  return s;
}

inline std::vector<std::string> patch_stage(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  const auto toy_in = detail::load_toy(lay);
  const auto targets = detail::target_features(c, lay);
  const auto mean_visual = toy::mean_embedding(toy_in.model, std::span<const toy::TaskSample>(toy_in.eval.samples));
  fs::create_directories(lay.patch());
  std::vector<std::string> warnings;
  std::map<std::uint32_t, std::pair<SaeParams, CodeCache>> per_layer;
  for (const auto& f : targets) {
    detail::require_layer(c, f);
    if (!per_layer.count(f.layer)) {
      auto sae = load_sae(c.adapted_sae(f.layer));
      auto cache = build_code_cache(sae, detail::load_layer(c.eval_shards, f.layer));
      per_layer.emplace(f.layer, std::pair{std::move(sae), std::move(cache)});
    }
    const auto& [sae, cache] = per_layer.at(f.layer);
    const auto top = detail::feature_top(c, cache, toy_in.eval.samples, f.index);
    if (top.empty()) {
      warnings.push_back(f.str() + ": never fires on the shift split; no attribution");
      continue;
    }
    const auto rep = causal::attribute_feature(toy_in.model, sae, f.index, top, mean_visual, c.attribution);
    detail::write_json(detail::feature_file(lay.patch(), f, ".json"), to_json(rep));
    bin::write_text(detail::feature_file(lay.patch(), f, ".method_a.csv"), causal::head_scores_csv(rep.method_a));
    bin::write_text(detail::feature_file(lay.patch(), f, ".method_b.csv"), causal::head_scores_csv(rep.method_b));
    // Attention of the top heads over the image, on the top sample.
    const auto tape = toy::forward(toy_in.model, top.front().input());
    for (const auto& head : rep.top_a) {
      unsigned hl = 0, hh = 0;
      if (std::sscanf(head.c_str(), "L%uH%u", &hl, &hh) != 2) continue;
      bin::write_text(detail::feature_file(lay.patch(), f, ".attn." + head + ".csv"),
                      causal::attention_grid_csv(tape, hl, hh, c.task.grid));
    }
  }
  return warnings;
}

inline StageSpec ablate_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  StageSpec s{"ablate", detail::sections(c, {"causal", "shift"}), {{"seeds", c.ablation.seeds}},
              {lay.model(), lay.eval_data(), c.eval_shards, lay.diff() / "features.json"},
              {lay.shift() / "features.json"}, {lay.ablate()}};
  const auto t = target_inputs(c, lay);
  s.inputs.insert(s.inputs.end(), t.begin(), t.end());
  const auto saes = detail::sae_paths(c, false, true);
  s.inputs.insert(s.inputs.end(), saes.begin(), saes.end());
  return s;
}

inline std::vector<std::string> ablate_stage(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  const auto toy_in = detail::load_toy(lay);
  const auto targets = detail::target_features(c, lay);
  const auto table = detail::load_table(lay);
  std::map<FeatureId, const FeatureStats*> stats;
  for (const auto& s : table) stats[s.id] = &s;
  const auto general = toy::filter_kind(toy_in.eval.samples, "exists");
  const auto ids = toy::answer_ids(c.task);
  std::vector<std::string> warnings;
  std::vector<causal::AblationReport> rows;
  std::map<std::uint32_t, std::pair<SaeParams, CodeCache>> per_layer;
  for (const auto& f : targets) {
    detail::require_layer(c, f);
    if (!per_layer.count(f.layer)) {
      auto sae = load_sae(c.adapted_sae(f.layer));
      auto cache = build_code_cache(sae, detail::load_layer(c.eval_shards, f.layer));
      per_layer.emplace(f.layer, std::pair{std::move(sae), std::move(cache)});
    }
    const auto& [sae, cache] = per_layer.at(f.layer);
    const auto top = detail::feature_top(c, cache, toy_in.eval.samples, f.index);
    const auto relation = causal::dominant_relation(top);
    if (!relation) {
      warnings.push_back(f.str() + ": no relation among its top samples; not ablated");
      continue;
    }
    std::vector<double> e_v(sae.f(), 0.0);
    for (std::uint32_t g = 0; g < sae.f(); ++g)
      if (auto it = stats.find({f.layer, g}); it != stats.end()) e_v[g] = it->second->e_v;
    const double odds = stats.count(f) ? stats.at(f)->odds_ratio : 1.0;
    rows.push_back(causal::ablation_eval(toy_in.model, sae, f.index, *relation,
                                         toy::filter_kind(toy_in.eval.samples, *relation), general, e_v, odds, ids,
                                         c.ablation));
  }
  fs::create_directories(lay.ablate());
  json arr = json::array();
  for (const auto& r : rows) arr.push_back(to_json(r));
  detail::write_json(lay.ablate() / "ablation.json", arr);
  bin::write_text(lay.ablate() / "ablation.csv", causal::ablation_table_csv(rows));
  return warnings;
}

inline StageSpec interp_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  json cfg = detail::sections(c, {"interp", "shift"});
  if (!c.mock_api) cfg["interp"].erase("client");  // endpoint details do not change the work
  StageSpec s{"interp", cfg, {{"seed", c.interp.validation.seed}}, {c.eval_shards},
              {lay.eval_data(), lay.patch()}, {lay.interp()}};
  const auto t = target_inputs(c, lay);
  s.inputs.insert(s.inputs.end(), t.begin(), t.end());
  const auto saes = detail::sae_paths(c, false, true);
  s.inputs.insert(s.inputs.end(), saes.begin(), saes.end());
  return s;
}

inline std::vector<std::string> interp_stage(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Layout lay{c.out};
  const auto targets = detail::target_features(c, lay);
  std::map<std::string, std::string> contexts;
  if (fs::exists(lay.eval_data()))
    for (const auto& s : toy::read_dataset(lay.eval_data()).samples) contexts[s.sample_id] = detail::scene_text(s);
  std::unique_ptr<interp::ApiClient> client;
  if (c.mock_api) client = std::make_unique<interp::MockClient>(interp::keyword_mock());
  else if (ctx.make_client) client = ctx.make_client();
  else throw ConfigError("interp: no API client available (use --mock-api)");

  fs::create_directories(lay.interp());
  std::vector<std::string> warnings;
  std::map<std::uint32_t, std::pair<CodeCache, CodeCache>> per_layer;  // shift, base splits
  for (const auto& f : targets) {
    detail::require_layer(c, f);
    if (!per_layer.count(f.layer)) {
      const auto sae = load_sae(c.adapted_sae(f.layer));
      const auto shards = detail::load_layer(c.eval_shards, f.layer);
      const auto cache = build_code_cache(sae, shards);
      const auto sp = build_split<ActivationShard>(shards, c.shift_split);
      const auto bs = build_split<ActivationShard>(shards, c.base_split);
      per_layer.emplace(f.layer, std::pair{detail::cache_subset(cache, sp.sample_ids), detail::cache_subset(cache, bs.sample_ids)});
    }
    const auto& [shifted, base] = per_layer.at(f.layer);
    const interp::NamedCache splits[] = {{c.shift_split.name, &shifted}, {c.base_split.name, &base}};
    const auto sel = interp::select_samples(f, splits, {c.base_split.name, &base}, c.interp, &contexts);
    if (sel.warning) warnings.push_back(*sel.warning);
    if (sel.examples.empty()) continue;
    if (sel.positives.empty() || sel.negatives.empty()) {
      warnings.push_back(f.str() + ": too few samples for validation; skipped");
      continue;
    }
    for (auto v : c.variants) {
      std::string evidence;
      if (v == interp::Variant::Overlay) {
        const auto a = detail::feature_file(lay.patch(), f, ".method_a.csv");
        const auto b = detail::feature_file(lay.patch(), f, ".method_b.csv");
        if (!fs::exists(a) || !fs::exists(b)) {
          warnings.push_back(f.str() + ": no attribution output; OVERLAY skipped");
          continue;
        }
        evidence = "Method A\n" + bin::read_text(a) + "Method B\n" + bin::read_text(b);
      }
      const auto rec = interp::interp_feature(f, sel, *client, v, c.interp, evidence);
      detail::write_json(detail::feature_file(lay.interp(), f, "." + interp::to_string(v) + ".json"), to_json(rec));
    }
  }
  return warnings;
}

inline StageSpec report_spec(const PipelineConfig& c) {
  const Layout lay{c.out};
  return {"report",
          detail::sections(c, {}),
          json::object(),
          {lay.diff() / "features.json"},
          {lay.shift() / "features.json", lay.shift() / "shift.json", lay.patch(), lay.ablate() / "ablation.json",
           lay.interp()},
          {lay.report()}};
}

// One JSON object keyed by feature_id. Every feature carries the same keys;
// stages that did not run for it leave null.
inline json build_report(const PipelineConfig& c) {
  const Layout lay{c.out};
  const auto table = detail::load_table(lay);
  std::map<std::string, json> shift_rows, ablation;
  if (fs::exists(lay.shift() / "shift.json"))
    for (const auto& rep : detail::read_json(lay.shift() / "shift.json"))
      for (const auto& row : rep["candidates"])
        shift_rows[row["feature_id"]] = {{"p_base", row["p_base"]},
                                         {"p_shift", row["p_shift"]},
                                         {"base_split", rep["base_split"]},
                                         {"shift_split", rep["shift_split"]},
                                         {"lexical", row["lexical"]},
                                         {"orig_freq", row["orig_freq"]},
                                         {"neutral_freq", row["neutral_freq"]}};
  if (fs::exists(lay.ablate() / "ablation.json"))
    for (const auto& r : detail::read_json(lay.ablate() / "ablation.json")) ablation[r["feature_id"]] = r;

  json features = json::object();
  std::size_t n_adapted = 0, n_cand = 0, n_robust = 0;
  std::vector<std::string> selected;
  for (const auto& s : table) {
    const auto id = s.id.str();
    n_adapted += s.flags.adapted();
    n_cand += s.flags.shift_candidate();
    n_robust += s.flags.lexically_robust();
    if (s.flags.selected()) selected.push_back(id);
    json entry{{"stats", to_json(s)}, {"shift", nullptr}, {"attribution", nullptr}, {"ablation", nullptr},
               {"interp", {{"RAW", nullptr}, {"OVERLAY", nullptr}}}};
    if (auto it = shift_rows.find(id); it != shift_rows.end()) entry["shift"] = it->second;
    if (const auto p = detail::feature_file(lay.patch(), s.id, ".json"); fs::exists(p)) {
      const auto a = detail::read_json(p);
      json att = json::object();
      for (const char* k : {"n_samples", "sites", "score_positions", "objective_positions", "layer_a", "layer_b",
                            "top_a", "bottom_a", "top_b", "bottom_b", "overlap", "spearman_a", "spearman_b"})
        att[k] = a[k];
      std::set<std::string> ov = a["overlap"].get<std::set<std::string>>();
      att["overlap_label"] = causal::overlap_label(ov);
      att["file"] = display_path(p, c.out);
      entry["attribution"] = att;
    }
    if (auto it = ablation.find(id); it != ablation.end()) entry["ablation"] = it->second;
    for (const char* v : {"RAW", "OVERLAY"})
      if (const auto p = detail::feature_file(lay.interp(), s.id, std::string(".") + v + ".json"); fs::exists(p))
        entry["interp"][v] = detail::read_json(p);
    features[id] = entry;
  }
  return {{"schema", kReportSchema},
          {"layers", c.layers},
          {"summary",
           {{"n_features", table.size()},
            {"n_adapted", n_adapted},
            {"n_shift_candidates", n_cand},
            {"n_lexically_robust", n_robust},
            {"n_selected", selected.size()},
            {"selected", selected}}},
          {"features", features}};
}

inline std::vector<std::string> report_stage(const RunContext& ctx) {
  const Layout lay{ctx.cfg.out};
  fs::create_directories(lay.report());
  detail::write_json(lay.report() / "report.json", build_report(ctx.cfg));
  return {};
}

// ---------------------------------------------------------------------------

struct StageResult {
  std::string stage;
  bool reused = false;
  std::vector<std::string> warnings;
  fs::path manifest;
};

inline StageResult run_named_stage(const std::string& name, const RunContext& ctx) {
  using Body = std::vector<std::string> (*)(const RunContext&);
  using Spec = StageSpec (*)(const PipelineConfig&);
  static const std::map<std::string, std::pair<Spec, Body>> table{
      {"gen-data", {gen_data_spec, gen_data}},       {"train-toy", {train_toy_spec, train_toy}},
      {"export-acts", {export_spec, export_acts}},   {"train-sae", {train_sae_spec, train_sae}},
      {"eval-fvu", {eval_fvu_spec, eval_fvu_stage}}, {"diff", {diff_spec, diff_stage}},
      {"shift", {shift_spec, shift_stage}},          {"patch", {patch_spec, patch_stage}},
      {"ablate", {ablate_spec, ablate_stage}},       {"interp", {interp_spec, interp_stage}},
      {"report", {report_spec, report_stage}}};
  const auto it = table.find(name);
  if (it == table.end()) throw ConfigError("unknown stage '" + name + "'");
  const auto& c = ctx.cfg;
  if ((name == "gen-data" || name == "train-toy") && c.export_source != "toy")
    throw ConfigError(name + " needs export.source = \"toy\"");
  if ((name == "patch" || name == "ablate") && c.export_source != "toy")
    throw ConfigError(name + " runs on the toy model; it needs export.source = \"toy\"");
  const auto spec = it->second.first(c);
  const auto outcome = run_stage(c.out, spec, ctx.config_hash, [&] { return it->second.second(ctx); });
  return {name, outcome.reused, outcome.manifest.value("warnings", std::vector<std::string>{}),
          manifest_path(c.out, name)};
}

}  // namespace saediff::pipeline
