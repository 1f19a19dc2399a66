// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// sae-diff: command-line driver for the pipeline stages.
//
// Exit codes: 0 success, 1 a stage or config error (JSON on stderr),
// 2 usage error.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "saediff/autointerp/http_client.hpp"
#include "saediff/pipeline/stages.hpp"

namespace {

namespace fs = std::filesystem;
namespace pl = saediff::pipeline;
using nlohmann::json;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint32_t> layers;
  bool mock_api = false;
};

int fail(const std::string& kind, const std::string& message, const std::string& stage,
         const std::vector<std::string>& details = {}) {
  json e{{"kind", kind}, {"message", message}, {"stage", stage.empty() ? json(nullptr) : json(stage)}};
  if (!details.empty()) e["errors"] = details;
  std::cerr << json{{"error", e}}.dump() << "\n";
  return 1;
}

// Reads, overrides and validates. Relative paths in the file resolve
// against the file's directory; --out resolves against the working directory.
pl::ValidationResult validated(const Options& o, fs::path& base_dir) {
  json raw = json::object();
  base_dir = fs::current_path();
  if (!o.config.empty()) {
    raw = pl::read_config_file(o.config);
    base_dir = fs::absolute(o.config).parent_path();
  }
  pl::Overrides ov;
  if (!o.out.empty()) ov.out = fs::absolute(o.out).lexically_normal().string();
  ov.seed = o.seed;
  if (!o.layers.empty()) ov.layers = o.layers;
  ov.mock_api = o.mock_api;
  pl::apply_overrides(raw, ov);
  return pl::validate_config(raw);
}

int run_stages(const Options& o, const std::vector<std::string>& stages, bool skip_interp_without_key) {
  std::string current;
  try {
    fs::path base_dir;
    const auto v = validated(o, base_dir);
    if (!v.ok()) return fail("config", "invalid configuration", "", v.errors);
    const auto cfg = pl::load_pipeline_config(v.normalized, base_dir);
    pl::RunLock lock(cfg.out);
    const pl::RunContext ctx{cfg, pl::config_hash(v.normalized),
                             [&cfg] { return std::make_unique<saediff::interp::HttpClient>(cfg.client); }};
    for (const auto& s : stages) {
      current = s;
      if (s == "interp" && skip_interp_without_key && !cfg.mock_api) {
        const char* key = std::getenv(cfg.client.api_key_env.c_str());
        if (!key || !*key) {
          std::cout << json{{"stage", s}, {"skipped", true},
                            {"warnings", {cfg.client.api_key_env + " is not set and --mock-api was not given"}}}
                           .dump()
                    << "\n";
          continue;
        }
      }
      const auto r = pl::run_named_stage(s, ctx);
      std::cout << json{{"stage", r.stage},
                        {"reused", r.reused},
                        {"warnings", r.warnings},
                        {"manifest", pl::display_path(r.manifest, cfg.out)}}
                       .dump()
                << std::endl;
    }
    return 0;
  } catch (const saediff::Error& e) {
    return fail(e.kind(), e.what(), current);
  } catch (const fs::filesystem_error& e) {
    return fail("io", e.what(), current);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), current);
  }
}

int validate_only(const Options& o) {
  try {
    fs::path base_dir;
    const auto v = validated(o, base_dir);
    if (!v.ok()) return fail("config", "invalid configuration", "validate-config", v.errors);
    std::cout << v.normalized.dump(2) << "\n";
    return 0;
  } catch (const saediff::Error& e) {
    return fail(e.kind(), e.what(), "validate-config");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diff sparse-autoencoder dictionaries before and after multimodal adaptation.", "sae-diff"};
  app.set_version_flag("--version", std::string(pl::kVersion));
  app.require_subcommand(1);

  Options o;
  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", o.out, "run directory (overrides run.out)");
    sub->add_option("--seed", o.seed, "master seed (overrides run.seed)");
    sub->add_option("--layers", o.layers, "comma-separated layers (overrides run.layers)")->delimiter(',');
    sub->add_flag("--mock-api", o.mock_api, "use the offline keyword mock for interpretation");
  };

  std::vector<std::pair<CLI::App*, std::vector<std::string>>> commands;
  const std::map<std::string, std::string> help{
      {"gen-data", "generate the toy task splits"},
      {"train-toy", "train the toy vision-language model"},
      {"export-acts", "capture (toy) or index (dumps) activation shards"},
      {"train-sae", "train the base and warm-started adapted SAEs"},
      {"eval-fvu", "fraction of variance unexplained per regime"},
      {"diff", "decoder cosine and visual energy; flag adapted features"},
      {"shift", "activation shift between splits with the lexical filter"},
      {"patch", "head attribution for the target features"},
      {"ablate", "feature ablation with matched controls"},
      {"interp", "describe and validate the target features"},
      {"report", "merge all stage outputs into report/report.json"}};
  for (const auto& name : pl::stage_names()) {
    auto* sub = app.add_subcommand(name, help.at(name));
    add_common(sub);
    commands.push_back({sub, {name}});
  }
  auto* all = app.add_subcommand("all", "run every stage in order, reusing up-to-date ones");
  add_common(all);
  auto* check = app.add_subcommand("validate-config", "print the normalized config or every error");
  add_common(check);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (check->parsed()) return validate_only(o);
  if (all->parsed()) return run_stages(o, pl::stage_names(), true);
  for (const auto& [sub, stages] : commands)
    if (sub->parsed()) return run_stages(o, stages, false);
  return 2;
}
