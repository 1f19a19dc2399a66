// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy models shared across test files. The trained model is built once per
// process, or loaded from the checkpoint the ctest fixture writes when
// SAEDIFF_TOY_CACHE names one.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "saediff/toymodel/train.hpp"

namespace saediff::testing {

inline toy::ModelConfig toy_config_for(const toy::TaskConfig& tc, std::size_t n_layers = 2, std::size_t n_heads = 4,
                                       std::size_t d_model = 32) {
  toy::ModelConfig mc;
  mc.n_layers = n_layers;
  mc.n_heads = n_heads;
  mc.d_model = d_model;
  mc.d_head = d_model / n_heads;
  mc.d_mlp = 2 * d_model;
  mc.vocab_size = toy::Vocab(tc.objects).size();
  mc.n_visual_tokens = tc.n_visual();
  mc.d_patch = tc.d_patch;
  mc.max_seq = tc.n_visual() + 12;
  return mc;
}

struct TrainedToy {
  toy::TaskConfig task;
  toy::ModelParams<float> params;
  std::vector<toy::TaskSample> train, heldout;
  toy::ToyTrainReport report;
  toy::AnswerIds ids;
};

inline toy::ToyTrainConfig trained_toy_config() {
  toy::ToyTrainConfig cfg;
  cfg.seed = 11;
  return cfg;
}

inline TrainedToy trained_toy_data() {
  TrainedToy out;
  out.train = toy::gen_task(out.task, 4000, 1, "tr");
  out.heldout = toy::gen_task(out.task, 1000, 2, "ho");
  out.params = toy::init_model(toy_config_for(out.task), 3);
  out.ids = toy::answer_ids(out.task);
  return out;
}

inline TrainedToy train_toy() {
  auto out = trained_toy_data();
  out.report = toy::train_task(out.params, out.train, out.heldout, out.ids, trained_toy_config());
  return out;
}

inline std::filesystem::path report_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  return p.replace_extension(".json");
}

// Writes checkpoint and report via temporary files so a reader never sees a
// partial pair.
inline void save_trained_toy(const TrainedToy& t, const std::filesystem::path& ckpt) {
  std::filesystem::create_directories(ckpt.parent_path());
  const auto tmp_ckpt = ckpt.string() + ".tmp", tmp_rep = report_path(ckpt).string() + ".tmp";
  toy::save_model(t.params, tmp_ckpt);
  std::ofstream(tmp_rep) << toy::to_json(t.report).dump();
  std::filesystem::rename(tmp_rep, report_path(ckpt));
  std::filesystem::rename(tmp_ckpt, ckpt);
}

inline const TrainedToy& trained_toy() {
  static const TrainedToy t = [] {
    const char* cache = std::getenv("SAEDIFF_TOY_CACHE");
    if (cache && std::filesystem::exists(cache) && std::filesystem::exists(report_path(cache))) {
      auto out = trained_toy_data();
      out.params = toy::load_model(cache);
      const auto j = nlohmann::json::parse(std::ifstream(report_path(cache)));
      out.report.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
      out.report.train = toy::evaluate(out.params, out.train, out.ids);
      out.report.heldout = toy::evaluate(out.params, out.heldout, out.ids);
      return out;
    }
    return train_toy();
  }();
  return t;
}

}  // namespace saediff::testing
