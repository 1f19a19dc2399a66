// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Residual-stream capture from the toy model into activation shards.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/toymodel/forward.hpp"
#include "saediff/toymodel/task.hpp"

namespace saediff::toy {

inline ActivationShard shard_from_tape(const Tape<float>& tp, const TaskSample& s, std::uint32_t layer) {
  ActivationShard sh;
  sh.layer = layer;
  sh.hidden = tp.site(Site::resid(layer));
  sh.visual = {0, tp.n_visual};
  sh.sample_id = s.sample_id;
  sh.split_tags = s.split_tags;
  sh.question = s.question;
  return sh;
}

// One forward per sample; returns shards keyed by layer, in sample order.
inline std::map<std::uint32_t, std::vector<ActivationShard>> capture_layers(const ModelParams<float>& p,
                                                                            std::span<const TaskSample> samples,
                                                                            const std::vector<std::uint32_t>& layers,
                                                                            const Hooks<float>& hooks = {}) {
  for (auto l : layers) check_site(p.config, Site::resid(l));
  std::map<std::uint32_t, std::vector<ActivationShard>> out;
  for (const auto& s : samples) {
    const auto tp = forward(p, s.input(), hooks);
    for (auto l : layers) out[l].push_back(shard_from_tape(tp, s, l));
  }
  return out;
}

inline std::vector<ActivationShard> capture_layer(const ModelParams<float>& p, std::span<const TaskSample> samples,
                                                  std::uint32_t layer) {
  return std::move(capture_layers(p, samples, {layer})[layer]);
}

}  // namespace saediff::toy
