// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparse SAE codes for every token of a shard collection, computed once and
// shared by the energy, firing-frequency and top-sample statistics.

#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/sae.hpp"
#include "saediff/sae_train.hpp"

namespace saediff {

struct FeatureId {
  std::uint32_t layer = 0;
  std::uint32_t index = 0;

  std::string str() const { return "L" + std::to_string(layer) + "F" + std::to_string(index); }
  auto operator<=>(const FeatureId&) const = default;
};

struct CodedSample {
  std::string sample_id;
  std::string question;
  std::set<std::string> split_tags;
  VisualSpan visual;
  std::vector<SparseCode> tokens;

  float activation(std::size_t t, std::uint32_t f) const {
    const auto& c = tokens[t];
    const auto it = std::lower_bound(c.index.begin(), c.index.end(), f);
    return (it != c.index.end() && *it == f) ? c.value[static_cast<std::size_t>(it - c.index.begin())] : 0.f;
  }
};

struct CodeCache {
  std::uint32_t layer = 0;
  std::size_t n_features = 0;
  std::vector<CodedSample> samples;
};

inline CodeCache build_code_cache(const SaeParams& sae, ShardStream& shards) {
  CodeCache cache;
  cache.layer = sae.layer;
  cache.n_features = sae.f();
  cache.samples.reserve(shards.size());
  for (std::size_t s = 0; s < shards.size(); ++s) {
    const auto& sh = shards.get(s);
    if (sh.d_model() != sae.d()) throw DimensionError("code cache: shard d_model differs from SAE D");
    CodedSample cs{sh.sample_id, sh.question, sh.split_tags, sh.visual, {}};
    cs.tokens.reserve(sh.n_tokens());
    for (std::size_t t = 0; t < sh.n_tokens(); ++t) cs.tokens.push_back(encode(sae, sh.hidden.row(t)));
    cache.samples.push_back(std::move(cs));
  }
  return cache;
}

inline CodeCache build_code_cache(const SaeParams& sae, std::span<const ActivationShard> shards) {
  MemoryShardStream s(shards);
  return build_code_cache(sae, s);
}

struct SampleActivation {
  std::string sample_id;
  float max_activation = 0;
};

// Samples ranked by their largest activation of feature f over the tokens
// `regime` selects; samples where f never fires are left out. Ties are
// ordered by sample_id. `pool`, when given, restricts the candidates.
inline std::vector<SampleActivation> top_samples(const CodeCache& cache, std::uint32_t f, std::size_t k,
                                                 MaskRegime regime = MaskRegime::Full,
                                                 const std::set<std::string>* pool = nullptr) {
  std::vector<SampleActivation> all;
  for (const auto& s : cache.samples) {
    if (pool && !pool->count(s.sample_id)) continue;
    float best = 0;
    for (std::size_t t = 0; t < s.tokens.size(); ++t)
      if (regime_selects(s.visual, regime, t)) best = std::max(best, s.activation(t, f));
    if (best > 0) all.push_back({s.sample_id, best});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.max_activation > b.max_activation ||
           (a.max_activation == b.max_activation && a.sample_id < b.sample_id);
  });
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace saediff
