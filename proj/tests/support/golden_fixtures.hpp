// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Objects behind the checked-in format fixtures in tests/golden/. Built from
// exact values (no RNG distributions or libm) so the bytes are identical on
// every platform.

#pragma once

#include <limits>

#include "saediff/actstore.hpp"
#include "saediff/sae.hpp"
#include "saediff/toymodel/params.hpp"

namespace saediff::testing {

// Dyadic rationals: exact in float, no libm involved.
inline float golden_value(std::size_t i, std::size_t j) {
  return (static_cast<float>((i * 7 + j * 13) % 17) - 8.f) / 8.f * static_cast<float>(1 + i % 3);
}

inline ActivationShard golden_shard() {
  ActivationShard s;
  s.layer = 3;
  s.sample_id = "golden-0";
  s.question = "is the cup left of the dog ?";
  s.split_tags = {"spatial", "vqa"};
  s.visual = {1, 3};
  s.hidden = Matrix<float>(7, 5);
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t d = 0; d < 5; ++d) s.hidden(t, d) = golden_value(t, d);
  s.hidden(0, 0) = -0.0f;
  s.hidden(6, 4) = std::numeric_limits<float>::denorm_min();
  s.hidden(5, 3) = 3.0e38f;
  return s;
}

inline SaeParams golden_sae() {
  SaeParams p;
  p.layer = 1;
  p.k = 2;
  p.w_enc = Matrix<float>(6, 4);
  p.w_dec = Matrix<float>(4, 6);
  for (std::size_t f = 0; f < 6; ++f)
    for (std::size_t d = 0; d < 4; ++d) {
      p.w_enc(f, d) = golden_value(f, d);
      p.w_dec(d, f) = golden_value(d + 11, f);
    }
  p.b_enc = {-0.5f, 0.25f, 0.f, 1.f, -1.f, 0.125f};
  p.b_dec = {0.1f, -0.2f, 0.3f, -0.4f};
  return p;
}

inline toy::ModelParams<float> golden_model() {
  toy::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 4;
  c.d_head = 2;
  c.d_mlp = 6;
  c.vocab_size = 5;
  c.n_visual_tokens = 2;
  c.d_patch = 3;
  c.max_seq = 6;
  auto p = toy::init_model(c, 0);
  std::size_t n = 0;
  p.visit([&](const std::string&, Matrix<float>& m) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = golden_value(i + n, j);
    ++n;
  });
  return p;
}

}  // namespace saediff::testing
