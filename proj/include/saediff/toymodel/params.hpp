// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy multimodal decoder: configuration, weights and the TOYM checkpoint.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "saediff/core/binary_io.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/core/matrix.hpp"

namespace saediff::toy {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 32;
  std::size_t d_head = 8;
  std::size_t d_mlp = 128;
  std::size_t vocab_size = 24;
  std::size_t n_visual_tokens = 9;
  std::size_t d_patch = 16;
  std::size_t max_seq = 32;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  for (auto [v, name] : {std::pair{c.n_layers, "n_layers"}, {c.n_heads, "n_heads"}, {c.d_model, "d_model"},
                         {c.d_head, "d_head"}, {c.d_mlp, "d_mlp"}, {c.vocab_size, "vocab_size"},
                         {c.n_visual_tokens, "n_visual_tokens"}, {c.d_patch, "d_patch"}, {c.max_seq, "max_seq"}})
    if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  if (c.d_model != c.n_heads * c.d_head)
    throw ConfigError("model config: d_model (" + std::to_string(c.d_model) + ") != n_heads * d_head (" +
                      std::to_string(c.n_heads * c.d_head) + ")");
  if (c.max_seq <= c.n_visual_tokens) throw ConfigError("model config: max_seq must exceed n_visual_tokens");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},         {"d_model", c.d_model},
          {"d_head", c.d_head},     {"d_mlp", c.d_mlp},             {"vocab_size", c.vocab_size},
          {"n_visual_tokens", c.n_visual_tokens}, {"d_patch", c.d_patch}, {"max_seq", c.max_seq}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_head = j.value("d_head", c.d_model / std::max<std::size_t>(c.n_heads, 1));
  c.d_mlp = j.value("d_mlp", 4 * c.d_model);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_visual_tokens = j.value("n_visual_tokens", c.n_visual_tokens);
  c.d_patch = j.value("d_patch", c.d_patch);
  c.max_seq = j.value("max_seq", c.max_seq);
  validate(c);
  return c;
}

template <class T>
struct LayerParams {
  Matrix<T> ln1_g, ln1_b;        // [1 × d_model]
  Matrix<T> w_q, w_k, w_v, w_o;  // [d_model × d_model], row = output unit (head h owns rows h·d_head…)
  Matrix<T> ln2_g, ln2_b;
  Matrix<T> w1, b1;  // [d_mlp × d_model], [1 × d_mlp]
  Matrix<T> w2, b2;  // [d_model × d_mlp], [1 × d_model]
};

template <class T>
struct ModelParams {
  ModelConfig config;
  Matrix<T> tok_emb;   // [vocab × d_model]
  Matrix<T> pos_emb;   // [max_seq × d_model], indexed by text position
  Matrix<T> proj;      // [d_model × d_patch]
  std::vector<LayerParams<T>> layers;
  Matrix<T> lnf_g, lnf_b;
  Matrix<T> unembed;   // [vocab × d_model]

  // Calls fn(name, tensor) for every weight in a fixed order.
  template <class Fn>
  void visit(Fn&& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    fn("proj", proj);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "ln1_g", L.ln1_g);
      fn(p + "ln1_b", L.ln1_b);
      fn(p + "w_q", L.w_q);
      fn(p + "w_k", L.w_k);
      fn(p + "w_v", L.w_v);
      fn(p + "w_o", L.w_o);
      fn(p + "ln2_g", L.ln2_g);
      fn(p + "ln2_b", L.ln2_b);
      fn(p + "w1", L.w1);
      fn(p + "b1", L.b1);
      fn(p + "w2", L.w2);
      fn(p + "b2", L.b2);
    }
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
    fn("unembed", unembed);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    const_cast<ModelParams*>(this)->visit([&](const std::string& n, Matrix<T>& m) { fn(n, std::as_const(m)); });
  }

  std::size_t n_params() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(config);
    std::vector<const Matrix<T>*> src;
    visit([&](const std::string&, const Matrix<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Matrix<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  static ModelParams zeros(const ModelConfig& c) {
    validate(c);
    ModelParams p;
    p.config = c;
    const auto D = c.d_model;
    p.tok_emb = Matrix<T>(c.vocab_size, D);
    p.pos_emb = Matrix<T>(c.max_seq, D);
    p.proj = Matrix<T>(D, c.d_patch);
    p.layers.resize(c.n_layers);
    for (auto& L : p.layers) {
      L.ln1_g = Matrix<T>(1, D);
      L.ln1_b = Matrix<T>(1, D);
      L.w_q = Matrix<T>(D, D);
      L.w_k = Matrix<T>(D, D);
      L.w_v = Matrix<T>(D, D);
      L.w_o = Matrix<T>(D, D);
      L.ln2_g = Matrix<T>(1, D);
      L.ln2_b = Matrix<T>(1, D);
      L.w1 = Matrix<T>(c.d_mlp, D);
      L.b1 = Matrix<T>(1, c.d_mlp);
      L.w2 = Matrix<T>(D, c.d_mlp);
      L.b2 = Matrix<T>(1, D);
    }
    p.lnf_g = Matrix<T>(1, D);
    p.lnf_b = Matrix<T>(1, D);
    p.unembed = Matrix<T>(c.vocab_size, D);
    return p;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.config == b.config)) return false;
    std::vector<const Matrix<T>*> ma, mb;
    a.visit([&](const std::string&, const Matrix<T>& m) { ma.push_back(&m); });
    b.visit([&](const std::string&, const Matrix<T>& m) { mb.push_back(&m); });
    for (std::size_t i = 0; i < ma.size(); ++i)
      if (!(*ma[i] == *mb[i])) return false;
    return true;
  }
};

// Gaussian init scaled by 1/√fan_in; norms start at g = 1, b = 0.
template <class T = float>
ModelParams<T> init_model(const ModelConfig& c, std::uint64_t seed) {
  auto p = ModelParams<T>::zeros(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  auto fill = [&](Matrix<T>& m, double scale) {
    for (auto& v : m.flat()) v = static_cast<T>(scale * g(rng));
  };
  const double sd = 1.0 / std::sqrt(double(c.d_model));
  fill(p.tok_emb, 1.0);
  fill(p.pos_emb, 0.5);
  fill(p.proj, 1.0 / std::sqrt(double(c.d_patch)));
  for (auto& L : p.layers) {
    L.ln1_g.fill(T(1));
    L.ln2_g.fill(T(1));
    fill(L.w_q, sd);
    fill(L.w_k, sd);
    fill(L.w_v, sd);
    fill(L.w_o, sd / std::sqrt(2.0 * c.n_layers));
    fill(L.w1, sd);
    fill(L.w2, 1.0 / std::sqrt(double(c.d_mlp) * 2.0 * c.n_layers));
  }
  p.lnf_g.fill(T(1));
  fill(p.unembed, sd);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint: "TOYM", version, config JSON, then each tensor in visit order
// as (u64 element count, f32 values).

inline constexpr char kToyMagic[] = "TOYM";
inline constexpr std::uint32_t kToyVersion = 1;

inline std::vector<std::uint8_t> encode_model(const ModelParams<float>& p) {
  bin::Writer w;
  w.magic(std::string_view(kToyMagic, 4));
  w.u32(kToyVersion);
  w.str32(to_json(p.config).dump());
  p.visit([&](const std::string&, const Matrix<float>& m) {
    w.u64(m.size());
    w.f32s(m.flat());
  });
  return w.take();
}

inline ModelParams<float> decode_model(std::span<const std::uint8_t> bytes) {
  bin::Reader r(bytes);
  r.expect_magic(std::string_view(kToyMagic, 4), "toy checkpoint");
  const auto version = r.u32("toy checkpoint");
  if (version != kToyVersion) throw VersionError("toy checkpoint: unsupported version " + std::to_string(version));
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(r.str32("toy checkpoint")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("toy checkpoint: bad config JSON: ") + e.what());
  }
  auto p = ModelParams<float>::zeros(cfg);
  p.visit([&](const std::string& name, Matrix<float>& m) {
    const auto n = r.u64("toy checkpoint");
    if (n != m.size())
      throw FormatError("toy checkpoint: tensor " + name + " has " + std::to_string(n) + " values, config implies " +
                        std::to_string(m.size()));
    r.f32s(m.flat(), "toy checkpoint");
  });
  if (r.remaining() != 0) throw FormatError("toy checkpoint: trailing bytes");
  return p;
}

inline void save_model(const ModelParams<float>& p, const std::filesystem::path& path) {
  bin::write_file(path, encode_model(p));
}

inline ModelParams<float> load_model(const std::filesystem::path& path) {
  return decode_model(bin::read_file(path));
}

}  // namespace saediff::toy
