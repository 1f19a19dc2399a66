// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Top-K sparse autoencoder: parameters, encode/decode, loss and
// initialisation. Training and evaluation live in sae_train.hpp.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "saediff/core/binary_io.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/core/matrix.hpp"

namespace saediff {

inline constexpr char kSaeMagic[] = "SAEP";
inline constexpr std::uint32_t kSaeVersion = 1;

struct SaeParams {
  std::uint32_t layer = 0;
  std::size_t k = 1;
  Matrix<float> w_enc;        // [F × D]
  std::vector<float> b_enc;   // [F]
  Matrix<float> w_dec;        // [D × F]; column f is feature f's direction
  std::vector<float> b_dec;   // [D]

  std::size_t d() const { return w_dec.rows(); }
  std::size_t f() const { return w_dec.cols(); }

  std::vector<float> decoder_column(std::size_t f) const {
    std::vector<float> c(d());
    for (std::size_t i = 0; i < d(); ++i) c[i] = w_dec(i, f);
    return c;
  }

  friend bool operator==(const SaeParams&, const SaeParams&) = default;
};

// Shapes, k range and finiteness. Checkpoints only need this much: a
// dictionary with a collapsed column is still a valid object to diff.
inline void validate_shapes(const SaeParams& p) {
  const auto D = p.d(), F = p.f();
  if (D == 0 || F == 0) throw InvariantError("sae: empty dictionary");
  if (p.w_enc.rows() != F || p.w_enc.cols() != D || p.b_enc.size() != F || p.b_dec.size() != D)
    throw DimensionError("sae: inconsistent parameter shapes (D=" + std::to_string(D) +
                         ", F=" + std::to_string(F) + ")");
  if (p.k < 1 || p.k > F)
    throw InvariantError("sae: k=" + std::to_string(p.k) + " outside [1, F=" + std::to_string(F) + "]");
  if (!all_finite(p.w_enc.flat()) || !all_finite(p.w_dec.flat()) ||
      !all_finite(std::span<const float>(p.b_enc)) || !all_finite(std::span<const float>(p.b_dec)))
    throw InvariantError("sae: non-finite parameter");
}

inline void validate(const SaeParams& p) {
  validate_shapes(p);
  const auto D = p.d(), F = p.f();
  for (std::size_t f = 0; f < F; ++f) {
    double n = 0;
    for (std::size_t i = 0; i < D; ++i) n += double(p.w_dec(i, f)) * p.w_dec(i, f);
    if (!(std::isfinite(n) && n > 0))
      throw InvariantError("sae: decoder column " + std::to_string(f) + " has zero or non-finite norm");
  }
}

// Sparse code with indices in ascending order.
struct SparseCode {
  std::size_t dim = 0;
  std::vector<std::uint32_t> index;
  std::vector<float> value;

  std::size_t nnz() const { return index.size(); }

  std::vector<float> dense() const {
    std::vector<float> out(dim, 0.f);
    for (std::size_t i = 0; i < index.size(); ++i) out[index[i]] = value[i];
    return out;
  }

  static SparseCode from_dense(std::span<const float> v) {
    SparseCode c;
    c.dim = v.size();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i] != 0.f) {
        c.index.push_back(static_cast<std::uint32_t>(i));
        c.value.push_back(v[i]);
      }
    return c;
  }
};

struct LossMode {
  enum class Kind { TopK, VanillaL1 };
  Kind kind = Kind::TopK;
  double lambda = 0.0;  // VanillaL1 only

  static LossMode topk() { return {}; }
  static LossMode l1(double lambda) { return {Kind::VanillaL1, lambda}; }
};

// W_enc·x + b_enc
inline void preactivations(const SaeParams& p, std::span<const float> x, std::span<float> out) {
  if (x.size() != p.d())
    throw DimensionError("sae: input has dim " + std::to_string(x.size()) + ", expected D=" +
                         std::to_string(p.d()));
  const std::size_t D = p.d();
  for (std::size_t f = 0; f < p.f(); ++f) {
    const float* w = p.w_enc.data() + f * D;
    float acc = 0.f;
    for (std::size_t i = 0; i < D; ++i) acc += w[i] * x[i];
    out[f] = acc + p.b_enc[f];
  }
}

// ReLU code keeping every positive pre-activation.
inline SparseCode encode_relu(const SaeParams& p, std::span<const float> x) {
  std::vector<float> pre(p.f());
  preactivations(p, x, pre);
  SparseCode c;
  c.dim = p.f();
  for (std::size_t f = 0; f < pre.size(); ++f)
    if (pre[f] > 0.f) {
      c.index.push_back(static_cast<std::uint32_t>(f));
      c.value.push_back(pre[f]);
    }
  return c;
}

// Top-K code: ReLU, then keep the k largest; ties go to the lower index.
inline SparseCode encode(const SaeParams& p, std::span<const float> x) {
  std::vector<float> pre(p.f());
  preactivations(p, x, pre);
  std::vector<std::uint32_t> pos;
  for (std::size_t f = 0; f < pre.size(); ++f)
    if (pre[f] > 0.f) pos.push_back(static_cast<std::uint32_t>(f));
  if (pos.size() > p.k) {
    auto better = [&](std::uint32_t a, std::uint32_t b) {
      return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
    };
    std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(p.k - 1), pos.end(), better);
    pos.resize(p.k);
    std::sort(pos.begin(), pos.end());
  }
  SparseCode c;
  c.dim = p.f();
  c.index = pos;
  c.value.reserve(pos.size());
  for (auto f : pos) c.value.push_back(pre[f]);
  return c;
}

inline SparseCode encode(const SaeParams& p, std::span<const float> x, const LossMode& mode) {
  return mode.kind == LossMode::Kind::TopK ? encode(p, x) : encode_relu(p, x);
}

// x̂ = W_dec·codes + b_dec, touching only the nonzero codes.
inline std::vector<float> decode(const SaeParams& p, const SparseCode& codes) {
  if (codes.dim != p.f())
    throw DimensionError("sae: code has dim " + std::to_string(codes.dim) + ", expected F=" +
                         std::to_string(p.f()));
  std::vector<float> out(p.b_dec);
  const std::size_t F = p.f();
  for (std::size_t n = 0; n < codes.nnz(); ++n) {
    const auto f = codes.index[n];
    const float a = codes.value[n];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += a * p.w_dec.data()[i * F + f];
  }
  return out;
}

struct SaeLoss {
  double recon = 0;     // ‖x − x̂‖²
  double sparsity = 0;  // λ·‖codes‖₁ (0 for Top-K)
};

inline SaeLoss sae_loss(const SaeParams& p, std::span<const float> x, const LossMode& mode) {
  const auto code = encode(p, x, mode);
  const auto xhat = decode(p, code);
  SaeLoss l;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = double(x[i]) - xhat[i];
    l.recon += e * e;
  }
  if (mode.kind == LossMode::Kind::VanillaL1) {
    double l1 = 0;
    for (float v : code.value) l1 += std::abs(v);
    l.sparsity = mode.lambda * l1;
  }
  return l;
}

// ---------------------------------------------------------------------------
// Initialisation

// Deep copy of a pretrained dictionary so index f keeps meaning feature f.
inline SaeParams init_warm(const SaeParams& base, std::size_t expected_d, std::size_t expected_f,
                           std::size_t k) {
  if (base.d() != expected_d || base.f() != expected_f)
    throw DimensionError("init_warm: base dictionary is D=" + std::to_string(base.d()) + ", F=" +
                         std::to_string(base.f()) + "; target is D=" + std::to_string(expected_d) +
                         ", F=" + std::to_string(expected_f));
  SaeParams p = base;
  p.k = k;
  validate(p);
  return p;
}

inline void normalize_decoder_columns(SaeParams& p) {
  const std::size_t D = p.d(), F = p.f();
  for (std::size_t f = 0; f < F; ++f) {
    double n = 0;
    for (std::size_t i = 0; i < D; ++i) n += double(p.w_dec(i, f)) * p.w_dec(i, f);
    n = std::sqrt(n);
    if (n == 0) continue;
    for (std::size_t i = 0; i < D; ++i) p.w_dec(i, f) = static_cast<float>(p.w_dec(i, f) / n);
  }
}

// Gaussian decoder with unit-norm columns; encoder starts as its transpose.
inline SaeParams init_random(std::size_t D, std::size_t F, std::size_t k, std::uint64_t seed,
                             std::uint32_t layer = 0) {
  if (k < 1 || k > F) throw InvariantError("init_random: need 1 <= k <= F");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  SaeParams p;
  p.layer = layer;
  p.k = k;
  p.w_dec = Matrix<float>(D, F);
  for (auto& v : p.w_dec.flat()) v = static_cast<float>(g(rng));
  normalize_decoder_columns(p);
  p.w_enc = Matrix<float>(F, D);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t i = 0; i < D; ++i) p.w_enc(f, i) = p.w_dec(i, f);
  p.b_enc.assign(F, 0.f);
  p.b_dec.assign(D, 0.f);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint: "SAEP", version, layer, D, F, k, then W_enc, b_enc, W_dec, b_dec
// as little-endian f32 blocks.

inline std::vector<std::uint8_t> encode_sae(const SaeParams& p) {
  validate_shapes(p);
  bin::Writer w;
  w.magic(std::string_view(kSaeMagic, 4));
  w.u32(kSaeVersion);
  w.u32(p.layer);
  w.u64(p.d());
  w.u64(p.f());
  w.u64(p.k);
  w.f32s(p.w_enc.flat());
  w.f32s(p.b_enc);
  w.f32s(p.w_dec.flat());
  w.f32s(p.b_dec);
  return w.take();
}

inline SaeParams decode_sae(std::span<const std::uint8_t> bytes) {
  bin::Reader r(bytes);
  r.expect_magic(std::string_view(kSaeMagic, 4), "sae checkpoint");
  const auto version = r.u32("sae checkpoint");
  if (version != kSaeVersion)
    throw VersionError("sae checkpoint: unsupported version " + std::to_string(version));
  SaeParams p;
  p.layer = r.u32("sae checkpoint");
  const auto D = r.u64("sae checkpoint");
  const auto F = r.u64("sae checkpoint");
  p.k = r.u64("sae checkpoint");
  r.need((2 * D * F + D + F) * sizeof(float), "sae checkpoint");
  p.w_enc = Matrix<float>(F, D);
  p.b_enc.resize(F);
  p.w_dec = Matrix<float>(D, F);
  p.b_dec.resize(D);
  r.f32s(p.w_enc.flat(), "sae checkpoint");
  r.f32s(p.b_enc, "sae checkpoint");
  r.f32s(p.w_dec.flat(), "sae checkpoint");
  r.f32s(p.b_dec, "sae checkpoint");
  if (r.remaining() != 0) throw FormatError("sae checkpoint: trailing bytes");
  validate_shapes(p);
  return p;
}

inline void save_sae(const SaeParams& p, const std::filesystem::path& path) {
  bin::write_file(path, encode_sae(p));
}

inline SaeParams load_sae(const std::filesystem::path& path) { return decode_sae(bin::read_file(path)); }

}  // namespace saediff
