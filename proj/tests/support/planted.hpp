// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Planted-dictionary data generators used as oracles by the SAE tests and
// the acceptance suite. Test-only: nothing here is part of the library.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/core/matrix.hpp"
#include "saediff/sae.hpp"

namespace saediff::testing {

// D×F matrix of unit-norm Gaussian atoms (columns).
inline Matrix<float> planted_atoms(std::size_t D, std::size_t F, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix<float> a(D, F);
  for (std::size_t f = 0; f < F; ++f) {
    std::vector<double> v(D);
    double n = 0;
    for (auto& x : v) {
      x = g(rng);
      n += x * x;
    }
    n = std::sqrt(n);
    for (std::size_t i = 0; i < D; ++i) a(i, f) = static_cast<float>(v[i] / n);
  }
  return a;
}

// Rotates column f of `atoms` by `angle` radians inside the plane spanned by
// the column and a random direction orthogonal to it.
inline void rotate_column(Matrix<float>& atoms, std::size_t f, double angle, std::mt19937_64& rng) {
  const std::size_t D = atoms.rows();
  std::normal_distribution<double> g;
  std::vector<double> u(D), w(D);
  double nu = 0;
  for (std::size_t i = 0; i < D; ++i) {
    u[i] = atoms(i, f);
    nu += u[i] * u[i];
  }
  nu = std::sqrt(nu);
  for (auto& x : u) x /= nu;
  double proj = 0;
  for (std::size_t i = 0; i < D; ++i) {
    w[i] = g(rng);
    proj += w[i] * u[i];
  }
  double nw = 0;
  for (std::size_t i = 0; i < D; ++i) {
    w[i] -= proj * u[i];
    nw += w[i] * w[i];
  }
  nw = std::sqrt(nw);
  for (std::size_t i = 0; i < D; ++i)
    atoms(i, f) = static_cast<float>(nu * (std::cos(angle) * u[i] + std::sin(angle) * w[i] / nw));
}

struct PlantedStreamSpec {
  std::size_t n_shards = 100;
  std::size_t tokens_per_shard = 100;
  std::size_t active = 3;     // atoms per token
  double coef_lo = 0.5, coef_hi = 1.5;
  double noise = 0.0;
  std::uint32_t layer = 0;
  std::uint64_t seed = 1;
};

// Tokens are sparse non-negative combinations of the atoms. Shards carry no
// visual span, so every regime except ImageOnly sees every token.
inline std::vector<ActivationShard> planted_shards(const Matrix<float>& atoms, const PlantedStreamSpec& spec) {
  const std::size_t D = atoms.rows(), F = atoms.cols();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> coef(spec.coef_lo, spec.coef_hi);
  std::normal_distribution<double> g;
  std::vector<std::size_t> ids(F);
  for (std::size_t i = 0; i < F; ++i) ids[i] = i;
  std::vector<ActivationShard> out;
  for (std::size_t s = 0; s < spec.n_shards; ++s) {
    ActivationShard sh;
    sh.layer = spec.layer;
    sh.sample_id = "planted-" + std::to_string(spec.seed) + "-" + std::to_string(s);
    sh.hidden = Matrix<float>(spec.tokens_per_shard, D);
    for (std::size_t t = 0; t < spec.tokens_per_shard; ++t) {
      for (std::size_t j = 0; j < spec.active; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, F - 1);
        std::swap(ids[j], ids[pick(rng)]);
      }
      std::vector<double> x(D, 0.0);
      for (std::size_t j = 0; j < spec.active; ++j) {
        const double c = coef(rng);
        for (std::size_t i = 0; i < D; ++i) x[i] += c * atoms(i, ids[j]);
      }
      for (std::size_t i = 0; i < D; ++i) sh.hidden(t, i) = static_cast<float>(x[i] + spec.noise * g(rng));
    }
    out.push_back(std::move(sh));
  }
  return out;
}

// SAE whose decoder is exactly `atoms` and whose encoder is its transpose.
inline SaeParams sae_from_atoms(const Matrix<float>& atoms, std::size_t k, std::uint32_t layer = 0) {
  SaeParams p;
  p.layer = layer;
  p.k = k;
  p.w_dec = atoms;
  p.w_enc = Matrix<float>(atoms.cols(), atoms.rows());
  for (std::size_t f = 0; f < atoms.cols(); ++f)
    for (std::size_t i = 0; i < atoms.rows(); ++i) p.w_enc(f, i) = atoms(i, f);
  p.b_enc.assign(atoms.cols(), 0.f);
  p.b_dec.assign(atoms.rows(), 0.f);
  return p;
}

// For every true atom, the best signed cosine over learned decoder columns,
// averaged.
inline double mean_max_cosine(const Matrix<float>& atoms, const SaeParams& learned) {
  double total = 0;
  for (std::size_t a = 0; a < atoms.cols(); ++a) {
    double best = 0;
    for (std::size_t f = 0; f < learned.f(); ++f) {
      double d = 0, na = 0, nf = 0;
      for (std::size_t i = 0; i < atoms.rows(); ++i) {
        d += double(atoms(i, a)) * learned.w_dec(i, f);
        na += double(atoms(i, a)) * atoms(i, a);
        nf += double(learned.w_dec(i, f)) * learned.w_dec(i, f);
      }
      best = std::max(best, d / std::sqrt(na * nf));
    }
    total += best;
  }
  return total / static_cast<double>(atoms.cols());
}

}  // namespace saediff::testing
