// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Forward pass with a capture tape, site interventions, and reverse-mode
// gradients to named sites (and optionally to every weight).
//
// Sequence layout: rows [0, n_visual) are projected patch embeddings with no
// positional term, rows [n_visual, n) are token + positional embeddings where
// the positional index counts text tokens only.

#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "saediff/core/errors.hpp"
#include "saediff/core/matrix.hpp"
#include "saediff/toymodel/params.hpp"

namespace saediff::toy {

struct ModelInput {
  Matrix<float> patches;             // [n_visual × d_patch]
  std::vector<std::uint32_t> tokens;  // text token ids
};

// ---------------------------------------------------------------------------
// Sites

enum class SiteKind { Embedding, Query, Key, Value, Resid, Logits };

struct Site {
  SiteKind kind = SiteKind::Embedding;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;

  static Site embedding() { return {SiteKind::Embedding, 0, 0}; }
  static Site logits() { return {SiteKind::Logits, 0, 0}; }
  static Site resid(std::uint32_t l) { return {SiteKind::Resid, l, 0}; }
  static Site query(std::uint32_t l, std::uint32_t h) { return {SiteKind::Query, l, h}; }
  static Site key(std::uint32_t l, std::uint32_t h) { return {SiteKind::Key, l, h}; }
  static Site value(std::uint32_t l, std::uint32_t h) { return {SiteKind::Value, l, h}; }

  bool per_head() const { return kind == SiteKind::Query || kind == SiteKind::Key || kind == SiteKind::Value; }

  // "emb", "logits", "L1.resid", "L1H2.q"
  std::string str() const {
    const std::string L = "L" + std::to_string(layer);
    switch (kind) {
      case SiteKind::Embedding: return "emb";
      case SiteKind::Logits: return "logits";
      case SiteKind::Resid: return L + ".resid";
      case SiteKind::Query: return L + "H" + std::to_string(head) + ".q";
      case SiteKind::Key: return L + "H" + std::to_string(head) + ".k";
      case SiteKind::Value: return L + "H" + std::to_string(head) + ".v";
    }
    return "?";
  }

  static Site parse(const std::string& s) {
    if (s == "emb") return embedding();
    if (s == "logits") return logits();
    static const std::regex re(R"(L(\d+)(?:H(\d+))?\.(resid|q|k|v))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw UnknownSiteError("unknown site '" + s + "'");
    const auto l = static_cast<std::uint32_t>(std::stoul(m[1]));
    const std::string what = m[3];
    if (what == "resid") {
      if (m[2].matched) throw UnknownSiteError("unknown site '" + s + "': resid has no head");
      return resid(l);
    }
    if (!m[2].matched) throw UnknownSiteError("unknown site '" + s + "': missing head");
    const auto h = static_cast<std::uint32_t>(std::stoul(m[2]));
    return {what == "q" ? SiteKind::Query : what == "k" ? SiteKind::Key : SiteKind::Value, l, h};
  }

  friend auto operator<=>(const Site&, const Site&) = default;
};

inline void check_site(const ModelConfig& c, const Site& s) {
  switch (s.kind) {
    case SiteKind::Embedding:
    case SiteKind::Logits:
      if (s.layer != 0 || s.head != 0) throw UnknownSiteError("unknown site '" + s.str() + "' (layer/head set)");
      return;
    case SiteKind::Resid:
      if (s.layer >= c.n_layers || s.head != 0)
        throw UnknownSiteError("unknown site '" + s.str() + "': model has " + std::to_string(c.n_layers) + " layers");
      return;
    default:
      if (s.layer >= c.n_layers || s.head >= c.n_heads)
        throw UnknownSiteError("unknown site '" + s.str() + "': model has " + std::to_string(c.n_layers) +
                               " layers × " + std::to_string(c.n_heads) + " heads");
  }
}

// Every site of a model in a fixed order (embedding, then per layer Q/K/V per
// head and the block output).
inline std::vector<Site> all_sites(const ModelConfig& c) {
  std::vector<Site> out{Site::embedding()};
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    for (std::uint32_t h = 0; h < c.n_heads; ++h) {
      out.push_back(Site::query(l, h));
      out.push_back(Site::key(l, h));
      out.push_back(Site::value(l, h));
    }
    out.push_back(Site::resid(l));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape

template <class T>
struct NormCache {
  Matrix<T> xhat;
  std::vector<T> rstd;
};

template <class T>
struct LayerTape {
  Matrix<T> x_in;
  NormCache<T> ln1;
  Matrix<T> a;                                 // ln1 output
  std::vector<Matrix<T>> q, k, v, probs;       // per head; probs is [n × n], row = query
  Matrix<T> z;                                 // concatenated head outputs
  Matrix<T> x_mid;
  NormCache<T> ln2;
  Matrix<T> b;
  Matrix<T> h_pre, h;
  Matrix<T> out;                               // block output (residual site)
};

template <class T>
struct Tape {
  std::size_t n_visual = 0;
  std::size_t n_tokens = 0;
  Matrix<T> patches;
  std::vector<std::uint32_t> tokens;
  Matrix<T> embed;
  std::vector<LayerTape<T>> layers;
  NormCache<T> lnf;
  Matrix<T> f;
  Matrix<T> logits;

  const Matrix<T>& site(const Site& s) const {
    switch (s.kind) {
      case SiteKind::Embedding: return embed;
      case SiteKind::Logits: return logits;
      case SiteKind::Resid: return layers.at(s.layer).out;
      case SiteKind::Query: return layers.at(s.layer).q.at(s.head);
      case SiteKind::Key: return layers.at(s.layer).k.at(s.head);
      case SiteKind::Value: return layers.at(s.layer).v.at(s.head);
    }
    throw UnknownSiteError("unknown site");
  }

  // Attention weights of (layer, head) from query position `row`.
  std::span<const T> attention(std::size_t layer, std::size_t head, std::size_t row) const {
    return layers.at(layer).probs.at(head).row(row);
  }
};

// ---------------------------------------------------------------------------
// Interventions

// A hook sees every site value right after it is computed and may rewrite
// it. `backward` maps the gradient w.r.t. the rewritten value back to the
// value the hook received.
template <class T>
struct Intervention {
  virtual ~Intervention() = default;
  virtual void forward(const Site& site, Matrix<T>& value) const = 0;
  virtual void backward(const Site&, Matrix<T>&) const {}
};

template <class T>
using Hooks = std::vector<const Intervention<T>*>;

// Replaces selected rows of one or more sites with fixed values.
template <class T>
struct SitePatch : Intervention<T> {
  struct Entry {
    Matrix<T> value;
    std::vector<std::size_t> rows;  // empty → all rows
  };
  std::map<Site, Entry> entries;

  void set(const Site& s, Matrix<T> value, std::vector<std::size_t> rows = {}) {
    entries[s] = {std::move(value), std::move(rows)};
  }

  void forward(const Site& s, Matrix<T>& v) const override {
    auto it = entries.find(s);
    if (it == entries.end()) return;
    const auto& e = it->second;
    require_dims(e.value.rows() == v.rows() && e.value.cols() == v.cols(),
                 "patch for " + s.str() + ": shape mismatch");
    if (e.rows.empty()) {
      v = e.value;
      return;
    }
    for (auto r : e.rows)
      for (std::size_t c = 0; c < v.cols(); ++c) v(r, c) = e.value(r, c);
  }
  void backward(const Site& s, Matrix<T>& g) const override {
    auto it = entries.find(s);
    if (it == entries.end()) return;
    if (it->second.rows.empty()) {
      g.fill(T(0));
      return;
    }
    for (auto r : it->second.rows)
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) = T(0);
  }
};

// y ← y − (y·v)v on the chosen rows of one site. v must be unit norm.
// Rows are either an explicit list or every row from `rows_from` onward
// (text positions when rows_from = n_visual).
template <class T>
struct DirectionAblation : Intervention<T> {
  Site site;
  std::vector<T> v;
  std::vector<std::size_t> rows;
  std::optional<std::size_t> rows_from;

  DirectionAblation(Site s, std::vector<T> dir, std::vector<std::size_t> r, double tol = 1e-6)
      : site(s), v(std::move(dir)), rows(std::move(r)) {
    const double n = norm2<T>(v);
    if (!(std::abs(n - 1.0) <= tol))
      throw InvariantError("ablation direction must be unit norm (norm = " + std::to_string(n) + ")");
  }

  static DirectionAblation from_row(Site s, std::vector<T> dir, std::size_t first, double tol = 1e-6) {
    DirectionAblation a(s, std::move(dir), {}, tol);
    a.rows_from = first;
    return a;
  }

  // Subtracts in double so each entry rounds once; a second pass removes
  // most of what that rounding leaves along v.
  void project_row(std::span<T> row) const {
    for (int pass = 0; pass < 2; ++pass) {
      const double d = dot<T, double>(row, v);
      for (std::size_t c = 0; c < row.size(); ++c)
        row[c] = static_cast<T>(static_cast<double>(row[c]) - d * static_cast<double>(v[c]));
    }
  }
  void project(Matrix<T>& m) const {
    require_dims(m.cols() == v.size(), "ablation direction: width mismatch");
    if (rows_from) {
      for (std::size_t r = *rows_from; r < m.rows(); ++r) project_row(m.row(r));
      return;
    }
    for (auto r : rows) project_row(m.row(r));
  }
  void forward(const Site& s, Matrix<T>& m) const override {
    if (s == site) project(m);
  }
  void backward(const Site& s, Matrix<T>& g) const override {
    if (s == site) project(g);
  }
};

// ---------------------------------------------------------------------------
// Numerics

namespace detail {

template <class T>
void layer_norm(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, Matrix<T>& y, NormCache<T>& c) {
  constexpr double kEps = 1e-5;
  const std::size_t n = x.rows(), d = x.cols();
  y = Matrix<T>(n, d);
  c.xhat = Matrix<T>(n, d);
  c.rstd.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < d; ++j) mu += x(i, j);
    mu /= double(d);
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= double(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + kEps));
    c.rstd[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((x(i, j) - mu)) * rs;
      c.xhat(i, j) = xh;
      y(i, j) = g(0, j) * xh + b(0, j);
    }
  }
}

// Returns dx; accumulates dg, db when given.
template <class T>
Matrix<T> layer_norm_back(const Matrix<T>& dy, const Matrix<T>& g, const NormCache<T>& c, Matrix<T>* dg,
                          Matrix<T>* db) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix<T> dx(n, d);
  std::vector<T> dxh(d);
  for (std::size_t i = 0; i < n; ++i) {
    T m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dxh[j] = dy(i, j) * g(0, j);
      m1 += dxh[j];
      m2 += dxh[j] * c.xhat(i, j);
      if (dg) (*dg)(0, j) += dy(i, j) * c.xhat(i, j);
      if (db) (*db)(0, j) += dy(i, j);
    }
    m1 /= T(d);
    m2 /= T(d);
    for (std::size_t j = 0; j < d; ++j) dx(i, j) = c.rstd[i] * (dxh[j] - m1 - c.xhat(i, j) * m2);
  }
  return dx;
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  return cdf + x * pdf;
}

template <class T>
Matrix<T> head_cols(const Matrix<T>& full, std::size_t h, std::size_t dh) {
  Matrix<T> out(full.rows(), dh);
  for (std::size_t i = 0; i < full.rows(); ++i)
    for (std::size_t j = 0; j < dh; ++j) out(i, j) = full(i, h * dh + j);
  return out;
}

template <class T>
void add_bias(Matrix<T>& m, const Matrix<T>& b) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += b(0, j);
}

template <class T>
void add_into(Matrix<T>& a, const Matrix<T>& b) {
  auto fa = a.flat();
  auto fb = b.flat();
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] += fb[i];
}

template <class T>
void sum_rows_into(Matrix<T>& b, const Matrix<T>& g) {
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) b(0, j) += g(i, j);
}

template <class T>
void apply_hooks(const Hooks<T>& hooks, const Site& s, Matrix<T>& v) {
  for (auto* h : hooks) h->forward(s, v);
}

template <class T>
void unapply_hooks(const Hooks<T>& hooks, const Site& s, Matrix<T>& g) {
  for (auto it = hooks.rbegin(); it != hooks.rend(); ++it) (*it)->backward(s, g);
}

}  // namespace detail

inline void check_input(const ModelConfig& c, const ModelInput& in) {
  require_dims(in.patches.rows() == c.n_visual_tokens && in.patches.cols() == c.d_patch,
               "model input: patches must be " + std::to_string(c.n_visual_tokens) + "×" + std::to_string(c.d_patch) +
                   ", got " + std::to_string(in.patches.rows()) + "×" + std::to_string(in.patches.cols()));
  if (in.tokens.empty()) throw DimensionError("model input: no text tokens");
  if (c.n_visual_tokens + in.tokens.size() > c.max_seq)
    throw DimensionError("model input: sequence length " + std::to_string(c.n_visual_tokens + in.tokens.size()) +
                         " exceeds max_seq " + std::to_string(c.max_seq));
  for (auto t : in.tokens)
    if (t >= c.vocab_size) throw DimensionError("model input: token id " + std::to_string(t) + " out of vocabulary");
}

// Visual token embeddings: P applied to each patch row, [n × d_model].
template <class T>
Matrix<T> project_visual(const Matrix<T>& proj, const Matrix<T>& patches) {
  require_dims(patches.cols() == proj.cols(), "project_visual: patch width " + std::to_string(patches.cols()) +
                                                  " != projector input " + std::to_string(proj.cols()));
  return matmul_bt(patches, proj);
}

// Layer-0 input rows for one sample.
template <class T>
Matrix<T> embed(const ModelParams<T>& p, const ModelInput& in) {
  const auto& c = p.config;
  check_input(c, in);
  const std::size_t nv = c.n_visual_tokens, n = nv + in.tokens.size(), D = c.d_model;
  Matrix<T> x(n, D);
  const Matrix<T> vis = project_visual(p.proj, in.patches.template cast<T>());
  for (std::size_t t = 0; t < nv; ++t)
    for (std::size_t i = 0; i < D; ++i) x(t, i) = vis(t, i);
  for (std::size_t w = 0; w < in.tokens.size(); ++w)
    for (std::size_t i = 0; i < D; ++i) x(nv + w, i) = p.tok_emb(in.tokens[w], i) + p.pos_emb(w, i);
  return x;
}

// With capture off only the logits survive; the tape cannot be used for
// backward.
template <class T>
Tape<T> forward(const ModelParams<T>& p, const ModelInput& in, const Hooks<T>& hooks = {}, bool capture = true) {
  const auto& c = p.config;
  Tape<T> tp;
  tp.n_visual = c.n_visual_tokens;
  tp.n_tokens = c.n_visual_tokens + in.tokens.size();
  tp.patches = in.patches.template cast<T>();
  tp.tokens = in.tokens;
  tp.embed = embed(p, in);
  detail::apply_hooks(hooks, Site::embedding(), tp.embed);

  const std::size_t n = tp.n_tokens, H = c.n_heads, dh = c.d_head;
  const T scale = T(1) / std::sqrt(T(dh));
  const Matrix<T>* x = &tp.embed;
  tp.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& W = p.layers[l];
    auto& L = tp.layers[l];
    L.x_in = *x;
    detail::layer_norm(L.x_in, W.ln1_g, W.ln1_b, L.a, L.ln1);
    const auto qf = matmul_bt(L.a, W.w_q), kf = matmul_bt(L.a, W.w_k), vf = matmul_bt(L.a, W.w_v);
    L.q.resize(H);
    L.k.resize(H);
    L.v.resize(H);
    L.probs.resize(H);
    L.z = Matrix<T>(n, c.d_model);
    for (std::uint32_t h = 0; h < H; ++h) {
      const auto lu = static_cast<std::uint32_t>(l);
      L.q[h] = detail::head_cols(qf, h, dh);
      detail::apply_hooks(hooks, Site::query(lu, h), L.q[h]);
      L.k[h] = detail::head_cols(kf, h, dh);
      detail::apply_hooks(hooks, Site::key(lu, h), L.k[h]);
      L.v[h] = detail::head_cols(vf, h, dh);
      detail::apply_hooks(hooks, Site::value(lu, h), L.v[h]);

      auto& P = L.probs[h];
      P = Matrix<T>(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          T s = 0;
          for (std::size_t d = 0; d < dh; ++d) s += L.q[h](i, d) * L.k[h](j, d);
          P(i, j) = s * scale;
          mx = std::max(mx, P(i, j));
        }
        T sum = 0;
        for (std::size_t j = 0; j <= i; ++j) sum += (P(i, j) = std::exp(P(i, j) - mx));
        for (std::size_t j = 0; j <= i; ++j) P(i, j) /= sum;
        for (std::size_t d = 0; d < dh; ++d) {
          T acc = 0;
          for (std::size_t j = 0; j <= i; ++j) acc += P(i, j) * L.v[h](j, d);
          L.z(i, h * dh + d) = acc;
        }
      }
    }
    L.x_mid = matmul_bt(L.z, W.w_o);
    detail::add_into(L.x_mid, L.x_in);
    detail::layer_norm(L.x_mid, W.ln2_g, W.ln2_b, L.b, L.ln2);
    L.h_pre = matmul_bt(L.b, W.w1);
    detail::add_bias(L.h_pre, W.b1);
    L.h = L.h_pre;
    for (auto& v : L.h.flat()) v = detail::gelu(v);
    L.out = matmul_bt(L.h, W.w2);
    detail::add_bias(L.out, W.b2);
    detail::add_into(L.out, L.x_mid);
    detail::apply_hooks(hooks, Site::resid(static_cast<std::uint32_t>(l)), L.out);
    x = &L.out;
    if (!capture) {
      Matrix<T> keep = std::move(L.out);
      L = LayerTape<T>{};
      L.out = std::move(keep);
      if (l > 0) tp.layers[l - 1].out = Matrix<T>{};
    }
  }
  detail::layer_norm(*x, p.lnf_g, p.lnf_b, tp.f, tp.lnf);
  tp.logits = matmul_bt(tp.f, p.unembed);
  detail::apply_hooks(hooks, Site::logits(), tp.logits);
  if (!capture) {
    tp.embed = Matrix<T>{};
    tp.layers.clear();
    tp.f = Matrix<T>{};
  }
  return tp;
}

// ---------------------------------------------------------------------------
// Objectives and backward

template <class T>
using SiteGrads = std::map<Site, Matrix<T>>;

// A scalar function of the tape. `seed` adds ∂objective/∂(site value) for
// every site the objective reads directly.
template <class T>
struct Objective {
  virtual ~Objective() = default;
  virtual T value(const Tape<T>& tape) const = 0;
  virtual void seed(const Tape<T>& tape, SiteGrads<T>& seeds) const = 0;
};

template <class T>
struct ConstantObjective : Objective<T> {
  T c = 0;
  explicit ConstantObjective(T v = 0) : c(v) {}
  T value(const Tape<T>&) const override { return c; }
  void seed(const Tape<T>&, SiteGrads<T>&) const override {}
};

// Σ_sites ⟨W_site, value_site⟩
template <class T>
struct LinearObjective : Objective<T> {
  std::map<Site, Matrix<T>> weights;

  T value(const Tape<T>& tp) const override {
    T acc = 0;
    for (const auto& [s, w] : weights) acc += static_cast<T>(dot<T, double>(w.flat(), tp.site(s).flat()));
    return acc;
  }
  void seed(const Tape<T>&, SiteGrads<T>& seeds) const override {
    for (const auto& [s, w] : weights) {
      auto& g = seeds[s];
      if (g.empty()) g = Matrix<T>(w.rows(), w.cols());
      detail::add_into(g, w);
    }
  }
};

template <class T>
struct SumObjective : Objective<T> {
  std::vector<const Objective<T>*> terms;
  T value(const Tape<T>& tp) const override {
    T acc = 0;
    for (auto* o : terms) acc += o->value(tp);
    return acc;
  }
  void seed(const Tape<T>& tp, SiteGrads<T>& seeds) const override {
    for (auto* o : terms) o->seed(tp, seeds);
  }
};

// Gradient at each requested site, where the gradient at a site is taken
// w.r.t. its (post-hook) value with everything downstream recomputed. When
// `param_grads` is given, weight gradients are accumulated into it.
template <class T>
SiteGrads<T> backward(const ModelParams<T>& p, const Tape<T>& tp, const Objective<T>& obj,
                      const std::vector<Site>& sites, const Hooks<T>& hooks = {},
                      ModelParams<T>* param_grads = nullptr) {
  const auto& c = p.config;
  for (const auto& s : sites) check_site(c, s);
  SiteGrads<T> seeds;
  obj.seed(tp, seeds);
  for (const auto& [s, g] : seeds) {
    check_site(c, s);
    const auto& v = tp.site(s);
    require_dims(g.rows() == v.rows() && g.cols() == v.cols(), "objective seed for " + s.str() + ": shape mismatch");
  }
  std::map<Site, bool> wanted;
  for (const auto& s : sites) wanted[s] = true;
  SiteGrads<T> out;

  // Adds the seed for `s` into g, records it if requested, then undoes hooks.
  auto pass = [&](const Site& s, Matrix<T>& g) {
    if (auto it = seeds.find(s); it != seeds.end()) detail::add_into(g, it->second);
    if (wanted.count(s)) out[s] = g;
    detail::unapply_hooks(hooks, s, g);
  };

  const std::size_t n = tp.n_tokens, D = c.d_model, H = c.n_heads, dh = c.d_head;
  const T scale = T(1) / std::sqrt(T(dh));
  ModelParams<T>* pg = param_grads;

  Matrix<T> dlogits(n, c.vocab_size);
  pass(Site::logits(), dlogits);
  if (pg) add_at_b(pg->unembed, dlogits, tp.f);
  Matrix<T> df = matmul(dlogits, p.unembed);
  Matrix<T> dx = detail::layer_norm_back(df, p.lnf_g, tp.lnf, pg ? &pg->lnf_g : nullptr, pg ? &pg->lnf_b : nullptr);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto l = static_cast<std::uint32_t>(li);
    const auto& W = p.layers[l];
    const auto& L = tp.layers[l];
    auto* G = pg ? &pg->layers[l] : nullptr;
    pass(Site::resid(l), dx);

    // MLP branch
    if (G) {
      add_at_b(G->w2, dx, L.h);
      detail::sum_rows_into(G->b2, dx);
    }
    Matrix<T> dh_act = matmul(dx, W.w2);
    for (std::size_t i = 0; i < dh_act.size(); ++i) dh_act.flat()[i] *= detail::gelu_grad(L.h_pre.flat()[i]);
    if (G) {
      add_at_b(G->w1, dh_act, L.b);
      detail::sum_rows_into(G->b1, dh_act);
    }
    Matrix<T> db_ = matmul(dh_act, W.w1);
    Matrix<T> dmid = detail::layer_norm_back(db_, W.ln2_g, L.ln2, G ? &G->ln2_g : nullptr, G ? &G->ln2_b : nullptr);
    detail::add_into(dmid, dx);

    // Attention branch
    if (G) add_at_b(G->w_o, dmid, L.z);
    Matrix<T> dz = matmul(dmid, W.w_o);
    Matrix<T> dqf(n, D), dkf(n, D), dvf(n, D);
    for (std::uint32_t h = 0; h < H; ++h) {
      const auto& P = L.probs[h];
      Matrix<T> dq(n, dh), dk(n, dh), dv(n, dh);
      std::vector<T> dp(n);
      for (std::size_t i = 0; i < n; ++i) {
        T rowdot = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          T s = 0;
          for (std::size_t d = 0; d < dh; ++d) {
            s += dz(i, h * dh + d) * L.v[h](j, d);
            dv(j, d) += P(i, j) * dz(i, h * dh + d);
          }
          dp[j] = s;
          rowdot += P(i, j) * s;
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const T ds = P(i, j) * (dp[j] - rowdot) * scale;
          for (std::size_t d = 0; d < dh; ++d) {
            dq(i, d) += ds * L.k[h](j, d);
            dk(j, d) += ds * L.q[h](i, d);
          }
        }
      }
      pass(Site::value(l, h), dv);
      pass(Site::key(l, h), dk);
      pass(Site::query(l, h), dq);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < dh; ++d) {
          dqf(i, h * dh + d) = dq(i, d);
          dkf(i, h * dh + d) = dk(i, d);
          dvf(i, h * dh + d) = dv(i, d);
        }
    }
    if (G) {
      add_at_b(G->w_q, dqf, L.a);
      add_at_b(G->w_k, dkf, L.a);
      add_at_b(G->w_v, dvf, L.a);
    }
    Matrix<T> da = matmul(dqf, W.w_q);
    detail::add_into(da, matmul(dkf, W.w_k));
    detail::add_into(da, matmul(dvf, W.w_v));
    dx = detail::layer_norm_back(da, W.ln1_g, L.ln1, G ? &G->ln1_g : nullptr, G ? &G->ln1_b : nullptr);
    detail::add_into(dx, dmid);
  }
  pass(Site::embedding(), dx);

  if (pg) {
    const std::size_t nv = tp.n_visual;
    for (std::size_t t = 0; t < nv; ++t)
      for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < c.d_patch; ++j) pg->proj(i, j) += dx(t, i) * tp.patches(t, j);
    for (std::size_t w = 0; w < tp.tokens.size(); ++w)
      for (std::size_t i = 0; i < D; ++i) {
        pg->tok_emb(tp.tokens[w], i) += dx(nv + w, i);
        pg->pos_emb(w, i) += dx(nv + w, i);
      }
  }
  return out;
}

// Runs the forward pass, then backward to `sites`.
template <class T>
SiteGrads<T> backward_to(const ModelParams<T>& p, const ModelInput& in, const Objective<T>& obj,
                         const std::vector<Site>& sites, const Hooks<T>& hooks = {}) {
  for (const auto& s : sites) check_site(p.config, s);
  const auto tp = forward(p, in, hooks);
  return backward(p, tp, obj, sites, hooks);
}

}  // namespace saediff::toy
