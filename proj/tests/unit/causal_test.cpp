// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0

#include "saediff/causal.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

#include "support/grad_check.hpp"
#include "support/toy_fixture.hpp"

namespace saediff {
namespace {

using causal::Method;
using causal::Positions;
using toy::Site;

struct SmallCase {
  toy::ModelParams<double> params;
  toy::ModelInput input;
  Matrix<double> mean_visual;
  SaeParams sae;
};

SaeParams random_sae(std::uint32_t layer, std::size_t D, std::size_t F, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  SaeParams s;
  s.layer = layer;
  s.k = 1;
  s.w_enc = Matrix<float>(F, D);
  s.b_enc.assign(F, 0.f);
  s.b_dec.assign(D, 0.f);
  s.w_dec = Matrix<float>(D, F);
  for (std::size_t f = 0; f < F; ++f) {
    std::vector<double> c(D);
    double n = 0;
    for (auto& x : c) {
      x = g(rng);
      n += x * x;
    }
    for (std::size_t i = 0; i < D; ++i) s.w_dec(i, f) = s.w_enc(f, i) = float(c[i] / std::sqrt(n));
  }
  return s;
}

Matrix<double> random_mean_visual(const toy::ModelParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix<double> patches(p.config.n_visual_tokens, p.config.d_patch);
  for (auto& v : patches.flat()) v = g(rng);
  return toy::project_visual(p.proj, patches);
}

SmallCase small_case(std::uint64_t seed, std::size_t layers = 2) {
  toy::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_head = 8;
  c.d_mlp = 16;
  c.vocab_size = 9;
  c.n_visual_tokens = 4;
  c.d_patch = 6;
  c.max_seq = 12;
  SmallCase sc;
  sc.params = testing::random_toy(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> g;
  sc.input.patches = Matrix<float>(c.n_visual_tokens, c.d_patch);
  for (auto& v : sc.input.patches.flat()) v = float(g(rng));
  sc.input.tokens = {1, 4, 2, 7, 3};
  sc.mean_visual = random_mean_visual(sc.params, seed + 2);
  sc.sae = random_sae(static_cast<std::uint32_t>(layers - 1), c.d_model, 6, seed + 3);
  return sc;
}

toy::TaskSample as_sample(const toy::ModelInput& in, const std::string& id) {
  toy::TaskSample s;
  s.sample_id = id;
  s.patches = in.patches;
  s.tokens = in.tokens;
  s.kind = "above";
  return s;
}

// ---------------------------------------------------------------------------
// Feature objective

TEST(FeatureObjective, MatchesDotProductLoop) {
  auto sc = small_case(1);
  const auto obj = causal::feature_objective<double>(sc.sae, 2, Positions::All);
  const auto tp = toy::forward(sc.params, sc.input);
  const auto& r = tp.layers[sc.sae.layer].out;
  double want = 0;
  for (std::size_t t = 0; t < r.rows(); ++t)
    for (std::size_t i = 0; i < r.cols(); ++i) want += r(t, i) * double(sc.sae.w_dec(i, 2));
  EXPECT_NEAR(obj.value(tp), want, 1e-6);
}

TEST(FeatureObjective, TextPositionsOnly) {
  auto sc = small_case(2);
  const auto tp = toy::forward(sc.params, sc.input);
  const auto all = causal::feature_objective<double>(sc.sae, 0, Positions::All).value(tp);
  const auto text = causal::feature_objective<double>(sc.sae, 0, Positions::Text).value(tp);
  const auto vis = causal::feature_objective<double>(sc.sae, 0, Positions::Visual).value(tp);
  EXPECT_NEAR(all, text + vis, 1e-12);
}

TEST(FeatureObjective, OrthogonalAndSelfProjection) {
  toy::Tape<double> tp;
  tp.n_visual = 1;
  tp.n_tokens = 3;
  tp.layers.resize(1);
  tp.layers[0].out = Matrix<double>(3, 4);
  tp.layers[0].out(0, 0) = 5;  // visual row, excluded
  tp.layers[0].out(1, 1) = 1;
  tp.layers[0].out(2, 3) = 2;
  causal::FeatureObjective<double> orth(0, {1, 0, 0, 0}, Positions::Text);
  EXPECT_EQ(orth.value(tp), 0.0);
  causal::FeatureObjective<double> self(0, {0, 1, 0, 0}, Positions::Text);
  EXPECT_EQ(self.value(tp), 1.0);
}

TEST(FeatureObjective, MissingLayerAndWidthMismatch) {
  auto sc = small_case(3, 1);
  const auto tp = toy::forward(sc.params, sc.input);
  causal::FeatureObjective<double> deep(1, std::vector<double>(16, 0.25), Positions::Text);
  EXPECT_THROW(deep.value(tp), UnknownSiteError);
  causal::FeatureObjective<double> narrow(0, std::vector<double>(8, 0.25), Positions::Text);
  EXPECT_THROW(narrow.value(tp), DimensionError);
  EXPECT_THROW(causal::feature_objective<double>(sc.sae, 99), DimensionError);
}

TEST(FeatureObjective, GradientMatchesFiniteDifferences) {
  auto sc = small_case(4);
  const auto obj = causal::feature_objective<double>(sc.sae, 1, Positions::Text);
  for (const auto& chk : testing::check_site_gradients(sc.params, sc.input, obj, toy::all_sites(sc.params.config)))
    EXPECT_LE(chk.rel_error, 1e-6) << chk.site.str();
}

// ---------------------------------------------------------------------------
// Positions and corruption

TEST(Positions, RowSets) {
  EXPECT_EQ(causal::position_rows(2, 5, Positions::All), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(causal::position_rows(2, 5, Positions::Text), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(causal::position_rows(2, 5, Positions::Visual), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(causal::parse_positions("text"), Positions::Text);
  EXPECT_THROW(causal::parse_positions("image"), ConfigError);
}

TEST(Corruption, ScalesTowardMeanOnVisualRowsOnly) {
  auto sc = small_case(5);
  const auto tp = toy::forward(sc.params, sc.input);
  for (double alpha : {0.0, 0.5, 1.0}) {
    const auto hook = causal::corruption(tp.embed, sc.mean_visual, alpha);
    const auto pt = toy::forward(sc.params, sc.input, {&hook});
    for (std::size_t t = 0; t < tp.n_tokens; ++t)
      for (std::size_t i = 0; i < tp.embed.cols(); ++i) {
        const double want = t < tp.n_visual ? tp.embed(t, i) + alpha * (sc.mean_visual(t, i) - tp.embed(t, i))
                                            : tp.embed(t, i);
        EXPECT_NEAR(pt.embed(t, i), want, 1e-12);
      }
  }
}

// ---------------------------------------------------------------------------
// Attribution

TEST(Attribution, IdenticalRunsScoreZero) {
  auto sc = small_case(6);
  const auto obj = causal::feature_objective<double>(sc.sae, 0);
  const auto run = causal::run_with_grads(sc.params, sc.input, obj, {}, true);
  for (auto m : {Method::A, Method::B}) {
    const auto s = causal::attribution(run, run, m, sc.params.config, {true, Positions::All});
    for (double v : s.scores.flat()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Attribution, PerPositionSumsToScore) {
  auto sc = small_case(7);
  const auto obj = causal::feature_objective<double>(sc.sae, 3);
  const auto clean = causal::run_with_grads(sc.params, sc.input, obj, {}, false);
  const auto hook = causal::corruption(clean.tape.embed, sc.mean_visual);
  const auto corrupt = causal::run_with_grads(sc.params, sc.input, obj, {&hook}, false);
  const auto s = causal::attribution(clean, corrupt, Method::B, sc.params.config);
  const auto H = sc.params.config.n_heads;
  for (std::size_t l = 0; l < sc.params.config.n_layers; ++l)
    for (std::size_t h = 0; h < H; ++h) {
      double sum = 0;
      for (double v : s.per_position.row(l * H + h)) sum += v;
      EXPECT_NEAR(sum, s.scores(l, h), 1e-12);
    }
}

TEST(Attribution, MethodASignsFollowDefinition) {
  auto sc = small_case(8);
  const auto obj = causal::feature_objective<double>(sc.sae, 2);
  const auto clean = causal::run_with_grads(sc.params, sc.input, obj, {}, false);
  const auto hook = causal::corruption(clean.tape.embed, sc.mean_visual);
  const auto corrupt = causal::run_with_grads(sc.params, sc.input, obj, {&hook}, false);
  const auto a = causal::attribution(clean, corrupt, Method::A, sc.params.config);
  const auto b = causal::attribution(clean, corrupt, Method::B, sc.params.config);
  // Loop oracle: Σ (corrupt − clean)·∇clean and Σ (clean − corrupt)·∇corrupt over Q and K.
  for (std::uint32_t l = 0; l < 2; ++l)
    for (std::uint32_t h = 0; h < 2; ++h) {
      double wa = 0, wb = 0;
      for (const auto& site : {Site::query(l, h), Site::key(l, h)}) {
        const auto& x0 = clean.tape.site(site);
        const auto& x1 = corrupt.tape.site(site);
        for (std::size_t i = 0; i < x0.size(); ++i) {
          wa += (x1.flat()[i] - x0.flat()[i]) * clean.grads.at(site).flat()[i];
          wb += (x0.flat()[i] - x1.flat()[i]) * corrupt.grads.at(site).flat()[i];
        }
      }
      EXPECT_NEAR(a.scores(l, h), wa, 1e-12);
      EXPECT_NEAR(b.scores(l, h), wb, 1e-12);
    }
}

TEST(Attribution, SiteMismatchRejected) {
  auto sc = small_case(9);
  const auto obj = causal::feature_objective<double>(sc.sae, 0);
  const auto clean = causal::run_with_grads(sc.params, sc.input, obj, {}, false);
  auto shorter = sc.input;
  shorter.tokens.pop_back();
  const auto other = causal::run_with_grads(sc.params, shorter, obj, {}, false);
  EXPECT_THROW(causal::attribution(clean, other, Method::A, sc.params.config), DimensionError);
  const auto with_v = causal::run_with_grads(sc.params, sc.input, obj, {}, true);
  EXPECT_THROW(causal::attribution(clean, with_v, Method::A, sc.params.config, {true, Positions::All}),
               UnknownSiteError);
}

// Scaling the activation difference by α scales the Method A score by α.
TEST(Attribution, LinearInActivationDifference) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g;
  Matrix<double> base(5, 4), other(5, 4), grad(5, 4);
  for (auto* m : {&base, &other, &grad})
    for (auto& v : m->flat()) v = g(rng);
  const std::vector<std::size_t> rows{0, 1, 2, 3, 4};
  const double s1 = causal::site_score(base, other, grad, rows);
  for (double alpha : {0.5, 0.1, 3.0}) {
    Matrix<double> scaled = base;
    for (std::size_t i = 0; i < base.size(); ++i)
      scaled.flat()[i] = base.flat()[i] + alpha * (other.flat()[i] - base.flat()[i]);
    EXPECT_NEAR(causal::site_score(base, scaled, grad, rows), alpha * s1, 1e-12);
  }
}

// Single layer, MLP switched off and the objective read at the block output:
// the objective is linear in each head's values, so Method A's V-site score
// equals the exact patching effect.
TEST(Attribution, LinearSingleLayerMethodAEqualsExact) {
  auto sc = small_case(11, 1);
  auto& W = sc.params.layers[0];
  for (auto* m : {&W.w1, &W.b1, &W.w2, &W.b2})
    for (auto& v : m->flat()) v = 0;
  const auto obj = causal::feature_objective<double>(sc.sae, 4, Positions::All);
  const auto clean = causal::run_with_grads(sc.params, sc.input, obj, {}, true);
  const auto hook = causal::corruption(clean.tape.embed, sc.mean_visual);
  const auto corrupt = causal::run_with_grads(sc.params, sc.input, obj, {&hook}, true);
  const auto rows = causal::position_rows(clean.tape.n_visual, clean.tape.n_tokens, Positions::All);
  for (std::uint32_t h = 0; h < 2; ++h) {
    const auto site = Site::value(0, h);
    const double score =
        causal::site_score(clean.tape.site(site), corrupt.tape.site(site), clean.grads.at(site), rows);
    const double exact = causal::exact_patch(sc.params, sc.input, {}, corrupt.tape, {site}, obj);
    EXPECT_NEAR(score, exact, 1e-10 * std::max(1.0, std::abs(exact)));
    EXPECT_GT(std::abs(exact), 1e-6);
  }
}

// |score − exact| aggregated over heads shrinks at least 3.5× per halving of α.
TEST(Attribution, FirstOrderConvergence) {
  for (std::uint64_t seed : {12, 13, 14}) {
    auto sc = small_case(seed);
    const auto obj = causal::feature_objective<double>(sc.sae, seed % 6);
    const auto clean = causal::run_with_grads(sc.params, sc.input, obj, {}, false);
    for (auto m : {Method::A, Method::B}) {
      std::vector<double> err;
      for (double alpha : {0.1, 0.05, 0.025}) {
        const auto hook = causal::corruption(clean.tape.embed, sc.mean_visual, alpha);
        const auto corrupt = causal::run_with_grads(sc.params, sc.input, obj, {&hook}, false);
        const auto s = causal::attribution(clean, corrupt, m, sc.params.config);
        const auto e = causal::exact_head_effects(sc.params, sc.input, hook, clean, corrupt, m, obj);
        double sum = 0;
        for (std::size_t i = 0; i < e.size(); ++i) sum += std::abs(s.scores.flat()[i] - e.flat()[i]);
        err.push_back(sum);
      }
      EXPECT_GE(err[0] / err[1], 3.5) << "seed " << seed << (m == Method::A ? " A" : " B");
      EXPECT_GE(err[1] / err[2], 3.5) << "seed " << seed << (m == Method::A ? " A" : " B");
    }
  }
}

// ---------------------------------------------------------------------------
// Exact patching

TEST(ExactPatch, IdenticalActivationsGiveZero) {
  auto sc = small_case(15);
  const auto obj = causal::feature_objective<double>(sc.sae, 0);
  const auto tp = toy::forward(sc.params, sc.input);
  for (const auto& site : {Site::query(0, 1), Site::key(1, 0), Site::embedding()})
    EXPECT_EQ(causal::exact_patch(sc.params, sc.input, {}, tp, {site}, obj), 0.0);
}

TEST(ExactPatch, FullVisualEmbeddingReproducesCorruptRun) {
  auto sc = small_case(16);
  const auto obj = causal::feature_objective<double>(sc.sae, 1);
  const auto clean = toy::forward(sc.params, sc.input);
  const auto hook = causal::corruption(clean.embed, sc.mean_visual);
  const auto corrupt = toy::forward(sc.params, sc.input, {&hook});
  std::vector<std::size_t> visual{0, 1, 2, 3};
  const double eff = causal::exact_patch(sc.params, sc.input, {}, corrupt, {Site::embedding()}, obj, visual);
  EXPECT_NEAR(double(obj.value(clean)) + eff, double(obj.value(corrupt)), 1e-12);
}

TEST(ExactPatch, OwnResidualSiteEqualsProjectionChange) {
  auto sc = small_case(17);
  const auto obj = causal::feature_objective<double>(sc.sae, 5);
  const auto clean = toy::forward(sc.params, sc.input);
  const auto hook = causal::corruption(clean.embed, sc.mean_visual);
  const auto corrupt = toy::forward(sc.params, sc.input, {&hook});
  const Site own = Site::resid(sc.sae.layer);
  const double eff = causal::exact_patch(sc.params, sc.input, {}, corrupt, {own}, obj);
  EXPECT_NEAR(eff, double(obj.value(corrupt)) - double(obj.value(clean)), 1e-12);
}

TEST(ExactPatch, UnknownSiteRejected) {
  auto sc = small_case(18);
  const auto obj = causal::feature_objective<double>(sc.sae, 0);
  const auto tp = toy::forward(sc.params, sc.input);
  EXPECT_THROW(causal::exact_patch(sc.params, sc.input, {}, tp, {Site::query(0, 7)}, obj), UnknownSiteError);
  EXPECT_THROW(causal::exact_patch(sc.params, sc.input, {}, tp, {Site::resid(5)}, obj), UnknownSiteError);
}

// ---------------------------------------------------------------------------
// Aggregation and exports

std::vector<causal::SampleAttribution> sample_attributions(std::size_t n) {
  std::vector<causal::SampleAttribution> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto sc = small_case(20 + i);
    const auto obj = causal::feature_objective<double>(sc.sae, 2);
    out.push_back(causal::attribute_sample(sc.params, obj, as_sample(sc.input, "s" + std::to_string(i)),
                                           sc.mean_visual, causal::AttributionConfig{}));
  }
  return out;
}

TEST(Aggregate, SingletonEqualsSample) {
  const auto per = sample_attributions(1);
  const auto r = causal::aggregate_attribution({1, 2}, per);
  EXPECT_EQ(r.n_samples, 1u);
  EXPECT_EQ(r.method_a.flat().size(), per[0].a.scores.flat().size());
  for (std::size_t i = 0; i < r.method_a.size(); ++i) {
    EXPECT_DOUBLE_EQ(r.method_a.flat()[i], per[0].a.scores.flat()[i]);
    EXPECT_DOUBLE_EQ(r.method_b.flat()[i], per[0].b.scores.flat()[i]);
  }
}

TEST(Aggregate, MeansLayerCurvesAndRankings) {
  const auto per = sample_attributions(3);
  causal::AttributionConfig cfg;
  cfg.top_heads = 2;
  const auto r = causal::aggregate_attribution({1, 2}, per, cfg);
  for (std::size_t i = 0; i < r.method_a.size(); ++i) {
    double m = 0;
    for (const auto& s : per) m += s.a.scores.flat()[i];
    EXPECT_NEAR(r.method_a.flat()[i], m / 3, 1e-12);
  }
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_NEAR(r.layer_a[l], r.method_a(l, 0) + r.method_a(l, 1), 1e-12);
    EXPECT_NEAR(r.layer_b[l], r.method_b(l, 0) + r.method_b(l, 1), 1e-12);
  }
  // Top list is sorted by score and dominates every other head.
  auto score = [&](const std::string& name) {
    return r.method_a(std::size_t(name[1] - '0'), std::size_t(name[3] - '0'));
  };
  ASSERT_EQ(r.top_a.size(), 2u);
  EXPECT_GE(score(r.top_a[0]), score(r.top_a[1]));
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      const auto n = causal::head_name(l, h);
      if (std::find(r.top_a.begin(), r.top_a.end(), n) == r.top_a.end()) {
        EXPECT_LE(r.method_a(l, h), score(r.top_a[1]));
      }
      if (std::find(r.bottom_a.begin(), r.bottom_a.end(), n) == r.bottom_a.end()) {
        EXPECT_GE(r.method_a(l, h), score(r.bottom_a[1]));
      }
    }
  for (const auto& h : r.overlap) {
    EXPECT_NE(std::find(r.top_a.begin(), r.top_a.end(), h), r.top_a.end());
    EXPECT_NE(std::find(r.top_b.begin(), r.top_b.end(), h), r.top_b.end());
  }
  ASSERT_TRUE(r.spearman_a.has_value());
  EXPECT_GE(*r.spearman_a, -1.0);
  EXPECT_LE(*r.spearman_a, 1.0);
}

TEST(Aggregate, EmptyRejected) {
  EXPECT_THROW(causal::aggregate_attribution({0, 0}, std::vector<causal::SampleAttribution>{}), EmptyInputError);
}

TEST(Aggregate, OverlapLabelFormat) {
  EXPECT_EQ(causal::overlap_label({"L13H1", "L13H18"}), "Overlap: L13H1, L13H18");
  EXPECT_EQ(causal::overlap_label({}), "Overlap: ");
}

TEST(Aggregate, JsonAndCsvShapes) {
  const auto per = sample_attributions(2);
  const auto r = causal::aggregate_attribution({1, 2}, per);
  const auto j = causal::to_json(r);
  EXPECT_EQ(j["feature_id"], "L1F2");
  EXPECT_EQ(j["n_samples"], 2);
  EXPECT_EQ(j["method_a"].size(), 2u);
  EXPECT_EQ(j["method_a"][0].size(), 2u);
  EXPECT_EQ(j["sites"], "qk");
  EXPECT_FALSE(j["spearman_b"].is_null());
  const auto csv = causal::head_scores_csv(r.method_a);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,H0,H1");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Aggregate, Deterministic) {
  const auto a = causal::to_json(causal::aggregate_attribution({1, 2}, sample_attributions(2))).dump();
  const auto b = causal::to_json(causal::aggregate_attribution({1, 2}, sample_attributions(2))).dump();
  EXPECT_EQ(a, b);
}

TEST(AttentionGrid, RowsMatchAttentionWeights) {
  auto sc = small_case(30);
  const auto tp = toy::forward(sc.params.cast<float>(), sc.input);
  const auto csv = causal::attention_grid_csv(tp, 1, 0, 2);
  const auto row = tp.attention(1, 0, tp.n_tokens - 1);
  EXPECT_EQ(csv, "col0,col1\n" + csv::num(row[0]) + "," + csv::num(row[1]) + "\n" + csv::num(row[2]) + "," +
                     csv::num(row[3]) + "\n");
  EXPECT_THROW(causal::attention_grid_csv(tp, 1, 0, 3), DimensionError);
}

// ---------------------------------------------------------------------------
// Ablation

TEST(Ablation, ProjectorCases) {
  const std::vector<double> v{0.6, 0.8, 0.0};
  const auto ab = toy::DirectionAblation<double>::from_row(Site::resid(0), v, 0);
  std::vector<double> par{1.2, 1.6, 0.0};
  ab.project_row(par);
  for (double x : par) EXPECT_NEAR(x, 0.0, 1e-12);
  std::vector<double> orth{-0.8, 0.6, 2.0}, keep = orth;
  ab.project_row(orth);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(orth[i], keep[i], 1e-12);
  std::vector<double> y{1.0, -2.0, 0.5}, once;
  ab.project_row(y);
  once = y;
  ab.project_row(y);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], once[i], 1e-6);
  EXPECT_THROW(toy::DirectionAblation<double>::from_row(Site::resid(0), {0.6, 0.7, 0.0}, 0), InvariantError);
}

TEST(Ablation, OrthogonalOnTextAndImageRowsUntouched) {
  auto sc = small_case(31);
  const auto pf = sc.params.cast<float>();
  const auto ab = causal::feature_ablation<float>(sc.sae, 3, pf.config.n_visual_tokens);
  const auto clean = toy::forward(pf, sc.input);
  const auto abl = toy::forward(pf, sc.input, {&ab});
  const auto& y = abl.layers[sc.sae.layer].out;
  const auto v = sc.sae.decoder_column(3);
  for (std::size_t t = 0; t < y.rows(); ++t) {
    if (t < pf.config.n_visual_tokens) {
      for (std::size_t i = 0; i < y.cols(); ++i) EXPECT_EQ(y(t, i), clean.layers[sc.sae.layer].out(t, i));
    } else {
      EXPECT_LE(std::abs(dot<float, double>(y.row(t), v)), 1e-6);
    }
  }
}

// Direction of least residual energy at text positions: removing it leaves
// answers unchanged.
TEST(Ablation, InertDirectionLeavesAccuracy) {
  const auto& toy = testing::trained_toy();
  const std::uint32_t layer = 0;
  const auto subset = toy::filter_kind(std::span<const toy::TaskSample>(toy.heldout).first(400), "above");
  const std::size_t D = toy.params.config.d_model;
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(D, D);
  for (const auto& s : subset) {
    const auto tp = toy::forward(toy.params, s.input());
    const auto& r = tp.layers[layer].out;
    for (std::size_t t = tp.n_visual; t < tp.n_tokens; ++t)
      for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) m2(i, j) += double(r(t, i)) * r(t, j);
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m2);
  std::vector<float> v(D);
  for (std::size_t i = 0; i < D; ++i) v[i] = float(eig.eigenvectors()(Eigen::Index(i), 0));
  double n = 0;
  for (float x : v) n += double(x) * x;
  for (float& x : v) x = float(x / std::sqrt(n));
  const auto ab = toy::DirectionAblation<float>::from_row(Site::resid(layer), v, toy.params.config.n_visual_tokens);
  const auto clean = toy::evaluate(toy.params, subset, toy.ids);
  const auto abl = toy::evaluate(toy.params, subset, toy.ids, {&ab});
  EXPECT_NEAR(abl.accuracy, clean.accuracy, 0.01);
  EXPECT_NEAR(abl.mean_p_correct, clean.mean_p_correct, 0.01);
}

TEST(Ablation, DominantRelation) {
  std::vector<toy::TaskSample> top(5);
  top[0].kind = "above";
  top[1].kind = "below";
  top[2].kind = "above";
  top[3].kind = "exists";
  top[4].kind = "exists";
  EXPECT_EQ(causal::dominant_relation(top), "above");
  top[2].kind = "below";
  EXPECT_EQ(causal::dominant_relation(top), "below");
  EXPECT_FALSE(causal::dominant_relation(std::span(top).subspan(3)).has_value());
}

TEST(Ablation, ControlsSameLayerActiveAndSeeded) {
  const std::vector<double> ev{0.5, 0.0, 0.2, 0.3, 0.0, 0.9, 0.1, 0.4};
  const FeatureId f{2, 5};
  const auto c0 = causal::draw_controls(f, ev, 3, 0);
  EXPECT_EQ(c0, causal::draw_controls(f, ev, 3, 0));
  EXPECT_EQ(c0.size(), 3u);
  for (const auto& c : c0) {
    EXPECT_EQ(c.layer, 2u);
    EXPECT_NE(c.index, 5u);
    EXPECT_GT(ev[c.index], 0.0);
  }
  EXPECT_EQ(causal::draw_controls(f, ev, 99, 1).size(), 5u);
  EXPECT_THROW(causal::draw_controls(f, std::vector<double>{0, 0, 0, 0, 0, 1}, 2, 0), EmptyInputError);
}

TEST(Ablation, EvalErrorsAndTable) {
  const auto& toy = testing::trained_toy();
  const auto sae = random_sae(0, toy.params.config.d_model, 8, 40);
  const std::vector<double> ev(8, 0.5);
  const auto general = toy::filter_kind(std::span<const toy::TaskSample>(toy.heldout).first(200), "exists");
  EXPECT_THROW(causal::ablation_eval(toy.params, sae, 0, "above", {}, general, ev, 1.0, toy.ids), EmptyInputError);
  const auto above = toy::filter_kind(std::span<const toy::TaskSample>(toy.heldout).first(200), "above");
  causal::AblationConfig cfg;
  cfg.n_controls = 2;
  cfg.seeds = {0, 1};
  const auto r = causal::ablation_eval(toy.params, sae, 0, "above", above, general, ev, 2.5, toy.ids, cfg);
  EXPECT_EQ(r.delta_ctrl_by_seed.size(), 2u);
  EXPECT_NEAR(r.delta_ctrl, (r.delta_ctrl_by_seed[0] + r.delta_ctrl_by_seed[1]) / 2, 1e-12);
  EXPECT_EQ(r.n_task, above.size());
  const auto again = causal::ablation_eval(toy.params, sae, 0, "above", above, general, ev, 2.5, toy.ids, cfg);
  EXPECT_EQ(causal::to_json(r).dump(), causal::to_json(again).dump());
  const auto csv = causal::ablation_table_csv(std::vector{r});
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "layer,feature,delta_acc,delta_prob,delta_general,delta_ctrl,odds_ratio,relation");
  EXPECT_NE(csv.find(",L0F0,"), std::string::npos);
  EXPECT_EQ(causal::to_json(r)["units"], "fraction");
}

}  // namespace
}  // namespace saediff
