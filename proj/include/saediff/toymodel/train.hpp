// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Yes/no readout, Adam training on the grid task, and dataset statistics
// used by the causal tools.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "saediff/core/adam.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/toymodel/forward.hpp"
#include "saediff/toymodel/task.hpp"

namespace saediff::toy {

struct AnswerIds {
  std::uint32_t yes = 0, no = 0;
};

inline AnswerIds answer_ids(const TaskConfig& c) {
  const Vocab v(c.objects);
  return {v.yes(), v.no()};
}

// P(yes) from a softmax over the {yes, no} logits of the final token.
template <class T>
double p_yes(const Tape<T>& tp, AnswerIds ids) {
  const auto row = tp.logits.row(tp.n_tokens - 1);
  const double d = double(row[ids.yes]) - double(row[ids.no]);
  return 1.0 / (1.0 + std::exp(-d));
}

// log P(target) under the two-way softmax; the training loss is its negation.
template <class T>
struct AnswerLogProb : Objective<T> {
  AnswerIds ids;
  bool target = true;
  AnswerLogProb(AnswerIds i, bool t) : ids(i), target(t) {}

  T value(const Tape<T>& tp) const override {
    const auto row = tp.logits.row(tp.n_tokens - 1);
    const T d = target ? row[ids.yes] - row[ids.no] : row[ids.no] - row[ids.yes];
    return -std::log1p(std::exp(-d));
  }
  void seed(const Tape<T>& tp, SiteGrads<T>& seeds) const override {
    auto& g = seeds[Site::logits()];
    if (g.empty()) g = Matrix<T>(tp.logits.rows(), tp.logits.cols());
    const auto row = tp.logits.row(tp.n_tokens - 1);
    const T d = target ? row[ids.yes] - row[ids.no] : row[ids.no] - row[ids.yes];
    const T s = T(1) / (T(1) + std::exp(d));  // ∂/∂d of −log(1+e^{−d})
    const std::size_t last = tp.n_tokens - 1;
    g(last, target ? ids.yes : ids.no) += s;
    g(last, target ? ids.no : ids.yes) -= s;
  }
};

struct EvalResult {
  std::size_t n = 0;
  double accuracy = 0;
  double mean_p_correct = 0;
  double mean_loss = 0;
};

template <class T = float>
EvalResult evaluate(const ModelParams<T>& p, std::span<const TaskSample> samples, AnswerIds ids,
                    const Hooks<T>& hooks = {}) {
  EvalResult r;
  for (const auto& s : samples) {
    const auto tp = forward(p, s.input(), hooks, false);
    const double py = p_yes(tp, ids);
    const double pc = s.answer ? py : 1.0 - py;
    r.accuracy += (pc > 0.5) ? 1.0 : 0.0;
    r.mean_p_correct += pc;
    r.mean_loss += -std::log(std::max(pc, 1e-300));
    ++r.n;
  }
  if (r.n) {
    r.accuracy /= double(r.n);
    r.mean_p_correct /= double(r.n);
    r.mean_loss /= double(r.n);
  }
  return r;
}

inline std::vector<TaskSample> filter_kind(std::span<const TaskSample> s, const std::string& kind) {
  std::vector<TaskSample> out;
  for (const auto& x : s)
    if (x.kind == kind) out.push_back(x);
  return out;
}

struct ToyTrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  bool cosine = true;            // cosine decay to lr/10 after linear warmup
  std::size_t warmup_steps = 100;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  bool shuffle_labels = false;  // control: train on permuted answers
};

inline nlohmann::json to_json(const ToyTrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"cosine", c.cosine},
          {"warmup_steps", c.warmup_steps},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"shuffle_labels", c.shuffle_labels}};
}

inline ToyTrainConfig toy_train_config_from_json(const nlohmann::json& j) {
  ToyTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.cosine = j.value("cosine", c.cosine);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.shuffle_labels = j.value("shuffle_labels", c.shuffle_labels);
  if (c.batch_size == 0 || c.epochs == 0) throw ConfigError("toy training: epochs and batch_size must be positive");
  if (!(c.lr > 0)) throw ConfigError("toy training: lr must be positive");
  return c;
}

struct ToyTrainReport {
  std::vector<double> epoch_loss;
  EvalResult train, heldout;
};

inline nlohmann::json to_json(const ToyTrainReport& r) {
  auto ev = [](const EvalResult& e) {
    return nlohmann::json{{"n", e.n}, {"accuracy", e.accuracy}, {"mean_p_correct", e.mean_p_correct},
                          {"mean_loss", e.mean_loss}};
  };
  return {{"epoch_loss", r.epoch_loss}, {"train", ev(r.train)}, {"heldout", ev(r.heldout)}};
}

// Minibatch Adam on the two-way answer loss. Deterministic in (params, data,
// config).
inline ToyTrainReport train_task(ModelParams<float>& p, std::span<const TaskSample> train,
                                 std::span<const TaskSample> heldout, AnswerIds ids, const ToyTrainConfig& cfg) {
  if (train.empty()) throw EmptyInputError("toy training: empty training set");
  std::mt19937_64 rng(cfg.seed);
  std::vector<bool> labels;
  for (const auto& s : train) labels.push_back(s.answer);
  if (cfg.shuffle_labels) {
    std::vector<bool> shuffled = labels;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    labels = shuffled;
  }

  Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<std::size_t> blocks;
  p.visit([&](const std::string&, Matrix<float>& m) { blocks.push_back(adam.add_block(m.size())); });

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  auto lr_at = [&](std::size_t step) {
    if (!cfg.cosine) return cfg.lr;
    if (step < cfg.warmup_steps) return cfg.lr * double(step + 1) / double(cfg.warmup_steps);
    const double t = double(step - cfg.warmup_steps) / double(std::max<std::size_t>(1, total_steps - cfg.warmup_steps));
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(t, 1.0))));
  };
  std::size_t step = 0;
  ToyTrainReport rep;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      auto g = ModelParams<float>::zeros(p.config);
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& s = train[order[i]];
        const auto tp = forward(p, s.input());
        AnswerLogProb<float> obj(ids, labels[order[i]]);
        loss -= obj.value(tp);
        backward(p, tp, obj, {}, {}, &g);
      }
      // g holds ∇ log P; descend on the mean negative log-likelihood.
      const float scale = -1.0f / float(b1 - b0);
      std::vector<Matrix<float>*> gs;
      g.visit([&](const std::string&, Matrix<float>& m) {
        for (auto& v : m.flat()) v *= scale;
        gs.push_back(&m);
      });
      adam.begin_step();
      const double lr = lr_at(step++);
      std::size_t k = 0;
      p.visit([&](const std::string& name, Matrix<float>& m) {
        auto grad = gs[k]->flat();
        if (cfg.weight_decay > 0 && name.find("ln") == std::string::npos && name.find(".b") == std::string::npos)
          for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += float(cfg.weight_decay) * m.flat()[i];
        adam.update(blocks[k], m.flat(), std::span<const float>(grad), lr);
        ++k;
      });
    }
    const double mean = loss / double(train.size());
    if (!std::isfinite(mean)) throw TrainingError("toy training: loss diverged at epoch " + std::to_string(e));
    rep.epoch_loss.push_back(mean);
  }
  rep.train = evaluate(p, train, ids);
  if (!heldout.empty()) rep.heldout = evaluate(p, heldout, ids);
  return rep;
}

// Per-position mean of the projected visual embeddings over a dataset:
// [n_visual × d_model], accumulated as a running mean in double. Used as the
// corruption baseline for attribution.
template <class T = float>
Matrix<T> mean_embedding(const ModelParams<T>& p, std::span<const TaskSample> samples) {
  if (samples.empty()) throw EmptyInputError("mean_embedding: empty dataset");
  const auto& c = p.config;
  Matrix<double> mean(c.n_visual_tokens, c.d_model);
  std::size_t n = 0;
  for (const auto& s : samples) {
    require_dims(s.patches.rows() == c.n_visual_tokens, "mean_embedding: sample " + s.sample_id + " has " +
                                                            std::to_string(s.patches.rows()) + " patches");
    const auto v = project_visual(p.proj, s.patches.template cast<T>());
    ++n;
    for (std::size_t i = 0; i < mean.size(); ++i) mean.flat()[i] += (double(v.flat()[i]) - mean.flat()[i]) / double(n);
  }
  return mean.template cast<T>();
}

}  // namespace saediff::toy
