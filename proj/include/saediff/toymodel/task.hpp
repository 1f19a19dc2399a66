// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic grid-world VQA. A scene places a few objects in distinct cells of
// a G×G grid; each cell becomes one visual patch encoding (object, row, col)
// through fixed random codes. Questions ask about a spatial relation between
// two objects or about existence, with yes/no answers balanced by rejection.

#pragma once

#include <algorithm>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/core/encoding.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/core/matrix.hpp"
#include "saediff/toymodel/forward.hpp"

namespace saediff::toy {

inline const std::vector<std::string>& known_relations() {
  static const std::vector<std::string> r{"above", "below", "left_of", "right_of"};
  return r;
}

struct TaskConfig {
  std::size_t grid = 3;
  std::vector<std::string> objects{"cat", "dog", "cup", "car", "tree", "ball", "sign"};
  std::size_t min_objects = 2;
  std::size_t max_objects = 3;
  std::vector<std::string> relations{"above", "below"};
  double relation_fraction = 0.5;  // rest are existence questions
  std::size_t d_patch = 16;
  std::uint64_t codebook_seed = 7;
  double patch_noise = 0.0;

  std::size_t n_visual() const { return grid * grid; }
};

inline void validate(const TaskConfig& c) {
  if (c.grid < 2) throw ConfigError("task config: grid must be at least 2");
  if (c.objects.size() < 2) throw ConfigError("task config: need at least 2 object kinds");
  if (std::set<std::string>(c.objects.begin(), c.objects.end()).size() != c.objects.size())
    throw ConfigError("task config: duplicate object names");
  if (c.min_objects < 2 || c.max_objects < c.min_objects || c.max_objects > c.grid * c.grid ||
      c.max_objects > c.objects.size())
    throw ConfigError("task config: need 2 <= min_objects <= max_objects <= min(grid², #objects)");
  for (const auto& r : c.relations)
    if (std::find(known_relations().begin(), known_relations().end(), r) == known_relations().end())
      throw ConfigError("task config: unknown relation '" + r + "'");
  if (c.relations.empty() && c.relation_fraction > 0)
    throw ConfigError("task config: relation_fraction > 0 needs at least one relation");
  if (!(c.relation_fraction >= 0 && c.relation_fraction <= 1))
    throw ConfigError("task config: relation_fraction must be in [0, 1]");
  if (c.d_patch == 0) throw ConfigError("task config: d_patch must be positive");
}

inline nlohmann::json to_json(const TaskConfig& c) {
  return {{"grid", c.grid},
          {"objects", c.objects},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},
          {"relations", c.relations},
          {"relation_fraction", c.relation_fraction},
          {"d_patch", c.d_patch},
          {"codebook_seed", c.codebook_seed},
          {"patch_noise", c.patch_noise}};
}

inline TaskConfig task_config_from_json(const nlohmann::json& j) {
  TaskConfig c;
  c.grid = j.value("grid", c.grid);
  c.objects = j.value("objects", c.objects);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.relations = j.value("relations", c.relations);
  c.relation_fraction = j.value("relation_fraction", c.relation_fraction);
  c.d_patch = j.value("d_patch", c.d_patch);
  c.codebook_seed = j.value("codebook_seed", c.codebook_seed);
  c.patch_noise = j.value("patch_noise", c.patch_noise);
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline const std::vector<std::string>& base_words() {
  static const std::vector<std::string> w{"?",     "a",     "is",  "the", "there", "of",       "above", "below",
                                          "left",  "right", "yes", "no",  "describe", "image", "objects", "in"};
  return w;
}

inline constexpr char kNeutralPrompt[] = "describe the objects in the image";

class Vocab {
 public:
  explicit Vocab(const std::vector<std::string>& objects) {
    for (const auto& w : base_words()) add(w);
    for (const auto& o : objects) add(o);
  }
  std::size_t size() const { return words_.size(); }
  const std::string& word(std::uint32_t id) const { return words_.at(id); }
  std::uint32_t id(const std::string& w) const {
    auto it = ids_.find(w);
    if (it == ids_.end()) throw FormatError("vocabulary: unknown word '" + w + "'");
    return it->second;
  }
  std::vector<std::uint32_t> encode(const std::string& text) const {
    std::vector<std::uint32_t> out;
    std::istringstream in(text);
    for (std::string w; in >> w;) out.push_back(id(w));
    return out;
  }
  std::uint32_t yes() const { return id("yes"); }
  std::uint32_t no() const { return id("no"); }

 private:
  void add(const std::string& w) {
    if (ids_.count(w)) throw ConfigError("vocabulary: duplicate word '" + w + "'");
    ids_[w] = static_cast<std::uint32_t>(words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::map<std::string, std::uint32_t> ids_;
};

// ---------------------------------------------------------------------------
// Scenes and questions

struct Placed {
  std::string object;
  std::size_t row = 0, col = 0;
  friend bool operator==(const Placed&, const Placed&) = default;
};

struct Question {
  std::string kind;  // a relation name or "exists"
  std::string a, b;  // b unused for "exists"
};

inline std::string question_text(const Question& q) {
  if (q.kind == "exists") return "is there a " + q.a + " ?";
  std::string rel = q.kind;
  if (rel == "left_of") rel = "left of";
  if (rel == "right_of") rel = "right of";
  return "is the " + q.a + " " + rel + " the " + q.b + " ?";
}

inline const Placed* find_object(const std::vector<Placed>& scene, const std::string& name) {
  for (const auto& p : scene)
    if (p.object == name) return &p;
  return nullptr;
}

// Ground truth. Relations compare grid coordinates strictly; row 0 is the top.
inline bool answer_for(const std::vector<Placed>& scene, const Question& q) {
  const Placed* a = find_object(scene, q.a);
  if (q.kind == "exists") return a != nullptr;
  const Placed* b = find_object(scene, q.b);
  if (!a || !b) throw InvariantError("relation question about an object not in the scene");
  if (q.kind == "above") return a->row < b->row;
  if (q.kind == "below") return a->row > b->row;
  if (q.kind == "left_of") return a->col < b->col;
  if (q.kind == "right_of") return a->col > b->col;
  throw InvariantError("unknown question kind '" + q.kind + "'");
}

struct TaskSample {
  std::string sample_id;
  std::vector<Placed> scene;
  std::string question;
  std::string kind;  // relation name or "exists"
  bool answer = false;
  std::set<std::string> split_tags;
  Matrix<float> patches;
  std::vector<std::uint32_t> tokens;

  ModelInput input() const { return {patches, tokens}; }
};

struct Codebook {
  Matrix<float> objects;  // [n_objects + 1 × d_patch], last row = empty cell
  Matrix<float> rows, cols;
};

inline Codebook make_codebook(const TaskConfig& c) {
  std::mt19937_64 rng(c.codebook_seed);
  std::normal_distribution<double> g;
  const double s = 1.0 / std::sqrt(double(c.d_patch));
  auto fill = [&](std::size_t n) {
    Matrix<float> m(n, c.d_patch);
    for (auto& v : m.flat()) v = static_cast<float>(s * g(rng));
    return m;
  };
  Codebook cb;
  cb.objects = fill(c.objects.size() + 1);
  cb.rows = fill(c.grid);
  cb.cols = fill(c.grid);
  return cb;
}

inline Matrix<float> render_patches(const TaskConfig& c, const Codebook& cb, const std::vector<Placed>& scene,
                                    std::mt19937_64* noise_rng = nullptr) {
  Matrix<float> p(c.n_visual(), c.d_patch);
  for (std::size_t r = 0; r < c.grid; ++r)
    for (std::size_t col = 0; col < c.grid; ++col) {
      std::size_t obj = c.objects.size();
      for (const auto& pl : scene)
        if (pl.row == r && pl.col == col)
          obj = static_cast<std::size_t>(std::find(c.objects.begin(), c.objects.end(), pl.object) - c.objects.begin());
      const std::size_t t = r * c.grid + col;
      for (std::size_t j = 0; j < c.d_patch; ++j) p(t, j) = cb.objects(obj, j) + cb.rows(r, j) + cb.cols(col, j);
    }
  if (noise_rng && c.patch_noise > 0) {
    std::normal_distribution<double> g(0, c.patch_noise);
    for (auto& v : p.flat()) v += static_cast<float>(g(*noise_rng));
  }
  return p;
}

inline std::set<std::string> tags_for(const std::vector<Placed>& scene, const std::string& kind) {
  std::set<std::string> tags{"vqa", kind == "exists" ? "general" : "spatial"};
  if (kind != "exists") tags.insert("rel:" + kind);
  if (find_object(scene, "sign")) tags.insert("sign_text");
  return tags;
}

inline TaskSample make_sample(const TaskConfig& c, const Codebook& cb, const Vocab& vocab, std::string id,
                              std::vector<Placed> scene, const Question& q, std::mt19937_64* noise_rng = nullptr) {
  TaskSample s;
  s.sample_id = std::move(id);
  s.question = question_text(q);
  s.kind = q.kind;
  s.answer = answer_for(scene, q);
  s.split_tags = tags_for(scene, q.kind);
  s.patches = render_patches(c, cb, scene, noise_rng);
  s.tokens = vocab.encode(s.question);
  s.scene = std::move(scene);
  return s;
}

// Deterministic in (config, n, seed). Each sample first draws its answer,
// then redraws scene and question until the ground truth matches.
inline std::vector<TaskSample> gen_task(const TaskConfig& c, std::size_t n, std::uint64_t seed,
                                        const std::string& id_prefix = "s") {
  validate(c);
  const Codebook cb = make_codebook(c);
  const Vocab vocab(c.objects);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  auto pick = [&](std::size_t k) { return static_cast<std::size_t>(rng() % k); };

  std::vector<TaskSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool want = u(rng) < 0.5;
    const bool relational = u(rng) < c.relation_fraction;
    const std::string kind = relational ? c.relations[pick(c.relations.size())] : "exists";
    for (;;) {
      const std::size_t k = c.min_objects + pick(c.max_objects - c.min_objects + 1);
      std::vector<std::size_t> cells(c.n_visual()), objs(c.objects.size());
      std::iota(cells.begin(), cells.end(), 0);
      std::iota(objs.begin(), objs.end(), 0);
      std::shuffle(cells.begin(), cells.end(), rng);
      std::shuffle(objs.begin(), objs.end(), rng);
      std::vector<Placed> scene;
      for (std::size_t j = 0; j < k; ++j) scene.push_back({c.objects[objs[j]], cells[j] / c.grid, cells[j] % c.grid});
      Question q{kind, "", ""};
      if (relational) {
        const std::size_t ia = pick(k);
        std::size_t ib = pick(k - 1);
        if (ib >= ia) ++ib;
        q.a = scene[ia].object;
        q.b = scene[ib].object;
      } else {
        q.a = c.objects[objs[pick(c.objects.size())]];
      }
      if (answer_for(scene, q) != want) continue;
      out.push_back(make_sample(c, cb, vocab, id_prefix + std::to_string(i), std::move(scene), q, &rng));
      break;
    }
  }
  return out;
}

// The same image with a prompt free of spatial words, tagged as the neutral
// re-run of `s`.
inline TaskSample neutral_rerun(const TaskConfig& c, const TaskSample& s) {
  const Vocab vocab(c.objects);
  TaskSample n;
  n.sample_id = s.sample_id + "~neutral";
  n.scene = s.scene;
  n.question = kNeutralPrompt;
  n.kind = "neutral";
  n.answer = false;
  n.split_tags = {"neutral_of:" + s.sample_id};
  n.patches = s.patches;
  n.tokens = vocab.encode(n.question);
  return n;
}

// ---------------------------------------------------------------------------
// JSONL dataset: a header line with the task config, then one sample per line
// with base64 little-endian f32 patches.

struct TaskDataset {
  TaskConfig config;
  std::vector<TaskSample> samples;
};

inline nlohmann::json sample_to_json(const TaskSample& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& p : s.scene) objs.push_back({{"name", p.object}, {"row", p.row}, {"col", p.col}});
  const auto bytes = std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.patches.data()),
                                                   s.patches.size() * sizeof(float));
  return {{"sample_id", s.sample_id},
          {"question", s.question},
          {"kind", s.kind},
          {"answer", s.answer ? "yes" : "no"},
          {"tags", s.split_tags},
          {"objects", objs},
          {"n_visual", s.patches.rows()},
          {"d_patch", s.patches.cols()},
          {"patches", enc::base64_encode(bytes)}};
}

inline std::string dataset_jsonl(const TaskDataset& d) {
  std::string out = nlohmann::json{{"task_config", to_json(d.config)}}.dump() + "\n";
  for (const auto& s : d.samples) out += sample_to_json(s).dump() + "\n";
  return out;
}

inline TaskDataset parse_dataset_jsonl(const std::string& text) {
  TaskDataset d;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::optional<Vocab> vocab;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "dataset line " + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      if (!header) {
        if (!j.contains("task_config")) throw FormatError(where + ": expected task_config header");
        d.config = task_config_from_json(j.at("task_config"));
        vocab.emplace(d.config.objects);
        header = true;
        continue;
      }
      TaskSample s;
      s.sample_id = j.at("sample_id").get<std::string>();
      s.question = j.at("question").get<std::string>();
      s.kind = j.at("kind").get<std::string>();
      s.answer = j.at("answer").get<std::string>() == "yes";
      s.split_tags = j.at("tags").get<std::set<std::string>>();
      for (const auto& o : j.at("objects"))
        s.scene.push_back({o.at("name").get<std::string>(), o.at("row").get<std::size_t>(), o.at("col").get<std::size_t>()});
      const auto nv = j.at("n_visual").get<std::size_t>(), dp = j.at("d_patch").get<std::size_t>();
      const auto bytes = enc::base64_decode(j.at("patches").get<std::string>());
      if (bytes.size() != nv * dp * sizeof(float))
        throw FormatError(where + ": patches hold " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(nv * dp * sizeof(float)));
      s.patches = Matrix<float>(nv, dp);
      std::memcpy(s.patches.data(), bytes.data(), bytes.size());
      s.tokens = vocab->encode(s.question);
      d.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  if (!header) throw FormatError("dataset: missing task_config header");
  return d;
}

inline void write_dataset(const TaskDataset& d, const std::filesystem::path& path) {
  bin::write_text(path, dataset_jsonl(d));
}

inline TaskDataset read_dataset(const std::filesystem::path& path) { return parse_dataset_jsonl(bin::read_text(path)); }

}  // namespace saediff::toy
