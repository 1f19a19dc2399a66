// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Activation shards: one layer's hidden states for one token sequence, with
// the visual-token span and the question text needed by split predicates.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "saediff/core/binary_io.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/core/matrix.hpp"

namespace saediff {

inline constexpr char kShardMagic[] = "ASHD";
inline constexpr std::uint32_t kShardVersion = 1;

struct VisualSpan {
  std::uint64_t start = 0;
  std::uint64_t length = 0;

  std::uint64_t end() const { return start + length; }
  bool contains(std::size_t t) const { return t >= start && t < end(); }
  friend bool operator==(const VisualSpan&, const VisualSpan&) = default;
};

struct ActivationShard {
  std::uint32_t layer = 0;
  Matrix<float> hidden;  // [n_tokens × d_model]
  VisualSpan visual;
  std::string sample_id;
  std::set<std::string> split_tags;
  std::string question;

  std::size_t n_tokens() const { return hidden.rows(); }
  std::size_t d_model() const { return hidden.cols(); }
  bool has_tag(const std::string& t) const { return split_tags.count(t) > 0; }

  friend bool operator==(const ActivationShard&, const ActivationShard&) = default;
};

inline void validate(const ActivationShard& s) {
  if (s.visual.end() > s.n_tokens())
    throw InvariantError("shard " + s.sample_id + ": visual span [" + std::to_string(s.visual.start) +
                         ", " + std::to_string(s.visual.end()) + ") exceeds n_tokens=" +
                         std::to_string(s.n_tokens()));
  if (!all_finite(s.hidden.flat()))
    throw InvariantError("shard " + s.sample_id + ": hidden contains NaN/Inf");
}

inline std::vector<std::uint8_t> encode_shard(const ActivationShard& s) {
  validate(s);
  bin::Writer w;
  w.magic(std::string_view(kShardMagic, 4));
  w.u32(kShardVersion);
  w.u32(s.layer);
  w.u64(s.n_tokens());
  w.u64(s.d_model());
  w.u64(s.visual.start);
  w.u64(s.visual.length);
  w.str32(s.sample_id);
  w.str32(s.question);
  w.u32(static_cast<std::uint32_t>(s.split_tags.size()));
  for (const auto& t : s.split_tags) w.str32(t);
  w.f32s(s.hidden.flat());
  return w.take();
}

namespace detail {

struct ShardHeader {
  ActivationShard meta;  // hidden left empty
  std::uint64_t n_tokens = 0, d_model = 0;
};

inline ShardHeader decode_shard_header(bin::Reader& r) {
  r.expect_magic(std::string_view(kShardMagic, 4), "shard");
  const auto version = r.u32("shard");
  if (version != kShardVersion)
    throw VersionError("shard: unsupported version " + std::to_string(version) + " (expected " +
                       std::to_string(kShardVersion) + ")");
  ShardHeader h;
  h.meta.layer = r.u32("shard");
  h.n_tokens = r.u64("shard");
  h.d_model = r.u64("shard");
  h.meta.visual.start = r.u64("shard");
  h.meta.visual.length = r.u64("shard");
  h.meta.sample_id = r.str32("shard");
  h.meta.question = r.str32("shard");
  const auto n_tags = r.u32("shard");
  for (std::uint32_t i = 0; i < n_tags; ++i) h.meta.split_tags.insert(r.str32("shard"));
  return h;
}

}  // namespace detail

inline ActivationShard decode_shard(std::span<const std::uint8_t> bytes) {
  bin::Reader r(bytes);
  auto h = detail::decode_shard_header(r);
  ActivationShard s = std::move(h.meta);
  s.hidden = Matrix<float>(h.n_tokens, h.d_model);
  r.f32s(s.hidden.flat(), "shard");
  if (r.remaining() != 0)
    throw FormatError("shard: " + std::to_string(r.remaining()) + " trailing bytes after payload");
  validate(s);
  return s;
}

inline void write_shard(const ActivationShard& shard, const std::filesystem::path& path) {
  bin::write_file(path, encode_shard(shard));
}

inline ActivationShard read_shard(const std::filesystem::path& path) {
  return decode_shard(bin::read_file(path));
}

// ---------------------------------------------------------------------------
// Masks

enum class MaskRegime { Full, ImageOnly, TextOnly };

inline const char* to_string(MaskRegime r) {
  switch (r) {
    case MaskRegime::Full: return "full";
    case MaskRegime::ImageOnly: return "image";
    case MaskRegime::TextOnly: return "text";
  }
  return "?";
}

inline MaskRegime parse_regime(const std::string& s) {
  if (s == "full") return MaskRegime::Full;
  if (s == "image") return MaskRegime::ImageOnly;
  if (s == "text") return MaskRegime::TextOnly;
  throw ConfigError("unknown mask regime '" + s + "' (expected full|image|text)");
}

inline bool regime_selects(const VisualSpan& span, MaskRegime regime, std::size_t t) {
  switch (regime) {
    case MaskRegime::Full: return true;
    case MaskRegime::ImageOnly: return span.contains(t);
    case MaskRegime::TextOnly: return !span.contains(t);
  }
  return false;
}

// Token indices that contribute to training and statistics under `regime`.
inline std::vector<std::size_t> mask_tokens(const ActivationShard& shard, MaskRegime regime) {
  std::vector<std::size_t> idx;
  idx.reserve(shard.n_tokens());
  for (std::size_t t = 0; t < shard.n_tokens(); ++t)
    if (regime_selects(shard.visual, regime, t)) idx.push_back(t);
  return idx;
}

// ---------------------------------------------------------------------------
// Splits

// A sample belongs to the split if its question contains any keyword
// (case-insensitive, whole words; multi-word keywords match as phrases) or
// it carries any of the listed tags.
struct SplitSpec {
  std::string name;
  std::vector<std::string> keywords;
  std::vector<std::string> tags;
};

inline std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline bool contains_phrase(const std::vector<std::string>& words, const std::vector<std::string>& phrase) {
  if (phrase.empty() || phrase.size() > words.size()) return false;
  for (std::size_t i = 0; i + phrase.size() <= words.size(); ++i)
    if (std::equal(phrase.begin(), phrase.end(), words.begin() + static_cast<std::ptrdiff_t>(i)))
      return true;
  return false;
}

inline bool split_matches(const SplitSpec& spec, const std::string& question,
                          const std::set<std::string>& tags) {
  for (const auto& t : spec.tags)
    if (tags.count(t)) return true;
  if (spec.keywords.empty()) return false;
  const auto words = words_of(question);
  for (const auto& k : spec.keywords)
    if (contains_phrase(words, words_of(k))) return true;
  return false;
}

struct SplitResult {
  std::string name;
  std::set<std::string> sample_ids;
  std::vector<std::string> warnings;
};

// Works over anything exposing sample_id, question and split_tags (shards,
// task samples, manifest rows).
template <class Item>
SplitResult build_split(std::span<const Item> corpus, const SplitSpec& spec) {
  SplitResult out{spec.name, {}, {}};
  if (spec.keywords.empty() && spec.tags.empty())
    out.warnings.push_back("split '" + spec.name + "': empty predicate selects nothing");
  for (const auto& item : corpus)
    if (split_matches(spec, item.question, item.split_tags)) out.sample_ids.insert(item.sample_id);
  if (out.sample_ids.empty() && out.warnings.empty())
    out.warnings.push_back("split '" + spec.name + "' is empty");
  return out;
}

inline nlohmann::json split_manifest(const SplitResult& s) {
  return {{"name", s.name}, {"sample_ids", std::vector<std::string>(s.sample_ids.begin(), s.sample_ids.end())}};
}

inline SplitResult parse_split_manifest(const nlohmann::json& j) {
  SplitResult s;
  s.name = j.at("name").get<std::string>();
  for (const auto& id : j.at("sample_ids")) s.sample_ids.insert(id.get<std::string>());
  return s;
}

// ---------------------------------------------------------------------------
// Corpus directories: one file per (sample, layer).

inline std::string shard_filename(const std::string& sample_id, std::uint32_t layer) {
  std::string safe;
  for (char c : sample_id) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return safe + ".L" + std::to_string(layer) + ".ashd";
}

// Sorted list of shard files in `dir` whose layer matches (or all layers).
inline std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir,
                                                      std::optional<std::uint32_t> layer = std::nullopt) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  const std::string suffix = layer ? ".L" + std::to_string(*layer) + ".ashd" : ".ashd";
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<ActivationShard> load_shards(const std::filesystem::path& dir,
                                                std::optional<std::uint32_t> layer = std::nullopt) {
  std::vector<ActivationShard> out;
  for (const auto& p : list_shards(dir, layer)) out.push_back(read_shard(p));
  return out;
}

}  // namespace saediff
