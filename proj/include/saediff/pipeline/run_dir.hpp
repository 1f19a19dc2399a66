// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run directory bookkeeping: the single-owner lock, content hashes and the
// per-stage manifests that make stages restartable.

#pragma once

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "saediff/actstore.hpp"
#include "saediff/core/binary_io.hpp"
#include "saediff/core/encoding.hpp"
#include "saediff/core/errors.hpp"
#include "saediff/sae.hpp"
#include "saediff/toymodel/params.hpp"

namespace saediff::pipeline {

inline constexpr char kVersion[] = "0.1.0";
inline constexpr char kLockName[] = ".sae-diff.lock";

namespace fs = std::filesystem;

// Held for the lifetime of the object. A lock left by a process that no
// longer exists is taken over.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / kLockName) {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const auto pid = std::to_string(::getpid());
        if (::write(fd, pid.data(), pid.size()) < 0) {
          ::close(fd);
          throw IoError("cannot write lock file " + path_.string());
        }
        ::close(fd);
        return;
      }
      if (errno != EEXIST) throw IoError("cannot create lock file " + path_.string());
      const auto owner = read_owner();
      if (owner > 0 && (::kill(owner, 0) == 0 || errno == EPERM))
        throw IoError("run directory " + dir.string() + " is locked by process " + std::to_string(owner));
      fs::remove(path_);
    }
    throw IoError("cannot acquire lock " + path_.string());
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  long read_owner() const {
    try {
      return std::stol(bin::read_text(path_));
    } catch (const std::exception&) {
      return 0;
    }
  }
  fs::path path_;
};

inline std::string file_sha256(const fs::path& p) { return enc::sha256_hex(bin::read_file(p)); }

// Regular files under `p` (or `p` itself), sorted, skipping the lock.
inline std::vector<fs::path> files_under(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_regular_file(p)) return {p};
  if (!fs::is_directory(p)) return out;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file() && e.path().filename() != kLockName) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Paths inside the run directory are stored relative to it so manifests and
// reports do not depend on where the run lives.
inline std::string display_path(const fs::path& p, const fs::path& root) {
  const auto rel = fs::path(p).lexically_normal().lexically_relative(fs::path(root).lexically_normal());
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return fs::absolute(p).lexically_normal().generic_string();
}

struct FileHash {
  std::string path;
  std::string sha256;
};

inline std::vector<FileHash> hash_files(const std::vector<fs::path>& files, const fs::path& root) {
  std::vector<FileHash> out;
  for (const auto& f : files) out.push_back({display_path(f, root), file_sha256(f)});
  return out;
}

inline nlohmann::json to_json(const std::vector<FileHash>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& h : v) a.push_back({{"path", h.path}, {"sha256", h.sha256}});
  return a;
}

struct StageSpec {
  std::string name;
  nlohmann::json config;            // the config sections the stage reads
  nlohmann::json seeds;             // named seeds it uses
  std::vector<fs::path> inputs;     // files or directories that must exist
  std::vector<fs::path> optional_inputs;
  std::vector<fs::path> outputs;    // files or directories the stage owns
};

struct StageOutcome {
  bool reused = false;
  nlohmann::json manifest;
};

inline fs::path manifest_path(const fs::path& run_dir, const std::string& stage) {
  return run_dir / "manifests" / (stage + ".json");
}

// Runs `body` unless the stage's previous manifest has the same key (config
// sections + input hashes) and every recorded output is unchanged. `body`
// returns warnings; it may throw, in which case no manifest is written.
inline StageOutcome run_stage(const fs::path& run_dir, const StageSpec& spec, const std::string& config_hash,
                              const std::function<std::vector<std::string>()>& body) {
  std::vector<fs::path> in_files;
  for (const auto& p : spec.inputs) {
    if (!fs::exists(p)) throw IoError("stage " + spec.name + ": missing input " + p.string());
    const auto f = files_under(p);
    if (f.empty()) throw IoError("stage " + spec.name + ": input " + p.string() + " is empty");
    in_files.insert(in_files.end(), f.begin(), f.end());
  }
  for (const auto& p : spec.optional_inputs) {
    const auto f = files_under(p);
    in_files.insert(in_files.end(), f.begin(), f.end());
  }
  const auto inputs = hash_files(in_files, run_dir);
  const std::string key =
      enc::sha256_hex(nlohmann::json{{"stage", spec.name}, {"config", spec.config}, {"inputs", to_json(inputs)},
                                     {"version", kVersion}}
                          .dump());

  const auto mpath = manifest_path(run_dir, spec.name);
  if (fs::exists(mpath)) {
    try {
      const auto old = nlohmann::json::parse(bin::read_text(mpath));
      bool same = old.value("key", "") == key;
      for (const auto& o : old.value("outputs", nlohmann::json::array())) {
        if (!same) break;
        const auto p = run_dir / o.at("path").get<std::string>();
        same = fs::exists(p) && file_sha256(p) == o.at("sha256").get<std::string>();
      }
      if (same) return {true, old};
    } catch (const std::exception&) {
      // unreadable manifest: rerun
    }
    fs::remove(mpath);
  }

  for (const auto& o : spec.outputs)
    if (fs::is_directory(o)) fs::remove_all(o);
    else if (fs::exists(o)) fs::remove(o);
  const auto warnings = body();

  std::vector<fs::path> out_files;
  for (const auto& o : spec.outputs) {
    const auto f = files_under(o);
    out_files.insert(out_files.end(), f.begin(), f.end());
  }
  nlohmann::json m{{"stage", spec.name},
                   {"key", key},
                   {"config_hash", config_hash},
                   {"config", spec.config},
                   {"seeds", spec.seeds},
                   {"versions",
                    {{"sae-diff", kVersion},
                     {"shard_format", kShardVersion},
                     {"sae_checkpoint", kSaeVersion},
                     {"toy_checkpoint", toy::kToyVersion}}},
                   {"inputs", to_json(inputs)},
                   {"outputs", to_json(hash_files(out_files, run_dir))},
                   {"warnings", warnings}};
  fs::create_directories(mpath.parent_path());
  const auto tmp = mpath.string() + ".tmp";
  bin::write_text(tmp, m.dump(2) + "\n");
  fs::rename(tmp, mpath);
  return {false, m};
}

}  // namespace saediff::pipeline
