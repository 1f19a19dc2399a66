// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace saediff {

// Base for every error the toolkit raises on purpose. The CLI maps the
// `kind()` string into its machine-readable error JSON.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

#define SAEDIFF_DEFINE_ERROR(Name, Kind)                              \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(what) {}           \
    const char* kind() const noexcept override { return Kind; }       \
  };

SAEDIFF_DEFINE_ERROR(InvariantError, "invariant")
SAEDIFF_DEFINE_ERROR(DimensionError, "dimension")
SAEDIFF_DEFINE_ERROR(FormatError, "format")
SAEDIFF_DEFINE_ERROR(TruncationError, "truncated")
SAEDIFF_DEFINE_ERROR(VersionError, "version")
SAEDIFF_DEFINE_ERROR(IoError, "io")
SAEDIFF_DEFINE_ERROR(EmptyInputError, "empty_input")
SAEDIFF_DEFINE_ERROR(TrainingError, "training")
SAEDIFF_DEFINE_ERROR(UnknownSiteError, "unknown_site")
SAEDIFF_DEFINE_ERROR(ApiError, "api")
SAEDIFF_DEFINE_ERROR(ConfigError, "config")

#undef SAEDIFF_DEFINE_ERROR

}  // namespace saediff
