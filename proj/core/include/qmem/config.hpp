// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qmem/benchmarks.hpp"
#include "qmem/numerics.hpp"
#include "qmem/theory_suite.hpp"

namespace qmem {

/// Malformed config text, unknown keys, bad values or a missing preset.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct SweepGrid {
  std::vector<int> rank{4, 8};
  std::vector<int> atoms{4, 8};
  std::vector<int> k_active{1, 2, 4};
};

struct DriftSettings {
  std::string function = "Ackley";
  bool repeat = false;  // train the first sequence task twice instead of three variants
  int epochs = 300;     // post-training epochs per stage
  int n_source = 1000;
  int n_train = 200;
  int n_eval = 200;
};

/// Everything a command needs. `out` and `jobs` are execution details and
/// are left out of the echoed text so they never change output bytes.
struct RunConfig {
  std::string preset;
  ProtocolConfig protocol;
  std::vector<std::string> functions;  // canonical names, table order
  std::vector<Method> methods{Method::kQueryable, Method::kLora};
  std::vector<std::uint64_t> seeds{0};
  TheoryConfig theory;  // its seed follows seeds.front()
  SweepGrid sweep;
  DriftSettings drift;

  std::string out;
  int jobs = 1;

  /// Throws ConfigError.
  void validate() const;
};

/// Names of the presets compiled into the library.
std::vector<std::string> preset_names();
/// Raw text of a built-in preset. Throws ConfigError when unknown.
const std::string& preset_text(const std::string& name);

/// A built-in preset by name, or a preset file when `name_or_path` names an
/// existing file. The result is not validated yet.
RunConfig load_preset(const std::string& name_or_path);

/// Applies TOML-style text: `[section]` headers, `key = value` lines,
/// `#` comments. Values are numbers, booleans, double-quoted strings or
/// flat arrays of those. Unknown keys are rejected.
void apply_config_text(RunConfig& cfg, std::string_view text, std::string_view origin = "config");
/// One `section.key = value` override, value written as in config text.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Canonical text of every key; applying it to any RunConfig reproduces
/// `cfg` exactly.
std::string config_to_text(const RunConfig& cfg);

/// Every accepted `section.key`.
std::vector<std::string> config_keys();

/// Case-insensitive lookup that also ignores '-', '_' and spaces.
std::string resolve_function(const std::string& name);

/// Shortest text that parses back to the same double.
std::string format_double(double x);

}  // namespace qmem
