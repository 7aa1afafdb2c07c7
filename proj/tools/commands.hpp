// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "qmem/analytics.hpp"
#include "qmem/config.hpp"

namespace qmem::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitRuntime = 1,
  kExitConfig = 2,
  kExitTheory = 3,
};

/// Default output root when --out is absent.
inline constexpr const char* kOutRootEnv = "QMEM_OUT_ROOT";

/// `$QMEM_OUT_ROOT/<command>`, or `qmem-out/<command>` when the variable is unset.
std::filesystem::path default_out(const std::string& command);

// Each command writes its files under cfg.out, progress to `log` and a
// summary to `out`. The config must already be validated.
int cmd_bench(const RunConfig& cfg, std::ostream& out, std::ostream& log);
int cmd_theory(const RunConfig& cfg, std::ostream& out, std::ostream& log);
int cmd_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& log);
int cmd_drift(const RunConfig& cfg, std::ostream& out, std::ostream& log);
/// Sequential-protocol settings and task list behind `drift`.
SequentialConfig sequential_config(const RunConfig& cfg);
std::vector<SequentialTask> drift_tasks(const RunConfig& cfg, std::uint64_t seed);

/// Rebuilds tables and gradient profiles from a bench output directory.
int cmd_report(const std::filesystem::path& bench_dir, const std::filesystem::path& out_dir,
               std::ostream& out, std::ostream& log);

/// Full command line (argv[0] included). Never throws; maps failures to
/// exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qmem::cli
