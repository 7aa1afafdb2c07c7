// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "qmem/benchmarks.hpp"
#include "qmem/config.hpp"

namespace qmem {

struct SweepPoint {
  Method method = Method::kQueryable;
  int rank = 0;
  int atoms = 0;     // 0 for LoRA
  int k_active = 0;  // 0 for LoRA
};

/// Rank-major grid. Queryable points with k > M are skipped; LoRA points
/// vary the rank only.
std::vector<SweepPoint> sweep_points(const SweepGrid& grid, const std::vector<Method>& methods);

/// Trainable scalars (adapters, gates, bank, router) of a freshly built model.
long long count_trainable(const ModelConfig& cfg);

/// Row i is dominated when some row j has strictly smaller cost and strictly
/// smaller loss.
std::vector<bool> dominated_flags(const std::vector<double>& cost, const std::vector<double>& loss);

struct SweepRow {
  std::string function;
  SweepPoint point;
  long long params = 0;
  double train_mean = 0.0;
  double train_sd = 0.0;
  double test_mean = 0.0;
  double test_sd = 0.0;
  int runs = 0;
  bool dominated = false;  // within the same function, on (params, train_mean)
};

/// Runs the protocol at every grid point over the configured functions and
/// seeds.
std::vector<SweepRow> run_sweep(const RunConfig& cfg, const ProgressFn& progress = {});

/// Marks dominated rows within each function group.
void flag_frontier(std::vector<SweepRow>& rows);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace qmem
