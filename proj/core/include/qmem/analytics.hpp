// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qmem/benchmarks.hpp"
#include "qmem/model.hpp"
#include "qmem/training.hpp"

namespace qmem {

inline constexpr double kUsageSmoothing = 1e-8;

/// Rows are tasks (or evaluation labels), columns atoms; each row a simplex.
struct UsageMatrix {
  std::vector<std::string> labels;
  Mat cells;

  void validate(double tol = 1e-9) const;
};

/// Mean alpha over every trace, block and routing unit.
Simplex atom_usage(const std::vector<ForwardTrace>& traces);

struct UsageEntropy {
  Vec entropy;              // per atom, nats
  std::vector<bool> unused;  // column was all zero (entropy reported as 0)
};

/// Normalizes each atom column across tasks and takes its entropy.
UsageEntropy usage_entropy(const UsageMatrix& u);

/// 0.5 (KL(a||b) + KL(b||a)) after adding `eps` to every entry and
/// renormalizing.
double symmetric_kl(const Vec& a, const Vec& b, double eps = kUsageSmoothing);

/// Pairwise symmetric KL between the rows of `u`.
Mat symmetric_kl(const UsageMatrix& u, double eps = kUsageSmoothing);

/// Usage rows per evaluation task after each training stage.
struct DriftRecord {
  std::vector<std::string> stages;  // label of the task trained in each stage
  std::vector<std::string> tasks;   // evaluation tasks
  std::vector<UsageMatrix> usage;   // one per stage, rows follow `tasks`
  std::vector<double> stage_mse;    // post-stage train MSE of the trained task
};

/// Stage-by-stage symmetric KL of one evaluation task's usage rows.
Mat route_drift(const DriftRecord& d, int task);

/// tasks x (stages - 1): drift between consecutive stages per evaluation task.
Mat stage_drift(const DriftRecord& d);

struct GradProfile {
  std::vector<int> epochs;
  std::vector<std::vector<double>> layer_norms;
  std::vector<double> concentration;
};

/// Per-epoch raw norms from the train rows of a report, with the index
/// recomputed from them.
GradProfile grad_profile(const RunReport& report);

struct SequentialTask {
  std::string label;
  BenchFn target;
  std::string instruction;
};

struct SequentialConfig {
  ModelConfig model;
  TrainSchedule schedule;  // post_epochs applies per stage
  BenchFn source;          // backbone pretraining surface
  int n_source = 1000;
  int n_train = 200;
  int n_eval = 200;
  double noise_sd = 0.05;
};

/// Three shifted variants of `base` with distinct instructions.
std::vector<SequentialTask> default_sequence(const BenchFn& base, std::uint64_t seed);

/// Trains the stages in order without resetting adapters, router, gates,
/// keys or atoms, recording usage on every task after each stage.
DriftRecord sequential_protocol(const SequentialConfig& cfg,
                                const std::vector<SequentialTask>& tasks, std::uint64_t seed);

}  // namespace qmem
