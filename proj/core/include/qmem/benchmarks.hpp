// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "qmem/training.hpp"

namespace qmem {

enum class FunctionId {
  kAckley,
  kDropwave,
  kLangermann,
  kLevy,
  kMatyas,
  kMichalewicz,
  kRastrigin,
  kSinCos,
  kStyblinskiTang,
};

/// A two-dimensional test surface with its scalable nonlinear coefficients.
/// `theta` rotates the input about the box centre before evaluation.
struct BenchFn {
  FunctionId id = FunctionId::kAckley;
  std::string name;
  std::array<std::pair<double, double>, 2> box{};
  std::vector<std::string> param_names;
  std::vector<double> params;
  double theta = 0.0;
};

/// Canonical names in table order.
const std::vector<std::string>& function_names();
BenchFn make_function(const std::string& name);

/// Noiseless value. Throws when x lies outside the box.
double eval_fn(const BenchFn& f, const Vec& x);

struct ShiftSpec {
  std::vector<double> coeff_scale;
  double theta = 0.0;
  std::uint64_t seed = 0;

  /// Scales drawn U[lo, hi] per coefficient from `seed`.
  static ShiftSpec draw(const BenchFn& f, std::uint64_t seed, double theta, double lo = 0.7,
                        double hi = 1.3);
  static ShiftSpec identity(const BenchFn& f);
};

BenchFn apply_shift(const BenchFn& f, const ShiftSpec& shift);

/// Uniform inputs over the box, targets f(x) + N(0, noise_sd^2). Inputs are
/// raw (not standardized).
Dataset gen_dataset(const BenchFn& f, int n, double noise_sd, std::uint64_t seed);

/// Per-coordinate z-scoring with statistics of a reference set.
struct Standardizer {
  Vec mean;
  Vec sd;
  static Standardizer fit(const Mat& X);
  Mat apply(const Mat& X) const;
};

struct ProtocolConfig {
  ModelConfig model;
  TrainSchedule schedule;
  int n_source = 3000;
  double source_train_fraction = 0.8;
  int n_target = 1200;
  int n_adapt = 400;
  double noise_sd = 0.05;
  double theta = 0.5235987755982988;  // pi / 6
  double scale_lo = 0.7;
  double scale_hi = 1.3;
  bool use_instruction = true;
};

/// Source and shifted target splits for one (function, seed), standardized
/// on source-train statistics.
struct TaskData {
  BenchFn base;
  BenchFn shifted;
  ShiftSpec shift;
  Standardizer z;
  Dataset source_train;
  Dataset source_test;
  Dataset target_train;
  Dataset target_test;
};

TaskData make_task(const BenchFn& f, const ProtocolConfig& cfg, std::uint64_t seed);
Instruction task_instruction(const BenchFn& f, int d_c);

struct RunRecord {
  std::string function;
  std::string method;
  std::uint64_t seed = 0;
  double best_train_mse = 0.0;
  double best_test_mse = 0.0;
  bool diverged = false;
  ShiftSpec shift;
  RunReport report;
};

struct TableRow {
  std::string function;
  std::string method;
  double train_mean = 0.0;
  double train_sd = 0.0;
  double test_mean = 0.0;
  double test_sd = 0.0;
  int runs = 0;
};

struct BenchmarkTable {
  std::vector<TableRow> rows;
  std::vector<RunRecord> runs;

  const TableRow& row(const std::string& function, const std::string& method) const;
};

/// Called after each finished (function, seed) task with its records.
using ProgressFn = std::function<void(const std::vector<RunRecord>&)>;

/// Every (function, seed) pretrains one backbone that all methods share.
/// Runs are distributed over `jobs` worker threads; results do not depend
/// on the thread count.
BenchmarkTable run_protocol(const ProtocolConfig& cfg, const std::vector<std::string>& functions,
                            const std::vector<Method>& methods,
                            const std::vector<std::uint64_t>& seeds, int jobs = 1,
                            const ProgressFn& progress = {});

/// Groups records by (function, method) in first-seen order.
BenchmarkTable tabulate(std::vector<RunRecord> runs);

/// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_sd(const std::vector<double>& v);

}  // namespace qmem
