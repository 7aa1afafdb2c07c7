// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qmem/analytics.hpp"
#include "qmem/benchmarks.hpp"
#include "qmem/model.hpp"
#include "qmem/numerics.hpp"

namespace qmem {

class IoError : public Error {
 public:
  using Error::Error;
};

/// Writes `content` to `path`, creating parent directories.
void write_file(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

// --- checkpoints ---------------------------------------------------------------
//
// Layout: 8-byte magic "QMEMCKPT", u32 format version, u32 zero, u64 header
// length, UTF-8 JSON header (model config plus the tensor table with names
// and shapes), then every tensor as little-endian f64 in row-major order,
// in table order. Multi-byte integers are little-endian.

inline constexpr char kCheckpointMagic[8] = {'Q', 'M', 'E', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Mat value;
};

/// Backbone, adapters, bank and router tensors in checkpoint order.
std::vector<NamedTensor> checkpoint_tensors(const Model& model);

std::string checkpoint_bytes(const Model& model);
Model checkpoint_from_bytes(const std::string& bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// --- reports -------------------------------------------------------------------

/// Finite numbers as JSON numbers, others as the strings "inf", "-inf", "nan".
std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

std::string run_record_json(const RunRecord& rec);
RunRecord run_record_from_json(const std::string& text);

/// One row per logged evaluation: stage, epoch, split, mse,
/// grad_concentration, per-block route entropy, per-layer gradient norms.
std::string epochs_csv(const RunReport& report);

/// Columns function, method, mean, sd, runs for the "train" or "test" split.
std::string table_csv(const BenchmarkTable& table, const std::string& split);
std::string table_json(const BenchmarkTable& table);

/// Epoch, concentration and one column per layer norm.
std::string grad_profile_csv(const GradProfile& p);

/// Labeled matrix: first column holds `row_labels`.
std::string matrix_csv(const Mat& m, const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::string& corner = "");

/// File-name-safe form of a label.
std::string slug(const std::string& label);

}  // namespace qmem
