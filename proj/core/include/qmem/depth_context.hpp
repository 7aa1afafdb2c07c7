// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <utility>
#include <vector>

#include "qmem/memory_router.hpp"
#include "qmem/numerics.hpp"

namespace qmem {

/// Contiguous half-open layer ranges [begin, end) in depth order.
struct BlockPartition {
  std::vector<std::pair<int, int>> blocks;

  /// `count` equal blocks over `layers` layers; leftover layers join the last.
  static BlockPartition equal(int layers, int count);

  int size() const { return static_cast<int>(blocks.size()); }
  int layers() const { return blocks.empty() ? 0 : blocks.back().second; }
  int block_of(int layer) const;
  bool is_entry(int layer) const;
  void validate(int layers) const;
};

/// Running block sums plus the finished block means.
struct DepthContext {
  std::vector<Vec> summaries;

  void begin_block(int r);
  void accumulate(const Vec& s);
  /// Closes the running block and appends its mean to `summaries`.
  void end_block();
  bool in_block() const { return open_; }

 private:
  Vec z_;
  int n_ = 0;
  bool open_ = false;
};

Vec block_mean(const std::vector<Vec>& states);

/// xi_i = <RMSNorm(Q_dep_q q0), RMSNorm(Q_dep_k sbar_i)> / (sqrt(d_k) T_dep).
Vec depth_logits(const RouterParams& params, const Vec& q0, const DepthContext& ctx);

/// sum_i beta_i sbar_i with beta = softmax(xi); zero for the first block.
Vec depth_summary(const RouterParams& params, const Vec& q0, const DepthContext& ctx);

/// Intermediate values of the query construction, kept for backprop.
struct QueryParts {
  Vec q0;
  Vec xi;    // empty for the first block
  Vec beta;  // empty for the first block
  Vec u;
  Vec q;
};

QueryParts build_query_parts(const RouterParams& params, const Vec& w, const Vec& s_entry,
                             const Instruction* instr, const DepthContext& ctx);

/// q0 = w + Q_cur s_entry + lambda_ctx Q_ctx e, then q = q0 + Q_dep u.
Vec build_query(const RouterParams& params, const Vec& w, const Vec& s_entry,
                const Instruction* instr, const DepthContext& ctx);

}  // namespace qmem
