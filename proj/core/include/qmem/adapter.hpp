// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>

#include "qmem/numerics.hpp"

namespace qmem {

/// Gated rank-space adapter for one linear map h -> W0 h.
///
/// The update is (alpha_L / r) B (I + g S) A with g = sigmoid(eta). Query
/// priors of block-entry layers live in RouterParams::layer_priors.
struct AdapterLayer {
  Mat A;  // r x d_in
  Mat B;  // d_out x r
  double eta = -2.0;
  double alpha_L = 16.0;
  double dropout_rate = 0.0;
  /// When set the gate is exactly zero and eta is ignored.
  bool gate_clamped = false;

  int rank() const { return static_cast<int>(A.rows()); }
  int d_in() const { return static_cast<int>(A.cols()); }
  int d_out() const { return static_cast<int>(B.rows()); }
  double scale() const { return alpha_L / static_cast<double>(rank()); }
  double gate() const;
  void validate() const;

  /// A ~ N(0, 1/d_in), B = 0.
  static AdapterLayer init(int d_in, int d_out, int r, double alpha_L, std::uint64_t seed);
};

double gate(double eta);

struct RankStates {
  Vec d;  // S s
  Vec t;  // s + g d
};

RankStates rank_transform(const AdapterLayer& layer, const Mat& S, const Vec& s);

/// Dense (alpha_L / r) B (I + g S) A.
Mat delta_w(const AdapterLayer& layer, const Mat& S);

/// W0h + (alpha_L / r) B t with s = A h (dropout inactive).
Vec apply_adapter(const AdapterLayer& layer, const Mat& S, const Vec& h, const Vec& W0h);

enum class Projection { kQ = 0, kK = 1, kV = 2, kO = 3 };

const char* projection_name(Projection p);

/// Per-projection adapters of one attention layer. All four share the
/// block's routed operator.
struct AttentionAdapter {
  std::array<AdapterLayer, 4> proj;

  const AdapterLayer& at(Projection p) const { return proj[static_cast<std::size_t>(p)]; }
  AdapterLayer& at(Projection p) { return proj[static_cast<std::size_t>(p)]; }
};

Mat attention_delta_w(const AttentionAdapter& att, const Mat& S, Projection p);

/// (mean_t R_Q + mean_t R_K + mean_t R_V) / 3 for token-major rank states
/// (T x r each).
Vec attention_router_state(const Mat& R_Q, const Mat& R_K, const Mat& R_V);

}  // namespace qmem
