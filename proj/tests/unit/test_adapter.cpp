// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "qmem/adapter.hpp"
#include "qmem/random.hpp"

namespace qmem {
namespace {

AdapterLayer live_layer(std::uint64_t seed, int d_in = 6, int d_out = 5, int r = 3) {
  AdapterLayer l = AdapterLayer::init(d_in, d_out, r, 6.0, seed);
  Gaussian g(seed + 100);
  l.B = gaussian_matrix(g, d_out, r, 0.5);
  l.eta = 0.4;
  return l;
}

TEST(Gate, Values) {
  EXPECT_EQ(gate(0.0), 0.5);
  EXPECT_NEAR(gate(2.0), 0.8808, 5e-5);
  EXPECT_LT(gate(-1e9), 1e-300);
}

TEST(Gate, ClampedLayerIsExactlyZero) {
  AdapterLayer l = live_layer(1);
  l.gate_clamped = true;
  l.eta = 5.0;
  EXPECT_EQ(l.gate(), 0.0);
}

TEST(AdapterInit, ZeroUpdateStart) {
  const AdapterLayer l = AdapterLayer::init(8, 4, 2, 16.0, 3);
  EXPECT_EQ(l.B, Mat::Zero(4, 2));
  EXPECT_EQ(l.rank(), 2);
  EXPECT_EQ(l.scale(), 8.0);
  EXPECT_NEAR(l.gate(), 0.1192, 5e-5);
  EXPECT_GT(l.A.norm(), 0.0);
}

TEST(RankTransform, ZeroOperatorLeavesState) {
  Gaussian g(4);
  const Vec s = gaussian_vector(g, 3, 1.0);
  const RankStates rs = rank_transform(live_layer(4), Mat::Zero(3, 3), s);
  EXPECT_EQ(rs.t, s);
  EXPECT_EQ(rs.d, Vec::Zero(3));
}

TEST(RankTransform, IdentityAtomScales) {
  AdapterLayer l = live_layer(5);
  l.eta = 0.0;
  Gaussian g(5);
  const Vec s = gaussian_vector(g, 3, 1.0);
  EXPECT_LT((rank_transform(l, Mat::Identity(3, 3), s).t - 1.5 * s).norm(), 1e-15);
}

TEST(RankTransform, NormBound) {
  Gaussian g(6);
  const AdapterLayer l = live_layer(6);
  for (int t = 0; t < 1000; ++t) {
    const Mat S = gaussian_matrix(g, 3, 3, 1.0);
    const Vec s = gaussian_vector(g, 3, 1.0);
    EXPECT_LE(rank_transform(l, S, s).t.norm(), (1.0 + l.gate() * spectral_norm(S)) * s.norm() + 1e-12);
  }
}

TEST(RankTransform, RejectsShapeMismatch) {
  EXPECT_THROW(rank_transform(live_layer(7), Mat::Zero(2, 2), Vec::Zero(3)), ShapeError);
}

TEST(DeltaW, ClampedGateIsStaticLora) {
  AdapterLayer l = live_layer(8);
  l.gate_clamped = true;
  Gaussian g(8);
  EXPECT_EQ(delta_w(l, gaussian_matrix(g, 3, 3, 1.0)), l.scale() * l.B * l.A);
}

TEST(DeltaW, IdentityAtomAlgebra) {
  const AdapterLayer l = live_layer(9);
  const Mat expect = l.scale() * (1.0 + l.gate()) * l.B * l.A;
  EXPECT_LT((delta_w(l, Mat::Identity(3, 3)) - expect).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(DeltaW, VectorBound) {
  Gaussian g(10);
  const AdapterLayer l = live_layer(10);
  const Mat S = gaussian_matrix(g, 3, 3, 1.0);
  const Mat dW = delta_w(l, S);
  const double c = l.scale() * spectral_norm(l.B) * (1.0 + l.gate() * spectral_norm(S)) * spectral_norm(l.A);
  for (int t = 0; t < 1000; ++t) {
    const Vec x = gaussian_vector(g, 6, 1.0);
    EXPECT_LE((dW * x).norm(), c * x.norm() * (1.0 + 1e-9));
  }
}

TEST(DeltaW, LinearInOperator) {
  Gaussian g(11);
  const AdapterLayer l = live_layer(11);
  const Mat S1 = gaussian_matrix(g, 3, 3, 1.0);
  const Mat S2 = gaussian_matrix(g, 3, 3, 1.0);
  const Mat lhs = delta_w(l, 2.0 * S1 - S2) - delta_w(l, Mat::Zero(3, 3));
  const Mat rhs = 2.0 * (delta_w(l, S1) - delta_w(l, Mat::Zero(3, 3))) -
                  (delta_w(l, S2) - delta_w(l, Mat::Zero(3, 3)));
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ApplyAdapter, DeadAdapterPassesThrough) {
  AdapterLayer l = live_layer(12);
  l.A.setZero();
  Gaussian g(12);
  const Vec W0h = gaussian_vector(g, 5, 1.0);
  EXPECT_EQ(apply_adapter(l, gaussian_matrix(g, 3, 3, 1.0), gaussian_vector(g, 6, 1.0), W0h), W0h);
}

TEST(ApplyAdapter, MatchesDenseUpdate) {
  Gaussian g(13);
  for (int t = 0; t < 100; ++t) {
    const AdapterLayer l = live_layer(1000 + static_cast<std::uint64_t>(t));
    const Mat S = gaussian_matrix(g, 3, 3, 1.0);
    const Vec h = gaussian_vector(g, 6, 1.0);
    const Vec W0h = gaussian_vector(g, 5, 1.0);
    EXPECT_LT((apply_adapter(l, S, h, W0h) - (W0h + delta_w(l, S) * h)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(AttentionDeltaW, SymmetricProjectionsAgree) {
  AttentionAdapter att;
  for (AdapterLayer& p : att.proj) p = live_layer(14);
  Gaussian g(14);
  const Mat S = gaussian_matrix(g, 3, 3, 1.0);
  const Mat q = attention_delta_w(att, S, Projection::kQ);
  for (Projection p : {Projection::kK, Projection::kV, Projection::kO}) {
    EXPECT_EQ(attention_delta_w(att, S, p), q);
  }
}

TEST(AttentionDeltaW, ClampedGatesArePlainLora) {
  AttentionAdapter att;
  for (int i = 0; i < 4; ++i) {
    att.proj[static_cast<std::size_t>(i)] = live_layer(15 + static_cast<std::uint64_t>(i));
    att.proj[static_cast<std::size_t>(i)].gate_clamped = true;
  }
  Gaussian g(15);
  const Mat S = gaussian_matrix(g, 3, 3, 1.0);
  for (Projection p : {Projection::kQ, Projection::kK, Projection::kV, Projection::kO}) {
    const AdapterLayer& l = att.at(p);
    EXPECT_EQ(attention_delta_w(att, S, p), l.scale() * l.B * l.A);
  }
  EXPECT_STREQ(projection_name(Projection::kV), "V");
}

TEST(AttentionRouterState, Averages) {
  Gaussian g(16);
  const Vec v = gaussian_vector(g, 3, 1.0);
  const Mat one = v.transpose();
  EXPECT_LT((attention_router_state(one, one, one) - v).norm(), 1e-15);
  const Mat zero = Mat::Zero(1, 3);
  EXPECT_LT((attention_router_state(one, zero, zero) - v / 3.0).norm(), 1e-15);

  Mat Rq(2, 2), Rk(2, 2), Rv(2, 2);
  Rq << 1, 2, 3, 4;
  Rk << 0, 2, 0, 0;
  Rv << -1, 0, 1, 2;
  // token means: Q (2, 3), K (0, 1), V (0, 1); average (2/3, 5/3)
  const Vec u = attention_router_state(Rq, Rk, Rv);
  EXPECT_NEAR(u[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(u[1], 5.0 / 3.0, 1e-15);
}

TEST(AttentionRouterState, RejectsEmptyTokens) {
  const Mat e(0, 3);
  EXPECT_THROW(attention_router_state(e, e, e), Error);
}

}  // namespace
}  // namespace qmem
