// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "qmem/training.hpp"
#include "toy.hpp"

namespace qmem {
namespace {

using testing::fd_sweep;
using testing::toy_model;

Mat toy_inputs(std::uint64_t seed, int n) {
  Gaussian g(seed);
  return gaussian_matrix(g, 2, n, 1.0);
}

void full_sweep(RoutingMode mode, bool with_instruction, int depth = 6, int blocks = 3) {
  Model model = toy_model(11, mode, Method::kQueryable, depth, 8, 4, 4, blocks);
  const Mat X = toy_inputs(3, 3);
  Gaussian gy(5);
  const Mat Y = gaussian_matrix(gy, 1, 3, 1.0);
  const Instruction instr = Instruction::embed("fit the shifted surface", model.router.d_c(), 1);
  const Instruction* ip = with_instruction ? &instr : nullptr;

  LossAndGrads lg = loss_and_grads(model, X, Y, ip);
  auto params = trainable_params(model);
  auto grads = grad_views(model, lg.grads);
  std::size_t checked = 0;
  const auto bad = fd_sweep(
      params, grads, [&] { return mse_loss(forward_batch(model, X, ip).output, Y); }, 1e-6,
      1e-4, 1e-7, &checked);
  EXPECT_GT(checked, 500u);
  // Every routed path must carry signal or the sweep proves nothing.
  if (blocks >= 3) {
    EXPECT_GT(lg.grads.Q_dep_q.norm(), 0.0);
    EXPECT_GT(lg.grads.Q_dep_k.norm(), 0.0);
  }
  EXPECT_GT(lg.grads.Q_cur.norm(), 0.0);
  EXPECT_GT(lg.grads.keys[0].norm() + lg.grads.keys[1].norm() + lg.grads.keys[2].norm(), 0.0);
  EXPECT_GT(lg.grads.eta.norm(), 0.0);
  if (with_instruction) {
    EXPECT_GT(lg.grads.R_ctx.norm(), 0.0);
    EXPECT_GT(lg.grads.Q_ctx.norm(), 0.0);
  }
  for (const auto& b : bad) {
    ADD_FAILURE() << b.name << "[" << b.index << "] analytic " << b.analytic << " numeric "
                  << b.numeric;
  }
}

TEST(Backward, MatchesFiniteDifferencesPerExample) { full_sweep(RoutingMode::kPerExample, true); }
TEST(Backward, MatchesFiniteDifferencesBatchMean) { full_sweep(RoutingMode::kBatchMean, true); }
TEST(Backward, MatchesFiniteDifferencesTwoBlocks) {
  full_sweep(RoutingMode::kPerExample, true, 4, 2);
}
TEST(Backward, MatchesFiniteDifferencesWithoutInstruction) {
  full_sweep(RoutingMode::kPerExample, false);
}

}  // namespace
}  // namespace qmem
