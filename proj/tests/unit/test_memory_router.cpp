// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "qmem/memory_router.hpp"
#include "qmem/random.hpp"

namespace qmem {
namespace {

struct Fixture {
  AtomBank bank;
  RouterParams params;
};

Fixture make_setup(std::uint64_t seed, int M = 6, int r = 4, int d_k = 5, int d_c = 3, int k = 2) {
  Fixture s{AtomBank::random(M, r, d_k, seed), RouterParams::random(d_k, r, d_c, seed + 1)};
  s.params.k_active = k;
  return s;
}

TEST(LanguagePrior, IdenticalKeysGiveUniform) {
  Fixture s = make_setup(1);
  for (Vec& k : s.bank.keys) k = s.bank.keys[0];
  const Simplex p = language_prior(s.bank, s.params, Instruction::embed("task", 3));
  for (Eigen::Index m = 0; m < p.size(); ++m) EXPECT_NEAR(p[m], 1.0 / 6.0, 1e-15);
}

TEST(LanguagePrior, HotTemperatureFlattens) {
  Fixture s = make_setup(2);
  s.params.T_lang = 1e6;
  const Simplex p = language_prior(s.bank, s.params, Instruction::embed("task", 3));
  for (Eigen::Index m = 0; m < p.size(); ++m) EXPECT_NEAR(p[m], 1.0 / 6.0, 1e-6);
}

TEST(LanguagePrior, TwoAtomHandValue) {
  // d_k = d_c = 1: scores are <RMSNorm(1), RMSNorm(k_m)> = [1, 0].
  AtomBank bank;
  bank.M = 2;
  bank.r = 1;
  bank.d_k = 1;
  bank.atoms = {Mat::Identity(1, 1), Mat::Identity(1, 1)};
  bank.keys = {Vec::Ones(1), Vec::Zero(1)};
  RouterParams p = RouterParams::random(1, 1, 1, 3);
  p.eps = 1e-14;
  p.R_ctx = Mat::Ones(1, 1);
  p.k_active = 1;
  const Instruction e{"x", Vec::Ones(1)};
  const Vec rho = language_logits(bank, p, e);
  EXPECT_NEAR(rho[0], 1.0, 1e-12);
  EXPECT_EQ(rho[1], 0.0);
  const Simplex prior = language_prior(bank, p, e);
  EXPECT_NEAR(prior[0], 0.73106, 5e-6);
  EXPECT_NEAR(prior[1], 0.26894, 5e-6);
}

TEST(StateLogits, ZeroQueryGivesZero) {
  const Fixture s = make_setup(4);
  EXPECT_EQ(state_logits(s.bank, s.params, Vec::Zero(5)), Vec::Zero(6));
}

TEST(StateLogits, AlignedQueryHitsScaleLimit) {
  Fixture s = make_setup(5, 4, 3, 4);
  s.params.eps = 1e-14;
  s.params.T_attn = 0.7;
  for (int m = 0; m < 4; ++m) s.bank.keys[static_cast<std::size_t>(m)] = Vec::Unit(4, m);
  const Vec zeta = state_logits(s.bank, s.params, 3.0 * Vec::Unit(4, 0));
  EXPECT_NEAR(zeta[0], std::sqrt(4.0) / 0.7, 1e-9);
  for (int m = 1; m < 4; ++m) EXPECT_EQ(zeta[m], 0.0);
}

TEST(StateLogits, DoublingTemperatureHalves) {
  Fixture s = make_setup(6);
  Gaussian g(6);
  const Vec q = gaussian_vector(g, 5, 1.0);
  const Vec z1 = state_logits(s.bank, s.params, q);
  s.params.T_attn *= 2.0;
  EXPECT_LT((state_logits(s.bank, s.params, q) - 0.5 * z1).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(FuseLogits, ZeroTauIsIdentity) {
  Gaussian g(7);
  const Vec z = gaussian_vector(g, 4, 1.0);
  EXPECT_EQ(fuse_logits(z, Simplex(Vec::Constant(4, 0.25)), 0.0), z);
}

TEST(FuseLogits, UniformPriorShiftsByConstant) {
  Gaussian g(8);
  const Vec z = gaussian_vector(g, 5, 1.0);
  const Vec f = fuse_logits(z, Simplex::uniform(5), 1.7);
  const Vec d = f - z;
  EXPECT_LT((d.array() - d[0]).abs().maxCoeff(), 1e-14);
  EXPECT_LT((topk_softmax(f, 2).alpha.weights() - topk_softmax(z, 2).alpha.weights()).norm(), 1e-15);
}

TEST(FuseLogits, RawLogitFusionRoutesIdentically) {
  Gaussian g(9);
  for (int t = 0; t < 100; ++t) {
    const Vec zeta = gaussian_vector(g, 6, 1.0);
    const Vec rho = gaussian_vector(g, 6, 1.0);
    const double tau = 3.0 * g.uniform();
    const Vec fused = fuse_logits(zeta, softmax(rho), tau);
    const Vec raw = zeta + tau * rho;
    const TopK a = topk_softmax(fused, 3);
    const TopK b = topk_softmax(raw, 3);
    EXPECT_EQ(a.active, b.active);
    EXPECT_LT((a.alpha.weights() - b.alpha.weights()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Route, SingleAtomAlwaysSelected) {
  Fixture s = make_setup(10, 1, 3, 4, 3, 1);
  Gaussian g(10);
  const RouteResult r = route(s.bank, s.params, gaussian_vector(g, 4, 1.0), nullptr);
  EXPECT_EQ(r.alpha.weights(), Vec::Ones(1));
  EXPECT_EQ(r.S, s.bank.atoms[0]);
}

TEST(Route, ResultInvariants) {
  Fixture s = make_setup(11, 6, 4, 5, 3, 3);
  Gaussian g(11);
  for (int t = 0; t < 50; ++t) {
    const Instruction e = Instruction::embed("i" + std::to_string(t), 3);
    const RouteResult r = route(s.bank, s.params, gaussian_vector(g, 5, 1.0), &e);
    EXPECT_EQ(static_cast<int>(r.active.size()), 3);
    Mat S = Mat::Zero(4, 4);
    for (int m = 0; m < 6; ++m) {
      S += r.alpha[m] * s.bank.atoms[static_cast<std::size_t>(m)];
      if (std::find(r.active.begin(), r.active.end(), m) == r.active.end()) EXPECT_EQ(r.alpha[m], 0.0);
    }
    EXPECT_LT((S - r.S).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((r.S - routed_operator(s.bank, r.alpha)).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Route, NoLanguageTermsMatchesInstructionFree) {
  Fixture s = make_setup(12);
  s.params.tau_lang = 0.0;
  s.params.lambda_ctx = 0.0;
  Gaussian g(12);
  const Vec q = gaussian_vector(g, 5, 1.0);
  const Instruction e = Instruction::embed("anything", 3);
  const RouteResult a = route(s.bank, s.params, q, &e);
  const RouteResult b = route(s.bank, s.params, q, nullptr);
  EXPECT_EQ(a.active, b.active);
  EXPECT_EQ(a.alpha.weights(), b.alpha.weights());
  EXPECT_EQ(a.S, b.S);
}

TEST(Route, StrongPriorPicksPriorArgmax) {
  Fixture s = make_setup(13);
  s.params.tau_lang = 1e4;
  Gaussian g(13);
  const Instruction e = Instruction::embed("strong", 3);
  const Simplex p = language_prior(s.bank, s.params, e);
  Eigen::Index best = 0;
  p.weights().maxCoeff(&best);
  const RouteResult r = route(s.bank, s.params, gaussian_vector(g, 5, 1.0), &e);
  EXPECT_GE(r.alpha[best], 1.0 - 1e-6);
  EXPECT_LE((r.S - s.bank.atoms[static_cast<std::size_t>(best)]).norm(), 1e-6 * s.bank.max_atom_norm() * 4);
}

TEST(TemperedPrior, Cases) {
  const Simplex p(Vec::Map(std::vector<double>{0.8, 0.2}.data(), 2));
  EXPECT_EQ(tempered_prior(p, 1.0).weights(), p.weights());
  EXPECT_NEAR(tempered_prior(p, 0.0)[0], 0.5, 1e-15);
  const Simplex t = tempered_prior(p, 2.0);
  EXPECT_NEAR(t[0], 0.64 / 0.68, 1e-15);
  EXPECT_NEAR(t[0], 0.9412, 5e-5);
  EXPECT_NEAR(t[1], 0.0588, 5e-5);
}

TEST(VariationalOracle, UniformPriorGivesSoftmax) {
  Gaussian g(14);
  const Vec z = gaussian_vector(g, 4, 1.0);
  const OracleResult o = variational_oracle(z, Simplex::uniform(4), 1.3);
  EXPECT_LT((o.maximizer.weights() - softmax(z).weights()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(VariationalOracle, ZeroUtilityGivesTemperedPrior) {
  const Simplex p(Vec::Map(std::vector<double>{0.5, 0.3, 0.2}.data(), 3));
  const OracleResult o = variational_oracle(Vec::Zero(3), p, 2.0);
  EXPECT_LT((o.maximizer.weights() - tempered_prior(p, 2.0).weights()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(VariationalOracle, MatchesClosedFormRouter) {
  Gaussian g(15);
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + t % 6;
    const Vec z = gaussian_vector(g, n, 2.0);
    const Simplex p = softmax(gaussian_vector(g, n, 1.0));
    const double tau = 4.0 * g.uniform();
    const OracleResult o = variational_oracle(z, p, tau);
    const Simplex closed = softmax(fuse_logits(z, p, tau));
    EXPECT_LT((o.maximizer.weights() - closed.weights()).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LE(variational_objective(o.maximizer.weights(), z, tempered_prior(p, tau)),
              variational_objective(closed.weights(), z, tempered_prior(p, tau)) + 1e-10);
  }
}

TEST(TradeoffGap, ZeroTauBoundIsLogK) {
  Fixture s = make_setup(16, 6, 4, 5, 3, 3);
  Gaussian g(16);
  const Instruction e = Instruction::embed("t", 3);
  const RouteResult r = route(s.bank, s.params, gaussian_vector(g, 5, 1.0), &e);
  EXPECT_NEAR(tradeoff_gap(r, 0.0).bound, std::log(3.0), 1e-14);
}

TEST(TradeoffGap, VertexRoutingHasNoGap) {
  Fixture s = make_setup(17, 6, 4, 5, 3, 1);
  Gaussian g(17);
  const Instruction e = Instruction::embed("t", 3);
  s.params.tau_lang = 0.0;
  const RouteResult r = route(s.bank, s.params, gaussian_vector(g, 5, 1.0), &e);
  EXPECT_EQ(tradeoff_gap(r, 0.0).gap, 0.0);
}

TEST(TradeoffGap, BoundHoldsOnRandomInstances) {
  Gaussian g(18);
  for (int t = 0; t < 1000; ++t) {
    Fixture s = make_setup(1000 + static_cast<std::uint64_t>(t), 2 + t % 7, 3, 4, 3, 1);
    s.params.k_active = 1 + t % s.bank.M;
    s.params.tau_lang = 4.0 * g.uniform();
    const Instruction e = Instruction::embed("r" + std::to_string(t), 3);
    const RouteResult r = route(s.bank, s.params, gaussian_vector(g, 4, 2.0), &e);
    const TradeoffGap gap = tradeoff_gap(r, s.params.tau_lang);
    EXPECT_LE(gap.gap, gap.bound + 1e-9);
  }
}

TEST(Instruction, EmbeddingIsDeterministicWithRadius) {
  const Instruction a = Instruction::embed("fit the shifted surface", 16, 3, 2.5);
  const Instruction b = Instruction::embed("fit the shifted surface", 16, 3, 2.5);
  EXPECT_EQ(a.embedding, b.embedding);
  EXPECT_NEAR(a.embedding.norm(), 2.5, 1e-12);
  EXPECT_NE(Instruction::embed("other text", 16, 3).embedding, a.embedding);
}

TEST(AtomBank, JsonRoundTripIsExact) {
  const AtomBank b = AtomBank::random(5, 3, 4, 21);
  const AtomBank c = bank_from_json(bank_to_json(b));
  ASSERT_EQ(c.M, 5);
  for (int m = 0; m < 5; ++m) {
    EXPECT_EQ(c.atoms[static_cast<std::size_t>(m)], b.atoms[static_cast<std::size_t>(m)]);
    EXPECT_EQ(c.keys[static_cast<std::size_t>(m)], b.keys[static_cast<std::size_t>(m)]);
  }
  EXPECT_EQ(c.seed, b.seed);
}

TEST(AtomBank, ValidateRejectsBadShapes) {
  AtomBank b = AtomBank::random(3, 2, 4, 22);
  b.atoms[1] = Mat::Zero(3, 3);
  EXPECT_THROW(b.validate(), ShapeError);
}

TEST(AtomBank, ProjectionCapsSpectralNorm) {
  AtomBank b = AtomBank::random(4, 3, 4, 23);
  for (Mat& c : b.atoms) c *= 5.0;
  b.project_atoms(0.5);
  EXPECT_LE(b.max_atom_norm(), 0.5 + 1e-9);
}

}  // namespace
}  // namespace qmem
