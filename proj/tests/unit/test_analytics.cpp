// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "qmem/analytics.hpp"
#include "toy.hpp"

namespace qmem {
namespace {

Vec v(std::initializer_list<double> xs) {
  Vec out(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) out[i++] = x;
  return out;
}

ForwardTrace trace_with(const std::vector<Vec>& alphas) {
  ForwardTrace t;
  t.batch = 1;
  for (const Vec& a : alphas) {
    BlockTrace b;
    RouteResult r;
    r.alpha = Simplex(a);
    b.routes.push_back(r);
    t.blocks.push_back(b);
  }
  return t;
}

TEST(AtomUsage, SingleTraceSingleBlock) {
  const Simplex u = atom_usage({trace_with({v({0.2, 0.8, 0})})});
  EXPECT_EQ(u.weights(), v({0.2, 0.8, 0}));
}

TEST(AtomUsage, AllOnOneAtomIsVertex) {
  const Simplex u = atom_usage({trace_with({v({1, 0}), v({1, 0})}), trace_with({v({1, 0})})});
  EXPECT_EQ(u.weights(), v({1, 0}));
}

TEST(AtomUsage, AveragesTraces) {
  const Simplex u = atom_usage({trace_with({v({1, 0})}), trace_with({v({0, 1})})});
  EXPECT_EQ(u.weights(), v({0.5, 0.5}));
  EXPECT_THROW(atom_usage({}), Error);
}

UsageMatrix usage(std::vector<std::string> labels, std::vector<Vec> rows) {
  UsageMatrix u;
  u.labels = std::move(labels);
  u.cells.resize(static_cast<Eigen::Index>(rows.size()), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) u.cells.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return u;
}

TEST(UsageEntropy, Cases) {
  const UsageMatrix u = usage({"a", "b"}, {v({0.5, 0.3, 0.0, 0.2}), v({0.5, 0.1, 0.0, 0.4})});
  const UsageEntropy e = usage_entropy(u);
  EXPECT_NEAR(e.entropy[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(e.entropy[1], 0.5623351446, 1e-9);
  EXPECT_EQ(e.entropy[2], 0.0);
  EXPECT_TRUE(e.unused[2]);
  EXPECT_FALSE(e.unused[0]);
  const UsageMatrix one = usage({"a", "b"}, {v({1, 0}), v({0, 1})});
  EXPECT_EQ(usage_entropy(one).entropy, Vec::Zero(2));
  EXPECT_THROW(usage_entropy(usage({"a"}, {v({1, 0})})), Error);
}

TEST(SymmetricKl, HandValueAndSymmetry) {
  const Vec a = v({0.5, 0.5});
  const Vec b = v({0.9, 0.1});
  const double kab = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  const double kba = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  EXPECT_NEAR(symmetric_kl(a, b), 0.5 * (kab + kba), 1e-7);
  EXPECT_EQ(symmetric_kl(a, b), symmetric_kl(b, a));
  EXPECT_EQ(symmetric_kl(a, a), 0.0);
}

TEST(SymmetricKl, SmoothingHandlesExactZeros) {
  const double d = symmetric_kl(v({1, 0}), v({0, 1}));
  EXPECT_TRUE(std::isfinite(d));
  EXPECT_GT(d, 10.0);
}

TEST(SymmetricKl, MatrixIsSymmetricWithZeroDiagonal) {
  const UsageMatrix u = usage({"a", "b", "c"}, {v({0.7, 0.3, 0}), v({0.1, 0.6, 0.3}), v({0.2, 0.2, 0.6})});
  const Mat K = symmetric_kl(u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(K(i, i), 0.0);
    for (int j = 0; j < 3; ++j) {
      EXPECT_EQ(K(i, j), K(j, i));
      EXPECT_GE(K(i, j), 0.0);
    }
  }
}

TEST(UsageMatrix, RejectsNonSimplexRows) {
  EXPECT_NO_THROW(usage({"a"}, {v({0.4, 0.6})}).validate());
  EXPECT_THROW(usage({"a"}, {v({0.4, 0.7})}).validate(), Error);
}

DriftRecord record() {
  DriftRecord d;
  d.stages = {"s0", "s1", "s2"};
  d.tasks = {"a", "b"};
  d.usage = {usage({"a", "b"}, {v({0.6, 0.4}), v({0.5, 0.5})}),
             usage({"a", "b"}, {v({0.6, 0.4}), v({0.2, 0.8})}),
             usage({"a", "b"}, {v({0.3, 0.7}), v({0.2, 0.8})})};
  d.stage_mse = {1.0, 0.5, 0.4};
  return d;
}

TEST(RouteDrift, StageMatrixAndTaskMatrix) {
  const DriftRecord d = record();
  const Mat s = stage_drift(d);
  ASSERT_EQ(s.rows(), 2);
  ASSERT_EQ(s.cols(), 2);
  EXPECT_EQ(s(0, 0), 0.0);  // task a unchanged by stage 1
  EXPECT_EQ(s(1, 1), 0.0);  // task b unchanged by stage 2
  EXPECT_EQ(s(1, 0), symmetric_kl(v({0.5, 0.5}), v({0.2, 0.8})));
  const Mat r = route_drift(d, 0);
  ASSERT_EQ(r.rows(), 3);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(r(i, i), 0.0);
    for (int j = 0; j < 3; ++j) EXPECT_EQ(r(i, j), r(j, i));
  }
}

TEST(RouteDrift, SingleStageIsEmpty) {
  DriftRecord d = record();
  d.stages.resize(1);
  d.usage.resize(1);
  d.stage_mse.resize(1);
  EXPECT_EQ(stage_drift(d).cols(), 0);
}

TEST(GradProfile, RecomputesConcentrationFromRawNorms) {
  RunReport rep;
  EpochRecord a;
  a.epoch = 0;
  a.split = "train";
  a.layer_grad_norms = {1.0, 3.0, 2.0};
  a.grad_concentration = concentration_index(a.layer_grad_norms);
  EpochRecord t = a;
  t.split = "test";
  EpochRecord b = a;
  b.epoch = 1;
  b.layer_grad_norms = {0.5, 0.5, 0.5};
  b.grad_concentration = concentration_index(b.layer_grad_norms);
  rep.post = {a, t, b};
  const GradProfile p = grad_profile(rep);
  ASSERT_EQ(p.epochs, (std::vector<int>{0, 1}));
  EXPECT_NEAR(p.concentration[0], 1.5, 1e-15);
  EXPECT_EQ(p.concentration[1], 1.0);
}

TEST(GradProfile, LoggedRunMatchesRecomputation) {
  Model m = testing::toy_model(3);
  ProtocolConfig pc;
  pc.model = m.config;
  pc.schedule.pretrain_epochs = 1;
  pc.schedule.post_epochs = 4;
  pc.schedule.batch_size = 16;
  pc.n_source = 60;
  pc.n_target = 50;
  pc.n_adapt = 30;
  const TaskData task = make_task(make_function("Levy"), pc, 3);
  const RunReport rep = train(m, task.source_train, task.target_train, task.target_test, nullptr,
                              pc.schedule, 3);
  const GradProfile p = grad_profile(rep);
  ASSERT_EQ(p.epochs.size(), 4u);
  for (std::size_t i = 0; i < p.epochs.size(); ++i) {
    const std::vector<double>& n = p.layer_norms[i];
    double mx = 0.0, sum = 0.0;
    for (double x : n) {
      mx = std::max(mx, x);
      sum += x;
    }
    EXPECT_EQ(p.concentration[i], mx / (sum / static_cast<double>(n.size())));
  }
}

TEST(Sequential, OneTaskGivesSingleStage) {
  SequentialConfig c;
  c.model = testing::toy_model(4).config;
  c.schedule.pretrain_epochs = 1;
  c.schedule.post_epochs = 1;
  c.schedule.batch_size = 16;
  c.source = make_function("Ackley");
  c.n_source = 40;
  c.n_train = 20;
  c.n_eval = 20;
  std::vector<SequentialTask> tasks = default_sequence(c.source, 4);
  ASSERT_EQ(tasks.size(), 3u);
  tasks.resize(1);
  const DriftRecord d = sequential_protocol(c, tasks, 4);
  EXPECT_EQ(d.usage.size(), 1u);
  EXPECT_EQ(stage_drift(d).size(), 0);
  d.usage[0].validate();
}

TEST(Sequential, ThreeStagesRecordValidUsage) {
  SequentialConfig c;
  c.model = testing::toy_model(5).config;
  c.schedule.pretrain_epochs = 1;
  c.schedule.post_epochs = 2;
  c.schedule.batch_size = 16;
  c.source = make_function("Levy");
  c.n_source = 40;
  c.n_train = 20;
  c.n_eval = 20;
  const DriftRecord d = sequential_protocol(c, default_sequence(c.source, 5), 5);
  ASSERT_EQ(d.usage.size(), 3u);
  for (const UsageMatrix& u : d.usage) {
    EXPECT_EQ(u.cells.rows(), 3);
    u.validate();
  }
  const Mat s = stage_drift(d);
  EXPECT_EQ(s.cols(), 2);
  EXPECT_GE(s.minCoeff(), 0.0);
}

}  // namespace
}  // namespace qmem
