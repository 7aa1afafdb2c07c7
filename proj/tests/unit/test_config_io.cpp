// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <limits>

#include <gtest/gtest.h>

#include "qmem/config.hpp"
#include "qmem/io.hpp"
#include "qmem/sweep.hpp"
#include "toy.hpp"

namespace qmem {
namespace {

namespace fs = std::filesystem;

TEST(Presets, BuiltInsLoadAndValidate) {
  const std::vector<std::string> names = preset_names();
  for (const char* want : {"deep-narrow", "wide", "smoke"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  }
  for (const std::string& n : names) {
    const RunConfig c = load_preset(n);
    EXPECT_NO_THROW(c.validate()) << n;
    EXPECT_EQ(c.preset, n);
  }
  const RunConfig d = load_preset("deep-narrow");
  EXPECT_EQ(d.protocol.model.depth, 32);
  EXPECT_EQ(d.protocol.model.width, 32);
  EXPECT_EQ(d.protocol.schedule.post_epochs, 5000);
  EXPECT_EQ(d.protocol.n_adapt, 400);
  EXPECT_EQ(d.functions.size(), 9u);
}

TEST(Presets, UnknownNameListsAvailable) {
  try {
    load_preset("no-such-preset");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("smoke"), std::string::npos);
  }
}

TEST(Config, TextRoundTripIsExact) {
  RunConfig c = load_preset("smoke");
  apply_override(c, "model.T_attn=0.1");
  apply_override(c, "schedule.post_lr=3e-4");
  apply_override(c, "bench.seeds=[4, 7]");
  const std::string text = config_to_text(c);
  RunConfig d = load_preset("deep-narrow");
  apply_config_text(d, text);
  d.preset = c.preset;
  EXPECT_EQ(config_to_text(d), text);
  EXPECT_EQ(d.protocol.model.T_attn, 0.1);
  EXPECT_EQ(d.seeds, (std::vector<std::uint64_t>{4, 7}));
}

TEST(Config, RejectsUnknownAndDuplicateKeys) {
  RunConfig c = load_preset("smoke");
  EXPECT_THROW(apply_config_text(c, "[model]\nwidht = 4\n"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "[modle]\nwidth = 4\n"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "[model]\nwidth = 4\nwidth = 5\n"), ConfigError);
  EXPECT_THROW(apply_override(c, "model.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "width=4"), ConfigError);
}

TEST(Config, RejectsBadValues) {
  RunConfig c = load_preset("smoke");
  EXPECT_THROW(apply_override(c, "model.depth=four"), ConfigError);
  EXPECT_THROW(apply_override(c, "model.depth=2.5"), ConfigError);
  EXPECT_THROW(apply_override(c, "model.routing=\"sideways\""), ConfigError);
  EXPECT_THROW(apply_config_text(c, "[model\ndepth = 3\n"), ConfigError);
  RunConfig k = load_preset("smoke");
  apply_override(k, "model.k_active=9");
  EXPECT_THROW(k.validate(), ConfigError);
  RunConfig f = load_preset("smoke");
  EXPECT_THROW(apply_override(f, "bench.functions=[\"Rosenbrock\"]"), ConfigError);
}

TEST(Config, CommentsAndQuotedStrings) {
  RunConfig c = load_preset("smoke");
  apply_config_text(c, "# header\n[drift] # trailing\nfunction = \"levy\"  # name\nrepeat = true\n");
  EXPECT_EQ(c.drift.function, "Levy");
  EXPECT_TRUE(c.drift.repeat);
}

TEST(Config, FunctionNamesResolveLoosely) {
  EXPECT_EQ(resolve_function("styblinski-tang"), "StyblinskiTang");
  EXPECT_EQ(resolve_function("SIN_COS"), "SinCos");
  EXPECT_THROW(resolve_function("bowl"), ConfigError);
}

TEST(Config, FormatDoubleRoundTrips) {
  EXPECT_EQ(format_double(1.0), "1.0");
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(5e-4), "5e-04");
  for (double x : {1.0 / 3.0, 2.0e-17, 123456789.125, -0.7}) {
    EXPECT_EQ(std::stod(format_double(x)), x);
  }
}

TEST(Checkpoint, RoundTripPreservesForward) {
  const Model m = testing::toy_model(1);
  const Model back = checkpoint_from_bytes(checkpoint_bytes(m));
  Gaussian g(1);
  const Mat X = gaussian_matrix(g, 2, 6, 1.0);
  const Instruction e = Instruction::embed("t", m.config.d_c);
  EXPECT_EQ(forward_batch(back, X, &e).output, forward_batch(m, X, &e).output);
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(m));
}

TEST(Checkpoint, FileRoundTripAndHeader) {
  const Model m = testing::toy_model(2, RoutingMode::kBatchMean, Method::kLora);
  const fs::path dir = fs::temp_directory_path() / "qmem_ckpt_test";
  fs::remove_all(dir);
  save_checkpoint(m, dir / "sub" / "m.qckpt");
  const std::string bytes = read_file(dir / "sub" / "m.qckpt");
  EXPECT_EQ(bytes.substr(0, 8), "QMEMCKPT");
  const Model back = load_checkpoint(dir / "sub" / "m.qckpt");
  EXPECT_EQ(back.config.method, Method::kLora);
  EXPECT_EQ(back.config.routing, RoutingMode::kBatchMean);
  EXPECT_EQ(checkpoint_bytes(back), bytes);
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruption) {
  const std::string good = checkpoint_bytes(testing::toy_model(3));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(checkpoint_from_bytes(bad_magic), IoError);
  EXPECT_THROW(checkpoint_from_bytes(good.substr(0, good.size() - 8)), IoError);
  EXPECT_THROW(checkpoint_from_bytes(good + "x"), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/qmem.ckpt"), IoError);
}

TEST(RunRecordJson, RoundTripKeepsNonFiniteValues) {
  RunRecord r;
  r.function = "Ackley";
  r.method = "lora";
  r.seed = 3;
  r.best_train_mse = 0.125;
  r.best_test_mse = std::numeric_limits<double>::infinity();
  r.diverged = true;
  r.shift = ShiftSpec::draw(make_function("Ackley"), 3, 0.5);
  EpochRecord e;
  e.epoch = 2;
  e.split = "train";
  e.mse = std::numeric_limits<double>::quiet_NaN();
  e.layer_grad_norms = {0.5, 1.5};
  r.report.post.push_back(e);
  const std::string text = run_record_json(r);
  const RunRecord back = run_record_from_json(text);
  EXPECT_EQ(back.function, "Ackley");
  EXPECT_TRUE(std::isinf(back.best_test_mse));
  EXPECT_TRUE(std::isnan(back.report.post[0].mse));
  EXPECT_EQ(back.shift.coeff_scale, r.shift.coeff_scale);
  EXPECT_EQ(run_record_json(back), text);
}

TEST(ModelConfigJson, RoundTrip) {
  ModelConfig c;
  c.depth = 7;
  c.tau_lang = 0.3;
  c.routing = RoutingMode::kBatchMean;
  c.seed = 99;
  EXPECT_EQ(model_config_json(model_config_from_json(model_config_json(c))), model_config_json(c));
}

TEST(Csv, MatrixAndSlug) {
  Mat m(2, 2);
  m << 1, 0.5, 0, 2;
  EXPECT_EQ(matrix_csv(m, {"a", "b"}, {"x", "y"}, "task"), "task,x,y\na,1.0,0.5\nb,0.0,2.0\n");
  EXPECT_EQ(slug("Ackley-a"), "ackley-a");
  EXPECT_EQ(slug("Styblinski Tang"), "styblinski_tang");
}

TEST(Sweep, PointsSkipInfeasibleK) {
  SweepGrid g;
  g.rank = {4};
  g.atoms = {2, 4};
  g.k_active = {1, 4};
  const std::vector<SweepPoint> p = sweep_points(g, {Method::kQueryable, Method::kLora});
  ASSERT_EQ(p.size(), 4u);  // (2,1) (4,1) (4,4) + one LoRA point
  for (const SweepPoint& s : p) {
    if (s.method == Method::kQueryable) EXPECT_LE(s.k_active, s.atoms);
    else EXPECT_EQ(s.atoms, 0);
  }
}

TEST(Sweep, DominanceIsStrictOnBothAxes) {
  const std::vector<bool> d = dominated_flags({10, 20, 25, 30, 10}, {1.0, 0.5, 0.9, 0.4, 1.0});
  EXPECT_EQ(d, (std::vector<bool>{false, false, true, false, false}));
}

TEST(Sweep, ParameterCountsGrowWithAtoms) {
  ModelConfig c;
  c.depth = 4;
  c.width = 8;
  c.d_k = 8;
  c.d_c = 8;
  c.atoms = 2;
  c.k_active = 1;
  const long long small = count_trainable(c);
  c.atoms = 4;
  EXPECT_EQ(count_trainable(c) - small, 2LL * (8 * 8 + 8));
  c.method = Method::kLora;
  // first layer reads the 2-D input: A 8x2, B 8x8; then three 8x8 pairs
  EXPECT_EQ(count_trainable(c), 8 * 2 + 8 * 8 + 3 * (8 * 8 + 8 * 8));
}

}  // namespace
}  // namespace qmem
