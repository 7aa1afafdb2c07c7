// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "qmem/model.hpp"
#include "qmem/random.hpp"
#include "qmem/training.hpp"

namespace qmem {
namespace {

// Deep-narrow shape: 32 x 32, r 8, M 8, k 2, 4 blocks.
Model deep_narrow(Method method) {
  ModelConfig cfg;
  cfg.method = method;
  cfg.seed = 1;
  Model m = Model::build(cfg);
  Gaussian g(2);
  for (AdapterLayer& l : m.layers) l.B = gaussian_matrix(g, l.B.rows(), l.B.cols(), 0.05);
  return m;
}

void BM_Forward(benchmark::State& state) {
  const Model m = deep_narrow(state.range(0) == 0 ? Method::kQueryable : Method::kLora);
  Gaussian g(3);
  const Mat X = gaussian_matrix(g, 2, state.range(1), 1.0);
  const Instruction e = Instruction::embed("bench", m.config.d_c);
  ForwardOptions opts;
  opts.keep_trace = false;
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward_batch(m, X, m.routed() ? &e : nullptr, opts).output);
  }
  state.SetItemsProcessed(state.iterations() * state.range(1));
}
BENCHMARK(BM_Forward)->ArgsProduct({{0, 1}, {1, 64}})->ArgNames({"lora", "batch"});

void BM_LossAndGrads(benchmark::State& state) {
  const Model m = deep_narrow(state.range(0) == 0 ? Method::kQueryable : Method::kLora);
  Gaussian g(4);
  const Mat X = gaussian_matrix(g, 2, 64, 1.0);
  const Mat Y = gaussian_matrix(g, 1, 64, 1.0);
  const Instruction e = Instruction::embed("bench", m.config.d_c);
  for (auto _ : state) {
    benchmark::DoNotOptimize(loss_and_grads(m, X, Y, m.routed() ? &e : nullptr).loss);
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_LossAndGrads)->Arg(0)->Arg(1)->ArgName("lora");

void BM_Route(benchmark::State& state) {
  const int M = static_cast<int>(state.range(0));
  const AtomBank bank = AtomBank::random(M, 8, 32, 5);
  RouterParams p = RouterParams::random(32, 8, 32, 6);
  p.k_active = 2;
  Gaussian g(7);
  const Vec q = gaussian_vector(g, 32, 1.0);
  const Instruction e = Instruction::embed("bench", 32);
  for (auto _ : state) benchmark::DoNotOptimize(route(bank, p, q, &e).S);
}
BENCHMARK(BM_Route)->Arg(4)->Arg(8)->Arg(32);

void BM_TopKSoftmax(benchmark::State& state) {
  Gaussian g(8);
  const Vec z = gaussian_vector(g, state.range(0), 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(topk_softmax(z, 2).alpha);
}
BENCHMARK(BM_TopKSoftmax)->Arg(8)->Arg(64);

void BM_RmsNormVjp(benchmark::State& state) {
  Gaussian g(9);
  const Vec x = gaussian_vector(g, 32, 1.0);
  const Vec gr = gaussian_vector(g, 32, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(rmsnorm_vjp(x, gr));
}
BENCHMARK(BM_RmsNormVjp);

}  // namespace
}  // namespace qmem

BENCHMARK_MAIN();
