// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qmem/random.hpp"
#include "qmem/training.hpp"

namespace qmem::testing {

/// Small model with non-zero B factors so every gradient path is live.
inline Model toy_model(std::uint64_t seed, RoutingMode mode = RoutingMode::kPerExample,
                       Method method = Method::kQueryable, int depth = 4, int width = 8,
                       int rank = 4, int atoms = 4, int blocks = 2) {
  ModelConfig cfg;
  cfg.depth = depth;
  cfg.width = width;
  cfg.rank = rank;
  cfg.atoms = atoms;
  cfg.k_active = std::min(2, atoms);
  cfg.blocks = blocks;
  cfg.d_k = 6;
  cfg.d_c = 5;
  cfg.alpha_L = 2.0 * rank;
  cfg.eta_init = 0.3;
  cfg.routing = mode;
  cfg.method = method;
  cfg.seed = seed;
  Model m = Model::build(cfg);
  Gaussian g(seed ^ 0x5eedULL);
  for (AdapterLayer& l : m.layers) {
    l.B = gaussian_matrix(g, l.B.rows(), l.B.cols(), 0.3);
    l.eta = g();
  }
  return m;
}

struct FdMismatch {
  std::string name;
  std::size_t index;
  double analytic;
  double numeric;
};

/// Central differences of `loss` over every scalar of `params`, compared
/// against `grads` with |fd - an| <= abs_tol + rel_tol |fd|.
inline std::vector<FdMismatch> fd_sweep(std::vector<ParamView>& params,
                                        const std::vector<ParamView>& grads,
                                        const std::function<double()>& loss, double h,
                                        double rel_tol, double abs_tol,
                                        std::size_t* checked = nullptr) {
  std::vector<FdMismatch> bad;
  std::size_t count = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].value.size(); ++i) {
      double& x = params[p].value[i];
      const double keep = x;
      x = keep + h;
      const double up = loss();
      x = keep - h;
      const double down = loss();
      x = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = grads[p].value[i];
      ++count;
      if (std::abs(fd - an) > abs_tol + rel_tol * std::abs(fd)) {
        bad.push_back({params[p].name, i, an, fd});
      }
    }
  }
  if (checked != nullptr) *checked = count;
  return bad;
}

}  // namespace qmem::testing
