// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qmem/model.hpp"

namespace qmem {

/// Instance constants, measured rather than assumed. Operator norms use
/// power iteration (200 steps, tol 1e-10).
struct BoundConstants {
  double R_C = 0.0;      // max atom operator norm
  double R_A = 0.0;      // max ||A_l||
  double R_B = 0.0;      // max ||B_l||
  double R_s = 0.0;      // max entry-state / block-mean norm seen
  double R_e = 0.0;      // max instruction norm seen
  double R_w = 0.0;      // max ||w_b||
  double rho_min = 0.0;  // min RMS over the normalized vectors seen
};

/// One certified inequality or identity. `max_violation` is
/// measured - bound (inequalities) or an error measure (identities); the
/// check passes when it stays within `tolerance`.
struct CheckResult {
  std::string check;  // owning suite command
  std::string name;
  long trials = 0;
  long discarded = 0;
  double max_violation = 0.0;
  double min_slack = 0.0;  // smallest bound - measured (inequalities only)
  double tolerance = 0.0;
  bool passed = true;
  std::string detail;
};

struct TheoremReport {
  std::vector<CheckResult> checks;
  BoundConstants constants;

  bool passed() const;
  void append(const TheoremReport& other);
  const CheckResult& find(const std::string& name) const;
};

struct StatementCheck {
  std::string statement;
  std::string check;
};

/// Which command certifies each stated result.
const std::vector<StatementCheck>& theory_mapping();

/// Additive slack granted to every inequality.
inline constexpr double kBoundSlack = 1e-9;

/// Per-example toy model with non-zero B factors and gates so every
/// gradient path is live.
Model theory_model(std::uint64_t seed, int depth = 4, int width = 8, int rank = 4, int atoms = 4,
                   int blocks = 2);

/// Closed-form router against the mirror-ascent maximizer, the entropy
/// form, random simplex points and the state-prior tradeoff bound.
TheoremReport check_variational(int trials, std::uint64_t seed);

/// RMSNorm and softmax Jacobians against central differences and their
/// spectral bounds.
TheoremReport check_jacobians(int trials, std::uint64_t seed);

/// Operator-norm bounds on S, the layer update, the depth summary and the
/// query over random forwards.
/// `declared_radius` > 0 replaces the measured max ||C_m|| by the radius the
/// atoms are supposed to respect (the projection setting) and checks it.
TheoremReport check_norm_bounds(const Model& model, int trials, std::uint64_t seed,
                                double declared_radius = 0.0);

/// Every closed-form gradient identity against central differences, plus a
/// full sweep over all trainable scalars.
TheoremReport check_gradients(const Model& model, std::uint64_t seed);

/// Instruction-perturbation ratios against the computed constants L_q,
/// L_alpha and the routed-operator constant. Trials whose active set flips
/// are discarded and counted.
TheoremReport check_lipschitz(const Model& model, int trials, std::uint64_t seed);

/// Norm bound and instruction stability for Q/K/V/O projection updates.
TheoremReport check_attention(const Model& model, int trials, std::uint64_t seed);

/// Limiting regimes (a)-(d) of the language-regularized router.
TheoremReport check_limits(const Model& model, std::uint64_t seed);

struct TheoryConfig {
  std::uint64_t seed = 0;
  int trials = 1000;
  std::vector<std::string> only;  // empty runs every check
  // Declared atom radius with projection on; 0 uses the measured norms.
  double atom_radius = 0.0;
  // Fault injection: rescales atom 0 to this spectral norm after projection.
  double inject_atom_norm = 0.0;
};

const std::vector<std::string>& theory_check_names();

TheoremReport run_theory_suite(const TheoryConfig& cfg);

/// Report, constants and the statement mapping as JSON.
std::string report_to_json(const TheoremReport& report, const TheoryConfig& cfg);

}  // namespace qmem
