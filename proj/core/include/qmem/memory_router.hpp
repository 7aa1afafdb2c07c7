// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qmem/numerics.hpp"
#include "qmem/random.hpp"

namespace qmem {

/// Global memory of rank-space atoms C_m (r x r) with routing keys k_m.
struct AtomBank {
  int M = 0;
  int r = 0;
  int d_k = 0;
  std::vector<Mat> atoms;
  std::vector<Vec> keys;
  std::uint64_t seed = 0;  // provenance only

  void validate() const;

  /// Gaussian atoms scaled by 1/sqrt(r), each clipped to spectral norm
  /// <= clip; unit-norm Gaussian keys.
  static AtomBank random(int M, int r, int d_k, std::uint64_t seed, double clip = 1.0);

  /// Rescales every atom whose spectral norm exceeds `radius`.
  void project_atoms(double radius);
  double max_atom_norm() const;
};

/// Temperatures, strengths and the routing projections.
struct RouterParams {
  double T_attn = 1.0;
  double T_lang = 1.0;
  double T_dep = 1.0;
  double tau_lang = 1.0;
  double lambda_ctx = 1.0;
  int k_active = 2;
  double eps = kDefaultRmsEps;

  Mat Q_cur;    // d_k x r
  Mat Q_dep;    // d_k x r
  Mat Q_ctx;    // d_k x d_c
  Mat R_ctx;    // d_k x d_c
  Mat Q_dep_q;  // d_k x d_k
  Mat Q_dep_k;  // d_k x r
  std::vector<Vec> layer_priors;  // w, one per block entry layer

  int d_k() const { return static_cast<int>(Q_cur.rows()); }
  int rank() const { return static_cast<int>(Q_cur.cols()); }
  int d_c() const { return static_cast<int>(Q_ctx.cols()); }

  void validate(const AtomBank& bank) const;

  /// Gaussian projections scaled by 1/sqrt(fan_in).
  static RouterParams random(int d_k, int r, int d_c, std::uint64_t seed);
};

/// Instruction text plus its frozen embedding e(c).
struct Instruction {
  std::string text;
  Vec embedding;

  /// Deterministic pseudo-embedding: a Gaussian direction seeded by the
  /// text hash and `seed`, scaled to Euclidean norm `radius`.
  static Instruction embed(std::string text, int d_c, std::uint64_t seed = 0,
                           double radius = 1.0);
};

struct RouteResult {
  std::vector<int> active;
  Simplex alpha;             // over all M atoms
  Vec zeta;                  // state logits
  Vec rho;                   // language logits (empty without instruction)
  std::optional<Simplex> prior;  // p(c) (absent without instruction)
  Vec fused;                 // logits that were top-k'd
  Mat S;                     // routed operator
  Vec query;                 // q_b
};

/// rho_m = <RMSNorm(R_ctx e), RMSNorm(k_m)> / (sqrt(d_k) T_lang).
Vec language_logits(const AtomBank& bank, const RouterParams& params,
                    const Instruction& instr);
Simplex language_prior(const AtomBank& bank, const RouterParams& params,
                       const Instruction& instr);

/// zeta_m = <RMSNorm(q), RMSNorm(k_m)> / (sqrt(d_k) T_attn).
Vec state_logits(const AtomBank& bank, const RouterParams& params, const Vec& q);

/// zeta + tau * log p. Exact zeros in p are rejected when tau > 0.
Vec fuse_logits(const Vec& zeta, const Simplex& prior, double tau_lang);

/// S = sum_m alpha_m C_m.
Mat routed_operator(const AtomBank& bank, const Simplex& alpha);

/// Values shared by every route of one forward pass: RMS-normalized keys
/// and, with an instruction, the language logits and prior.
struct RoutingCache {
  std::vector<Vec> key_hat;
  Vec rho;
  std::optional<Simplex> prior;

  static RoutingCache build(const AtomBank& bank, const RouterParams& params,
                            const Instruction* instr);
};

/// Full routing step for one block given its final query. `instr` may be
/// null; the language term is then skipped.
RouteResult route(const AtomBank& bank, const RouterParams& params, const Vec& q,
                  const Instruction* instr);
RouteResult route(const AtomBank& bank, const RouterParams& params, const Vec& q,
                  const RoutingCache& cache);

/// Tempered prior restricted to an active set: p^tau renormalized.
Simplex tempered_prior(const Simplex& prior_I, double tau_lang);

/// Objective <a, zeta> - KL(a || pi).
double variational_objective(const Vec& a, const Vec& zeta_I, const Simplex& pi);

struct OracleResult {
  Simplex maximizer;
  int iterations = 0;
  double objective = 0.0;
};

/// Maximizes <a, zeta_I> - KL(a || tempered_prior(prior_I, tau)) over the
/// simplex by entropic mirror ascent. Throws when the iteration cap is hit.
OracleResult variational_oracle(const Vec& zeta_I, const Simplex& prior_I,
                                double tau_lang, double step = 0.5,
                                int max_iter = 10000);

struct TradeoffGap {
  double gap = 0.0;    // max_I zeta - <alpha, zeta>
  double bound = 0.0;  // -log pi_{m*}
};

/// State-utility loss of the routed distribution against its bound. The
/// tempered prior is rebuilt from `route.prior` on the active set (uniform
/// when the route carries no prior).
TradeoffGap tradeoff_gap(const RouteResult& route, double tau_lang);

// Serialization of the bank (shapes, row-major payloads, seed).
std::string bank_to_json(const AtomBank& bank);
AtomBank bank_from_json(const std::string& text);

}  // namespace qmem
