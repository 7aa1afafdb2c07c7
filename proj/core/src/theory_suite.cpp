// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/theory_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>

#include <json.hpp>

#include "qmem/random.hpp"
#include "qmem/training.hpp"

namespace qmem {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// FD acceptance: |fd - an| <= kFdAbs + kFdRel |fd|.
constexpr double kFdStep = 1e-6;
constexpr double kFdRel = 1e-4;
constexpr double kFdAbs = 1e-7;

class Tally {
 public:
  Tally(std::string check, std::string name, double tol) {
    r_.check = std::move(check);
    r_.name = std::move(name);
    r_.tolerance = tol;
    r_.max_violation = -kInf;
    r_.min_slack = kInf;
  }

  // measured <= bound
  void bound(double measured, double bound) {
    ++r_.trials;
    r_.max_violation = std::max(r_.max_violation, measured - bound);
    r_.min_slack = std::min(r_.min_slack, bound - measured);
  }
  void error(double err) {
    ++r_.trials;
    r_.max_violation = std::max(r_.max_violation, std::isfinite(err) ? err : kInf);
  }
  void fd(double numeric, double analytic) {
    error(std::abs(numeric - analytic) - kFdRel * std::abs(numeric));
  }
  void discard() { ++r_.discarded; }
  long trials() const { return r_.trials; }

  CheckResult done(std::string detail = {}) {
    if (r_.trials == 0) r_.max_violation = 0.0;
    r_.passed = r_.trials > 0 && r_.max_violation <= r_.tolerance;
    r_.detail = std::move(detail);
    return r_;
  }

 private:
  CheckResult r_;
};

double uniform(Gaussian& g, double lo, double hi) { return lo + (hi - lo) * g.uniform(); }

int pick(Gaussian& g, int n) { return static_cast<int>(g.bits() % static_cast<std::uint64_t>(n)); }

Vec direction(Gaussian& g, Eigen::Index n) {
  Vec v = gaussian_vector(g, n, 1.0);
  return v / v.norm();
}

Simplex dirichlet_one(Gaussian& g, Eigen::Index n) {
  Vec w(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = -std::log(1.0 - g.uniform());
  return Simplex(w / w.sum(), 1e-9);
}

Vec restrict(const Vec& v, const std::vector<int>& idx) {
  Vec out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[idx[i]];
  return out;
}

Simplex renormalized(const Vec& v) { return Simplex(v / v.sum(), 1e-9); }

Instruction random_instruction(Gaussian& g, int d_c, double lo = 0.5, double hi = 2.0) {
  return Instruction{"", direction(g, d_c) * uniform(g, lo, hi)};
}

Mat random_inputs(Gaussian& g, int in_dim, int n) { return gaussian_matrix(g, in_dim, n, 1.5); }

// Softmax over the active set with everything else zero.
Simplex alpha_on(const std::vector<int>& active, const Vec& logits, Eigen::Index M) {
  const Simplex a = softmax(restrict(logits, active));
  Vec w = Vec::Zero(M);
  for (std::size_t i = 0; i < active.size(); ++i) w[active[i]] = a[static_cast<Eigen::Index>(i)];
  return Simplex(w, 1e-9);
}

void reroute(const AtomBank& bank, RouteResult& rt, const Vec& fused) {
  rt.alpha = alpha_on(rt.active, fused, bank.M);
  rt.S = routed_operator(bank, rt.alpha);
}

// Fourth-order central differences, column by column.
Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h) {
  const Eigen::Index n = x.size();
  Mat J(f(x).size(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    auto at = [&](double s) {
      Vec y = x;
      y[j] += s;
      return f(y);
    };
    J.col(j) = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
  }
  return J;
}

}  // namespace

bool TheoremReport::passed() const {
  return !checks.empty() &&
         std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

void TheoremReport::append(const TheoremReport& other) {
  checks.insert(checks.end(), other.checks.begin(), other.checks.end());
  BoundConstants& a = constants;
  const BoundConstants& b = other.constants;
  a.R_C = std::max(a.R_C, b.R_C);
  a.R_A = std::max(a.R_A, b.R_A);
  a.R_B = std::max(a.R_B, b.R_B);
  a.R_s = std::max(a.R_s, b.R_s);
  a.R_e = std::max(a.R_e, b.R_e);
  a.R_w = std::max(a.R_w, b.R_w);
  if (b.rho_min > 0.0) a.rho_min = a.rho_min > 0.0 ? std::min(a.rho_min, b.rho_min) : b.rho_min;
}

const CheckResult& TheoremReport::find(const std::string& name) const {
  for (const CheckResult& c : checks) {
    if (c.name == name) return c;
  }
  throw Error("theory report: no check named " + name);
}

const std::vector<StatementCheck>& theory_mapping() {
  static const std::vector<StatementCheck> table = {
      {"Lemma: equivalent raw-logit fusion", "variational"},
      {"Theorem: variational characterization of instruction-regularized retrieval", "variational"},
      {"Corollary: state-prior tradeoff bound", "variational"},
      {"Proposition: limiting language regimes (a)-(d)", "limits"},
      {"Proposition: convex-hull bound on the routed operator", "norm_bounds"},
      {"Corollary: layerwise norm-to-norm bound", "norm_bounds"},
      {"Theorem: norm-controlled dynamic updates and bounded depth summaries", "norm_bounds"},
      {"Proposition: bounded attention-style depth summary", "norm_bounds"},
      {"Corollary: query norm bound", "norm_bounds"},
      {"Lemma: exact Jacobian of RMS normalization", "jacobians"},
      {"Lemma: softmax Jacobian bound", "jacobians"},
      {"Proposition: local Lipschitz stability of the attention-style summary", "lipschitz"},
      {"Proposition: local Lipschitz stability of the router and routed operator", "lipschitz"},
      {"Proposition: exact compressed-gradient identity", "gradients"},
      {"Theorem: norm bound and instruction stability for attention-projection updates",
       "attention"},
      {"Theorem: exact blockwise gradient factorization", "gradients"},
      {"Corollary: exact logit gradients on a fixed active set", "gradients"},
  };
  return table;
}

const std::vector<std::string>& theory_check_names() {
  static const std::vector<std::string> names = {"variational", "jacobians", "norm_bounds",
                                                 "gradients",   "lipschitz", "attention",
                                                 "limits"};
  return names;
}

Model theory_model(std::uint64_t seed, int depth, int width, int rank, int atoms, int blocks) {
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
  cfg.routing = RoutingMode::kPerExample;
  cfg.method = Method::kQueryable;
  cfg.seed = seed;
  Model m = Model::build(cfg);
  Gaussian g(SeedTree(seed).seed("theory_factors"));
  for (AdapterLayer& l : m.layers) {
    l.B = gaussian_matrix(g, l.B.rows(), l.B.cols(), 0.3);
    l.eta = g();
  }
  return m;
}

// ---------------------------------------------------------------------------

TheoremReport check_variational(int trials, std::uint64_t seed) {
  Gaussian g(seed);
  Tally maximizer("variational", "variational.maximizer", 1e-6);
  Tally objective("variational", "variational.objective_gap", 1e-10);
  Tally entropy_form("variational", "variational.entropy_form", 1e-6);
  Tally fusion("variational", "variational.raw_logit_fusion", 1e-12);
  Tally spot("variational", "variational.random_points", kBoundSlack);
  Tally tau0("variational", "variational.tau_zero", 1e-12);
  Tally tradeoff("variational", "variational.tradeoff_bound", kBoundSlack);

  for (int t = 0; t < trials; ++t) {
    const int M = 1 + pick(g, 8);
    const int k = 1 + pick(g, M);
    const double tau = (t % 10 == 0) ? 0.0 : uniform(g, 0.0, 4.0);
    const Vec zeta = gaussian_vector(g, M, 2.0);
    const Vec rho = gaussian_vector(g, M, 1.5);
    const Simplex p = softmax(rho);

    const Vec fused = fuse_logits(zeta, p, tau);
    const TopK top = topk_softmax(fused, k);
    const std::vector<int>& I = top.active;
    const Vec zeta_I = restrict(zeta, I);
    const Vec alpha_I = restrict(top.alpha.weights(), I);
    const Simplex p_I = renormalized(restrict(p.weights(), I));
    const Simplex pi = tempered_prior(p_I, tau);

    const OracleResult oracle = variational_oracle(zeta_I, p_I, tau);
    maximizer.error((alpha_I - oracle.maximizer.weights()).cwiseAbs().maxCoeff());
    const double at_router = variational_objective(alpha_I, zeta_I, pi);
    objective.bound(oracle.objective, at_router);

    // Same maximizer from <a, z_I> + H(a).
    const Vec z_I = restrict(fused, I);
    const OracleResult ent = variational_oracle(z_I, Simplex::uniform(I.size()), 0.0);
    entropy_form.error((alpha_I - ent.maximizer.weights()).cwiseAbs().maxCoeff());

    // softmax(zeta + tau log p) == softmax(zeta + tau rho) == pi * exp(zeta) / Z on I.
    const Vec raw = softmax(Vec(zeta_I + tau * restrict(rho, I))).weights();
    Vec gibbs = pi.weights().array() * zeta_I.array().exp();
    gibbs /= gibbs.sum();
    fusion.error(std::max((alpha_I - raw).cwiseAbs().maxCoeff(),
                          (alpha_I - gibbs).cwiseAbs().maxCoeff()));

    for (int s = 0; s < 100; ++s) {
      const Simplex a = dirichlet_one(g, static_cast<Eigen::Index>(I.size()));
      spot.bound(variational_objective(a.weights(), zeta_I, pi), at_router);
    }
    for (std::size_t v = 0; v < I.size(); ++v) {
      spot.bound(variational_objective(Simplex::vertex(I.size(), v).weights(), zeta_I, pi),
                 at_router);
    }

    if (tau == 0.0) tau0.error((alpha_I - softmax(zeta_I).weights()).cwiseAbs().maxCoeff());

    RouteResult rr;
    rr.active = I;
    rr.alpha = top.alpha;
    rr.zeta = zeta;
    rr.rho = rho;
    rr.prior = p;
    const TradeoffGap gap = tradeoff_gap(rr, tau);
    tradeoff.bound(gap.gap, gap.bound);
  }

  TheoremReport rep;
  rep.checks = {maximizer.done("inf-norm distance to the mirror-ascent maximizer"),
                objective.done("oracle objective minus router objective"),
                entropy_form.done("maximizer of <a, z_I> + H(a)"),
                fusion.done("log-prior and raw-logit fusion agree with the Gibbs form"),
                spot.done("100 random simplex points and every vertex per trial"),
                tau0.done("tau = 0 reduces to softmax of the state logits"),
                tradeoff.done("max zeta - <alpha, zeta> <= -log pi_{m*}")};
  return rep;
}

// ---------------------------------------------------------------------------

TheoremReport check_jacobians(int trials, std::uint64_t seed) {
  Gaussian g(seed);
  Tally rms_fd("jacobians", "jacobians.rmsnorm_fd", 1e-6);
  Tally rms_norm("jacobians", "jacobians.rmsnorm_bound", kBoundSlack);
  Tally rms_vjp("jacobians", "jacobians.rmsnorm_vjp", 1e-12);
  Tally sm_fd("jacobians", "jacobians.softmax_fd", 1e-6);
  Tally sm_norm("jacobians", "jacobians.softmax_bound", kBoundSlack);
  Tally sm_vjp("jacobians", "jacobians.softmax_vjp", 1e-12);

  for (int t = 0; t < trials; ++t) {
    {
      const int n = 2 + pick(g, 15);
      const Vec x = gaussian_vector(g, n, std::exp(uniform(g, std::log(0.1), std::log(10.0))));
      const double rho = rms(x);
      const Mat J = rmsnorm_jacobian(x);
      const Mat fd = fd_jacobian([](const Vec& v) { return rmsnorm(v); }, x, 1e-3 * rho);
      rms_fd.error((fd - J).cwiseAbs().maxCoeff() / std::max(J.cwiseAbs().maxCoeff(), 1e-6));
      rms_norm.bound(spectral_norm(J) * rho, 1.0);
      const Vec v = gaussian_vector(g, n, 1.0);
      const Vec ref = J.transpose() * v;
      rms_vjp.error((rmsnorm_vjp(x, v) - ref).norm() * rho / v.norm());
    }
    {
      const int n = 2 + pick(g, 9);
      const Vec z = gaussian_vector(g, n, 3.0);
      const Simplex a = softmax(z);
      const Mat J = softmax_jacobian(a);
      const Mat fd = fd_jacobian([](const Vec& v) { return softmax(v).weights(); }, z, 1e-3);
      sm_fd.error((fd - J).cwiseAbs().maxCoeff() / std::max(J.cwiseAbs().maxCoeff(), 1e-6));
      sm_norm.bound(spectral_norm(J), 0.5);
      const Vec v = gaussian_vector(g, n, 1.0);
      const Vec ref = J.transpose() * v;
      sm_vjp.error((softmax_vjp(a.weights(), v) - ref).norm() / v.norm());
    }
  }
  TheoremReport rep;
  rep.checks = {rms_fd.done("max-entry error over max(largest Jacobian entry, 1e-6)"),
                rms_norm.done("||J|| rms(x) <= 1"),
                rms_vjp.done("vjp equals J^T v, error scaled by rms(x) / ||v||"),
                sm_fd.done("max-entry error over max(largest Jacobian entry, 1e-6)"),
                sm_norm.done("||J|| <= 1/2"),
                sm_vjp.done("vjp equals J^T v, error scaled by 1 / ||v||")};
  return rep;
}

// ---------------------------------------------------------------------------

TheoremReport check_norm_bounds(const Model& model, int trials, std::uint64_t seed,
                                double declared_radius) {
  if (!model.routed()) throw Error("check_norm_bounds: queryable model required");
  Gaussian g(seed);
  const RouterParams& rp = model.router;
  const double R_C = declared_radius > 0.0 ? declared_radius : model.bank.max_atom_norm();
  double R_A = 0.0, R_B = 0.0;
  std::vector<double> nA, nB;
  for (const AdapterLayer& l : model.layers) {
    nA.push_back(spectral_norm(l.A));
    nB.push_back(spectral_norm(l.B));
    R_A = std::max(R_A, nA.back());
    R_B = std::max(R_B, nB.back());
  }
  const double nQcur = spectral_norm(rp.Q_cur);
  const double nQctx = spectral_norm(rp.Q_ctx);
  const double nQdep = spectral_norm(rp.Q_dep);

  Tally hull("norm_bounds", "norm_bounds.routed_operator", kBoundSlack);
  Tally layer("norm_bounds", "norm_bounds.update", kBoundSlack);
  Tally uniform_layer("norm_bounds", "norm_bounds.update_uniform", kBoundSlack);
  Tally summary("norm_bounds", "norm_bounds.depth_summary", kBoundSlack);
  Tally query("norm_bounds", "norm_bounds.query", kBoundSlack);
  BoundConstants bc;
  bc.R_C = R_C;
  bc.R_A = R_A;
  bc.R_B = R_B;

  for (int t = 0; t < trials; ++t) {
    const Instruction instr = random_instruction(g, rp.d_c());
    const ForwardTrace tr = forward_batch(model, random_inputs(g, model.config.in_dim, 1), &instr);
    bc.R_e = std::max(bc.R_e, instr.embedding.norm());
    for (int b = 0; b < model.partition.size(); ++b) {
      const BlockTrace& bt = tr.blocks[static_cast<std::size_t>(b)];
      const RouteResult& rt = bt.routes[0];
      const double nS = spectral_norm(rt.S);
      hull.bound(nS, R_C);

      const auto [begin, end] = model.partition.blocks[static_cast<std::size_t>(b)];
      for (int l = begin; l < end; ++l) {
        const AdapterLayer& al = model.layers[static_cast<std::size_t>(l)];
        const double dw = spectral_norm(delta_w(al, rt.S));
        const double mid = al.scale() * nB[l] * (1.0 + al.gate() * nS) * nA[l];
        layer.bound(dw, mid);
        uniform_layer.bound(mid, al.scale() * R_B * (1.0 + R_C) * R_A);
      }

      const QueryParts& qp = bt.query[0];
      double R_s = bt.s_entry.col(0).norm();
      double max_sbar = 0.0;
      for (const Vec& s : bt.context[0]) max_sbar = std::max(max_sbar, s.norm());
      if (!bt.context[0].empty()) summary.bound(qp.u.norm(), max_sbar);
      R_s = std::max(R_s, max_sbar);
      const double R_w = rp.layer_priors[static_cast<std::size_t>(b)].norm();
      query.bound(qp.q.norm(), R_w + nQcur * R_s + rp.lambda_ctx * nQctx * instr.embedding.norm() +
                                   nQdep * R_s);
      bc.R_s = std::max(bc.R_s, R_s);
      bc.R_w = std::max(bc.R_w, R_w);
    }
  }

  // Identity atoms: S = I for any routing, so ||S|| = 1 with the bound tight.
  Tally identity("norm_bounds", "norm_bounds.identity_bank", 1e-12);
  Tally vertex("norm_bounds", "norm_bounds.vertex_routing", 0.0);
  {
    Model m = model;
    for (Mat& c : m.bank.atoms) c = Mat::Identity(m.bank.r, m.bank.r);
    Model v = model;
    v.router.k_active = 1;
    for (int t = 0; t < 20; ++t) {
      const Instruction instr = random_instruction(g, rp.d_c());
      const Mat X = random_inputs(g, model.config.in_dim, 1);
      const ForwardTrace ti = forward_batch(m, X, &instr);
      for (const BlockTrace& bt : ti.blocks) {
        identity.error(std::abs(spectral_norm(bt.routes[0].S) - m.bank.max_atom_norm()));
      }
      const ForwardTrace tv = forward_batch(v, X, &instr);
      for (const BlockTrace& bt : tv.blocks) {
        const RouteResult& rt = bt.routes[0];
        vertex.error((rt.S - v.bank.atoms[static_cast<std::size_t>(rt.active[0])]).cwiseAbs().maxCoeff());
      }
    }
  }

  TheoremReport rep;
  rep.constants = bc;
  if (declared_radius > 0.0) {
    Tally radius("norm_bounds", "norm_bounds.declared_radius", kBoundSlack);
    for (const Mat& c : model.bank.atoms) radius.bound(spectral_norm(c), declared_radius);
    rep.checks.push_back(radius.done("||C_m|| <= R_C for the projected bank"));
  }
  rep.checks.insert(rep.checks.end(), {hull.done("||S|| <= R_C"),
                layer.done("||dW|| <= (a/r)||B||(1 + g||S||)||A||"),
                uniform_layer.done("(a/r)||B||(1 + g||S||)||A|| <= (a/r) R_B (1 + R_C) R_A"),
                summary.done("||u|| <= max ||sbar_i||"),
                query.done("||q|| <= R_w + ||Q_cur|| R_s + lambda ||Q_ctx|| R_e + ||Q_dep|| R_s"),
                identity.done("identity atoms give ||S|| = 1"),
                vertex.done("k = 1 gives S equal to the selected atom")});
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

struct Perturbation {
  bool admissible = false;
  int block = 0;
  double dnorm = 0.0;
  double rho_min = 0.0;
  double L_u = 0.0;
  double L_q = 0.0;
  double L_alpha = 0.0;
  double R_s = 0.0;
  QueryParts p0, p1;
  RouteResult r0, r1;
};

// One instruction perturbation e -> e + delta for a single block with the
// completed block means and entry state held fixed.
Perturbation perturb(const Model& model, Gaussian& g) {
  const RouterParams& rp = model.router;
  const Instruction instr = random_instruction(g, rp.d_c());
  const ForwardTrace tr = forward_batch(model, random_inputs(g, model.config.in_dim, 1), &instr);
  Perturbation out;
  out.block = pick(g, model.partition.size());
  const BlockTrace& bt = tr.blocks[static_cast<std::size_t>(out.block)];
  DepthContext ctx;
  ctx.summaries = bt.context[0];
  const Vec s_entry = bt.s_entry.col(0);
  const Vec& w = rp.layer_priors[static_cast<std::size_t>(out.block)];

  const Vec delta = direction(g, rp.d_c()) * uniform(g, 1e-6, 1e-3);
  out.dnorm = delta.norm();
  auto eval = [&](const Vec& e, QueryParts& qp, RouteResult& rt) {
    const Instruction ie{"", e};
    qp = build_query_parts(rp, w, s_entry, &ie, ctx);
    rt = route(model.bank, rp, qp.q, &ie);
  };
  QueryParts pm;
  RouteResult rm;
  eval(instr.embedding, out.p0, out.r0);
  eval(instr.embedding + delta, out.p1, out.r1);
  eval(instr.embedding + 0.5 * delta, pm, rm);
  out.admissible = out.r0.active == out.r1.active && out.r0.active == rm.active;

  // Smallest RMS of every normalized e-dependent vector along the segment;
  // RMS is 1/sqrt(d)-Lipschitz, which covers the interior.
  const double sqd = std::sqrt(static_cast<double>(rp.d_k()));
  double rho = kInf, drift = 0.0;
  auto visit = [&](const Vec& a, const Vec& b, const Vec& c) {
    rho = std::min({rho, rms(a, rp.eps), rms(b, rp.eps), rms(c, rp.eps)});
    drift = std::max(drift, (a - b).norm());
  };
  visit(out.p0.q, out.p1.q, pm.q);
  const Vec e0 = instr.embedding, e1 = instr.embedding + delta, em = instr.embedding + 0.5 * delta;
  visit(Vec(rp.R_ctx * e0), Vec(rp.R_ctx * e1), Vec(rp.R_ctx * em));
  const auto n_ctx = static_cast<double>(ctx.summaries.size());
  if (!ctx.summaries.empty()) {
    visit(Vec(rp.Q_dep_q * out.p0.q0), Vec(rp.Q_dep_q * out.p1.q0), Vec(rp.Q_dep_q * pm.q0));
  }
  out.rho_min = rho - drift / sqd;

  for (const Vec& s : ctx.summaries) out.R_s = std::max(out.R_s, s.norm());
  const double lam_ctx = rp.lambda_ctx * spectral_norm(rp.Q_ctx);
  const double nQdq = spectral_norm(rp.Q_dep_q);
  out.L_u = n_ctx * out.R_s * nQdq * lam_ctx / (2.0 * rp.T_dep * out.rho_min);
  out.L_q = lam_ctx * (1.0 + n_ctx * out.R_s * spectral_norm(rp.Q_dep) * nQdq /
                                 (2.0 * rp.T_dep * out.rho_min));
  const double k = static_cast<double>(out.r0.active.size());
  out.L_alpha = std::sqrt(k) / (2.0 * out.rho_min) *
                (out.L_q / rp.T_attn + rp.tau_lang * spectral_norm(rp.R_ctx) / rp.T_lang);
  return out;
}

}  // namespace

TheoremReport check_lipschitz(const Model& model, int trials, std::uint64_t seed) {
  if (!model.routed()) throw Error("check_lipschitz: queryable model required");
  Gaussian g(seed);
  const double R_C = model.bank.max_atom_norm();
  Tally summary("lipschitz", "lipschitz.summary", kBoundSlack);
  Tally query("lipschitz", "lipschitz.query", kBoundSlack);
  Tally router("lipschitz", "lipschitz.router", kBoundSlack);
  Tally op("lipschitz", "lipschitz.routed_operator", kBoundSlack);
  Tally update("lipschitz", "lipschitz.layer_update", kBoundSlack);
  BoundConstants bc;
  bc.R_C = R_C;
  bc.rho_min = kInf;

  // Draw until `trials` perturbations keep their active set (capped).
  long discarded = 0;
  for (int ok = 0, drawn = 0; ok < trials && drawn < 10 * trials; ++drawn) {
    const Perturbation p = perturb(model, g);
    if (!p.admissible) {
      ++discarded;
      for (Tally* x : {&summary, &query, &router, &op, &update}) x->discard();
      continue;
    }
    ++ok;
    bc.rho_min = std::min(bc.rho_min, p.rho_min);
    bc.R_s = std::max(bc.R_s, p.R_s);
    const double d = p.dnorm;
    if (p.block > 0) summary.bound((p.p1.u - p.p0.u).norm() / d, p.L_u);
    query.bound((p.p1.q - p.p0.q).norm() / d, p.L_q);
    router.bound((p.r1.alpha.weights() - p.r0.alpha.weights()).norm() / d, p.L_alpha);
    const double k = static_cast<double>(p.r0.active.size());
    const double LS = R_C * std::sqrt(k) * p.L_alpha;
    op.bound(spectral_norm(p.r1.S - p.r0.S) / d, LS);
    const auto [begin, end] = model.partition.blocks[static_cast<std::size_t>(p.block)];
    for (int l = begin; l < end; ++l) {
      const AdapterLayer& al = model.layers[static_cast<std::size_t>(l)];
      const Vec x = gaussian_vector(g, al.d_in(), 1.0);
      const double lhs = ((delta_w(al, p.r1.S) - delta_w(al, p.r0.S)) * x).norm() / (d * x.norm());
      update.bound(lhs, al.scale() * spectral_norm(al.B) * std::abs(al.gate()) *
                            spectral_norm(al.A) * LS);
    }
  }

  // lambda_ctx = 0 removes the instruction from the query entirely.
  Tally zero("lipschitz", "lipschitz.lambda_zero", 0.0);
  {
    Model m = model;
    m.router.lambda_ctx = 0.0;
    for (int t = 0; t < 20; ++t) {
      const Perturbation p = perturb(m, g);
      zero.error((p.p1.q - p.p0.q).cwiseAbs().maxCoeff());
      zero.error(p.L_q);
    }
  }

  TheoremReport rep;
  rep.constants = bc;
  const std::string frac = std::to_string(discarded) + " draws discarded on active-set flips";
  rep.checks = {summary.done("||du|| / ||de|| <= L_u; " + frac),
                query.done("||dq|| / ||de|| <= L_q; " + frac),
                router.done("||dalpha|| / ||de|| <= L_alpha; " + frac),
                op.done("||dS|| / ||de|| <= R_C sqrt(k) L_alpha; " + frac),
                update.done("||dW(e)x - dW(e')x|| <= (a/r)||B|| g ||A|| R_C sqrt(k) L_alpha "
                            "||de|| ||x||; " + frac),
                zero.done("lambda_ctx = 0: query unchanged and L_q = 0")};
  return rep;
}

// ---------------------------------------------------------------------------

TheoremReport check_attention(const Model& model, int trials, std::uint64_t seed) {
  if (!model.routed()) throw Error("check_attention: queryable model required");
  Gaussian g(seed);
  const SeedTree tree(seed);
  const int w = model.config.width;
  AttentionAdapter att;
  for (int p = 0; p < 4; ++p) {
    AdapterLayer& l = att.proj[static_cast<std::size_t>(p)];
    l = AdapterLayer::init(w, w, model.bank.r, model.config.alpha_L,
                           tree.seed("projection", static_cast<std::uint64_t>(p)));
    l.B = gaussian_matrix(g, l.B.rows(), l.B.cols(), 0.3);
    l.eta = g();
  }
  const double R_C = model.bank.max_atom_norm();
  Tally norm("attention", "attention.norm", kBoundSlack);
  Tally stab("attention", "attention.stability", kBoundSlack);
  long discarded = 0;
  for (int t = 0; t < trials; ++t) {
    const Perturbation pt = perturb(model, g);
    for (int p = 0; p < 4; ++p) {
      const auto proj = static_cast<Projection>(p);
      const AdapterLayer& l = att.at(proj);
      const double nA = spectral_norm(l.A), nB = spectral_norm(l.B);
      norm.bound(spectral_norm(attention_delta_w(att, pt.r0.S, proj)),
                 l.scale() * nB * (1.0 + std::abs(l.gate()) * R_C) * nA);
      if (!pt.admissible) continue;
      const double k = static_cast<double>(pt.r0.active.size());
      const Mat diff = attention_delta_w(att, pt.r1.S, proj) - attention_delta_w(att, pt.r0.S, proj);
      stab.bound(spectral_norm(diff) / pt.dnorm,
                 l.scale() * nB * std::abs(l.gate()) * nA * R_C * std::sqrt(k) * pt.L_alpha);
    }
    if (!pt.admissible) {
      ++discarded;
      stab.discard();
    }
  }
  TheoremReport rep;
  rep.checks = {norm.done("||dW^p|| <= (a/r) R_B^p (1 + |g^p| R_C) R_A^p for p in Q, K, V, O"),
                stab.done("||dW^p(e) - dW^p(e')|| <= (a/r) R_B^p |g^p| R_A^p R_C sqrt(k) L_alpha "
                          "||de||; discarded " + std::to_string(discarded) + " trials")};
  return rep;
}

// ---------------------------------------------------------------------------

TheoremReport check_limits(const Model& model, std::uint64_t seed) {
  if (!model.routed()) throw Error("check_limits: queryable model required");
  Gaussian g(seed);
  const int in = model.config.in_dim;
  const int dc = model.router.d_c();

  // (a) no instruction path at all.
  Tally a("limits", "limits.a_state_only", 0.0);
  {
    Model m = model;
    m.router.tau_lang = 0.0;
    m.router.lambda_ctx = 0.0;
    for (int t = 0; t < 20; ++t) {
      const Instruction instr = random_instruction(g, dc);
      const Mat X = random_inputs(g, in, 3);
      const ForwardTrace with = forward_batch(m, X, &instr);
      const ForwardTrace without = forward_batch(m, X, nullptr);
      double err = (with.output - without.output).cwiseAbs().maxCoeff();
      for (std::size_t b = 0; b < with.blocks.size(); ++b) {
        for (std::size_t u = 0; u < with.blocks[b].routes.size(); ++u) {
          const RouteResult& r1 = with.blocks[b].routes[u];
          const RouteResult& r0 = without.blocks[b].routes[u];
          err = std::max(err, r1.active == r0.active ? 0.0 : kInf);
          err = std::max(err, (r1.alpha.weights() - r0.alpha.weights()).cwiseAbs().maxCoeff());
          err = std::max(err, (r1.S - r0.S).cwiseAbs().maxCoeff());
          err = std::max(err, (r1.query - r0.query).cwiseAbs().maxCoeff());
        }
      }
      a.error(err);
    }
  }

  // (b) closed gates.
  Tally b("limits", "limits.b_static_lora", 1e-12);
  {
    Model m = model;
    for (AdapterLayer& l : m.layers) l.eta = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < 20; ++t) {
      const Instruction instr = random_instruction(g, dc);
      const Mat X = random_inputs(g, in, 3);
      b.error((forward_batch(m, X, &instr).output - lora_baseline_forward_batch(m, X))
                  .cwiseAbs()
                  .maxCoeff());
    }
    const Mat S = routed_operator(m.bank, Simplex::uniform(static_cast<std::size_t>(m.bank.M)));
    for (const AdapterLayer& l : m.layers) {
      b.error((delta_w(l, S) - l.scale() * l.B * l.A).cwiseAbs().maxCoeff());
    }
  }

  // (c) tau -> infinity collapses onto the prior's favourite active atom.
  Tally c_alpha("limits", "limits.c_alpha", 1e-6);
  Tally c_op("limits", "limits.c_operator", 1e-6);
  {
    Model m = model;
    m.router.tau_lang = 1e4;
    for (int t = 0; t < 40; ++t) {
      const Instruction instr = random_instruction(g, dc);
      const ForwardTrace tr = forward_batch(m, random_inputs(g, in, 1), &instr);
      for (const BlockTrace& bt : tr.blocks) {
        const RouteResult& rt = bt.routes[0];
        const Vec rho_I = restrict(rt.rho, rt.active);
        Eigen::Index best = 0;
        const double top = rho_I.maxCoeff(&best);
        double second = -kInf;
        for (Eigen::Index i = 0; i < rho_I.size(); ++i) {
          if (i != best) second = std::max(second, rho_I[i]);
        }
        // Near-ties are not in the limit's reach at finite tau.
        if (rho_I.size() > 1 && top - second < 5e-3) {
          c_alpha.discard();
          c_op.discard();
          continue;
        }
        const int m_dag = rt.active[static_cast<std::size_t>(best)];
        c_alpha.error(1.0 - rt.alpha[m_dag]);
        c_op.error((rt.S - m.bank.atoms[static_cast<std::size_t>(m_dag)]).norm());
      }
    }
  }

  // (d) constant state logits: q = 0 gives zeta = 0 for every atom.
  Tally d("limits", "limits.d_tempered_prior", 1e-10);
  Tally d1("limits", "limits.d_tau_one", 1e-10);
  {
    Model m = model;
    const Vec q = Vec::Zero(m.router.d_k());
    for (double tau : {0.0, 0.5, 1.0, 2.0, 4.0}) {
      m.router.tau_lang = tau;
      for (int t = 0; t < 20; ++t) {
        const Instruction instr = random_instruction(g, dc);
        const RouteResult rt = route(m.bank, m.router, q, &instr);
        const Simplex p_I = renormalized(restrict(rt.prior->weights(), rt.active));
        const Vec alpha_I = restrict(rt.alpha.weights(), rt.active);
        d.error((alpha_I - tempered_prior(p_I, tau).weights()).cwiseAbs().maxCoeff());
        if (tau == 1.0) d1.error((alpha_I - p_I.weights()).cwiseAbs().maxCoeff());
      }
    }
  }

  TheoremReport rep;
  rep.checks = {a.done("tau = lambda = 0: routes and outputs identical to instruction-free calls"),
                b.done("g = 0: forward equals the static LoRA forward"),
                c_alpha.done("tau = 1e4: 1 - alpha_{m+}; near-tie instances discarded"),
                c_op.done("tau = 1e4: ||S - C_{m+}||_F"),
                d.done("constant zeta: alpha equals the tempered prior"),
                d1.done("constant zeta, tau = 1: alpha equals the renormalized prior")};
  return rep;
}

// ---------------------------------------------------------------------------

TheoremReport check_gradients(const Model& model, std::uint64_t seed) {
  if (!model.routed()) throw Error("check_gradients: queryable model required");
  Gaussian g(seed);
  const Mat X = random_inputs(g, model.config.in_dim, 3);
  const Mat Y = gaussian_matrix(g, model.config.out_dim, 3, 1.0);
  const Instruction instr = random_instruction(g, model.router.d_c(), 1.0, 1.0);
  const double h = kFdStep;
  const double tau = model.router.tau_lang;

  const LossAndGrads lg = loss_and_grads(model, X, Y, &instr);
  const ForwardTrace& tr = lg.trace;
  const auto loss_of = [&](const Model& m, const ForwardOptions& opts = {}) {
    return mse_loss(forward_batch(m, X, &instr, opts).output, Y);
  };
  // Central difference of the loss under a route edit that depends on +-h.
  const auto fd_route = [&](int block, int unit,
                            const std::function<void(RouteResult&, double)>& edit) {
    double v[2];
    for (int s = 0; s < 2; ++s) {
      const double step = s == 0 ? h : -h;
      ForwardOptions opts;
      opts.route_hook = [&](int b, int u, RouteResult& rt) {
        if (b == block && u == unit) edit(rt, step);
      };
      v[s] = loss_of(model, opts);
    }
    return (v[0] - v[1]) / (2.0 * h);
  };

  Tally full("gradients", "gradients.full_backward", kFdAbs);
  Tally gS("gradients", "gradients.grad_S", kFdAbs);
  Tally gC("gradients", "gradients.grad_atoms", kFdAbs);
  Tally gA("gradients", "gradients.grad_alpha", kFdAbs);
  Tally gZ("gradients", "gradients.grad_fused_logits", kFdAbs);
  Tally gZeta("gradients", "gradients.grad_state_logits", kFdAbs);
  Tally gRho("gradients", "gradients.grad_language_logits", kFdAbs);
  Tally gGate("gradients", "gradients.grad_gate", kFdAbs);
  Tally gComp("gradients", "gradients.compressed", kFdAbs);
  Tally gCompId("gradients", "gradients.compressed_identity", 1e-12);

  // Every trainable scalar.
  {
    Model m = model;
    GradSet grads = lg.grads;
    std::vector<ParamView> params = trainable_params(m);
    const std::vector<ParamView> gv = grad_views(m, grads);
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (double& x : params[p].value) {
        const double keep = x;
        x = keep + h;
        const double up = loss_of(m);
        x = keep - h;
        const double dn = loss_of(m);
        x = keep;
        full.fd((up - dn) / (2.0 * h), gv[p].value[static_cast<std::size_t>(&x - params[p].value.data())]);
      }
    }
  }

  const int r = model.bank.r;
  std::vector<Mat> atom_sum(static_cast<std::size_t>(model.bank.M), Mat::Zero(r, r));
  for (int b = 0; b < model.partition.size(); ++b) {
    const BlockTrace& bt = tr.blocks[static_cast<std::size_t>(b)];
    for (int u = 0; u < static_cast<int>(bt.routes.size()); ++u) {
      const RouteResult& rt0 = bt.routes[static_cast<std::size_t>(u)];
      const Mat G = grad_S_block(tr, lg.grads, model, b, u);
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < r; ++j) {
          gS.fd(fd_route(b, u, [&](RouteResult& rt, double s) { rt.S(i, j) += s; }), G(i, j));
        }
      }
      const std::vector<Mat> ga = grad_atoms(rt0, G);
      for (std::size_t m = 0; m < ga.size(); ++m) atom_sum[m] += ga[m];

      const LogitGrads lgr = grad_logits(rt0, G, model.bank, tau);
      for (int m = 0; m < model.bank.M; ++m) {
        const Mat& Cm = model.bank.atoms[static_cast<std::size_t>(m)];
        gA.fd(fd_route(b, u, [&](RouteResult& rt, double s) { rt.S += s * Cm; }), lgr.psi[m]);
        gRho.fd(fd_route(b, u,
                         [&](RouteResult& rt, double s) {
                           Vec rho = rt.rho;
                           rho[m] += s;
                           reroute(model.bank, rt, fuse_logits(rt.zeta, softmax(rho), tau));
                         }),
                lgr.drho[m]);
        if (std::find(rt0.active.begin(), rt0.active.end(), m) == rt0.active.end()) continue;
        gZ.fd(fd_route(b, u,
                       [&](RouteResult& rt, double s) {
                         Vec z = rt.fused;
                         z[m] += s;
                         reroute(model.bank, rt, z);
                       }),
              lgr.dzeta[m]);
        gZeta.fd(fd_route(b, u,
                          [&](RouteResult& rt, double s) {
                            Vec zeta = rt.zeta;
                            zeta[m] += s;
                            reroute(model.bank, rt, fuse_logits(zeta, *rt.prior, tau));
                          }),
                 lgr.dzeta[m]);
      }
    }
  }
  // Atoms: FD on C_m entries against the alpha-weighted block gradients.
  for (int m = 0; m < model.bank.M; ++m) {
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < r; ++j) {
        Model mp = model, mm = model;
        mp.bank.atoms[static_cast<std::size_t>(m)](i, j) += h;
        mm.bank.atoms[static_cast<std::size_t>(m)](i, j) -= h;
        gC.fd((loss_of(mp) - loss_of(mm)) / (2.0 * h), atom_sum[static_cast<std::size_t>(m)](i, j));
      }
    }
  }

  for (int l = 0; l < model.config.depth; ++l) {
    Model mp = model, mm = model;
    mp.layers[static_cast<std::size_t>(l)].eta += h;
    mm.layers[static_cast<std::size_t>(l)].eta -= h;
    gGate.fd((loss_of(mp) - loss_of(mm)) / (2.0 * h), grad_gate(tr, lg.grads, model, l));

    // Dense gradient of the effective weight, by differences on W0.
    const AdapterLayer& al = model.layers[static_cast<std::size_t>(l)];
    Mat G(al.d_out(), al.d_in());
    for (int i = 0; i < G.rows(); ++i) {
      for (int j = 0; j < G.cols(); ++j) {
        auto shifted = [&](double s) {
          auto bb = std::make_shared<Backbone>(*model.backbone);
          bb->W[static_cast<std::size_t>(l)](i, j) += s;
          Model m = model;
          m.backbone = bb;
          return loss_of(m);
        };
        G(i, j) = (shifted(h) - shifted(-h)) / (2.0 * h);
      }
    }
    // B^T G A^T == (1 / scale) sum_n r_n s_n^T
    const LayerTrace& lt = tr.layers[static_cast<std::size_t>(l)];
    const Mat rank_side = lg.grads.r[static_cast<std::size_t>(l)] * lt.s.transpose() / al.scale();
    const Mat comp = compressed_gradient(G, al);
    for (Eigen::Index i = 0; i < comp.size(); ++i) gComp.fd(comp.data()[i], rank_side.data()[i]);

    const int b = model.partition.block_of(l);
    const Mat& S = tr.blocks[static_cast<std::size_t>(b)].routes[0].S;
    const double lhs = (G.cwiseProduct(al.scale() * al.gate() * al.B * S * al.A)).sum();
    const double rhs = al.scale() * al.gate() * comp.cwiseProduct(S).sum();
    gCompId.error(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }

  TheoremReport rep;
  rep.checks = {full.done("central differences over every trainable scalar"),
                gS.done("dL/dS = sum_l g_l r_l s_l^T"),
                gC.done("dL/dC_m = sum over routes of alpha_m dL/dS"),
                gA.done("dL/dalpha_m = <dL/dS, C_m>"),
                gZ.done("dL/dz_m = alpha_m (psi_m - psi_bar) on the active set"),
                gZeta.done("dL/dzeta_m = alpha_m (psi_m - psi_bar) on the active set"),
                gRho.done("dL/drho_m = tau alpha_m (psi_m - psi_bar)"),
                gGate.done("dL/deta = g (1 - g) <r, d>"),
                gComp.done("B^T G A^T with G from differences on W0"),
                gCompId.done("<G, (a/r) g B S A> = (a/r) g <B^T G A^T, S>")};
  return rep;
}

// ---------------------------------------------------------------------------

TheoremReport run_theory_suite(const TheoryConfig& cfg) {
  const SeedTree tree(cfg.seed);
  const auto want = [&](const std::string& name) {
    return cfg.only.empty() || std::find(cfg.only.begin(), cfg.only.end(), name) != cfg.only.end();
  };
  for (const std::string& name : cfg.only) {
    const auto& all = theory_check_names();
    if (std::find(all.begin(), all.end(), name) == all.end()) {
      throw Error("theory: unknown check " + name);
    }
  }
  if (cfg.atom_radius < 0.0 || cfg.inject_atom_norm < 0.0) {
    throw Error("theory: atom radius and injected norm must be non-negative");
  }
  Model model = theory_model(tree.seed("model"), 6, 8, 4, 6, 3);
  if (cfg.atom_radius > 0.0) model.bank.project_atoms(cfg.atom_radius);
  if (cfg.inject_atom_norm > 0.0) {
    Mat& c = model.bank.atoms[0];
    c *= cfg.inject_atom_norm / spectral_norm(c);
  }
  TheoremReport rep;
  if (want("variational")) rep.append(check_variational(cfg.trials, tree.seed("variational")));
  if (want("jacobians")) rep.append(check_jacobians(cfg.trials, tree.seed("jacobians")));
  if (want("norm_bounds")) {
    rep.append(check_norm_bounds(model, cfg.trials, tree.seed("norm_bounds"), cfg.atom_radius));
  }
  if (want("gradients")) {
    rep.append(check_gradients(theory_model(tree.seed("gradient_model")), tree.seed("gradients")));
  }
  if (want("lipschitz")) rep.append(check_lipschitz(model, cfg.trials, tree.seed("lipschitz")));
  if (want("attention")) rep.append(check_attention(model, cfg.trials, tree.seed("attention")));
  if (want("limits")) rep.append(check_limits(model, tree.seed("limits")));
  return rep;
}

std::string report_to_json(const TheoremReport& report, const TheoryConfig& cfg) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["format"] = "qmem.theory_report";
  j["version"] = 1;
  j["seed"] = cfg.seed;
  j["trials"] = cfg.trials;
  j["atom_radius"] = cfg.atom_radius;
  j["inject_atom_norm"] = cfg.inject_atom_norm;
  j["passed"] = report.passed();
  ordered_json checks = ordered_json::array();
  for (const CheckResult& c : report.checks) {
    ordered_json e;
    e["check"] = c.check;
    e["name"] = c.name;
    e["trials"] = c.trials;
    e["discarded"] = c.discarded;
    e["max_violation"] = c.max_violation;
    if (std::isfinite(c.min_slack)) {
      e["min_slack"] = c.min_slack;
    } else {
      e["min_slack"] = nullptr;
    }
    e["tolerance"] = c.tolerance;
    e["passed"] = c.passed;
    e["detail"] = c.detail;
    checks.push_back(std::move(e));
  }
  j["checks"] = std::move(checks);
  const BoundConstants& b = report.constants;
  j["constants"] = {{"R_C", b.R_C}, {"R_A", b.R_A}, {"R_B", b.R_B}, {"R_s", b.R_s},
                    {"R_e", b.R_e}, {"R_w", b.R_w}, {"rho_min", b.rho_min}};
  ordered_json map = ordered_json::array();
  for (const StatementCheck& s : theory_mapping()) {
    map.push_back({{"statement", s.statement}, {"check", s.check}});
  }
  j["mapping"] = std::move(map);
  return j.dump(2) + "\n";
}

}  // namespace qmem
