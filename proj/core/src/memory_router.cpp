// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/memory_router.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace qmem {

void AtomBank::validate() const {
  if (M < 1 || r < 1 || d_k < 1) throw ShapeError("atom bank: M, r, d_k must be positive");
  if (atoms.size() != static_cast<std::size_t>(M) || keys.size() != static_cast<std::size_t>(M)) {
    throw ShapeError("atom bank: expected M atoms and M keys");
  }
  for (const Mat& c : atoms) {
    if (c.rows() != r || c.cols() != r) throw ShapeError("atom bank: atom is not r x r");
  }
  for (const Vec& k : keys) {
    if (k.size() != d_k) throw ShapeError("atom bank: key dimension is not d_k");
  }
}

AtomBank AtomBank::random(int M, int r, int d_k, std::uint64_t seed, double clip) {
  AtomBank bank;
  bank.M = M;
  bank.r = r;
  bank.d_k = d_k;
  bank.seed = seed;
  const SeedTree tree(seed);
  Gaussian ga(tree.seed("atoms"));
  Gaussian gk(tree.seed("keys"));
  for (int m = 0; m < M; ++m) {
    bank.atoms.push_back(gaussian_matrix(ga, r, r, 1.0 / std::sqrt(static_cast<double>(r))));
    Vec k = gaussian_vector(gk, d_k, 1.0);
    k.normalize();
    bank.keys.push_back(std::move(k));
  }
  bank.validate();
  bank.project_atoms(clip);
  return bank;
}

void AtomBank::project_atoms(double radius) {
  if (!(radius > 0.0)) throw Error("project_atoms: radius must be positive");
  for (Mat& c : atoms) {
    const double n = spectral_norm(c);
    if (n > radius) c *= radius / n;
  }
}

double AtomBank::max_atom_norm() const {
  double best = 0.0;
  for (const Mat& c : atoms) best = std::max(best, spectral_norm(c));
  return best;
}

void RouterParams::validate(const AtomBank& bank) const {
  if (!(T_attn > 0.0 && T_lang > 0.0 && T_dep > 0.0)) {
    throw Error("router: temperatures must be positive");
  }
  if (tau_lang < 0.0 || lambda_ctx < 0.0) throw Error("router: tau_lang and lambda_ctx must be >= 0");
  if (k_active < 1 || k_active > bank.M) throw Error("router: k_active outside [1, M]");
  const int dk = bank.d_k;
  const int r = bank.r;
  auto need = [](const Mat& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
      throw ShapeError(std::string("router: bad shape for ") + what);
    }
  };
  need(Q_cur, dk, r, "Q_cur");
  need(Q_dep, dk, r, "Q_dep");
  need(Q_dep_k, dk, r, "Q_dep_k");
  need(Q_dep_q, dk, dk, "Q_dep_q");
  need(Q_ctx, dk, Q_ctx.cols(), "Q_ctx");
  need(R_ctx, dk, Q_ctx.cols(), "R_ctx");
  for (const Vec& w : layer_priors) {
    if (w.size() != dk) throw ShapeError("router: layer prior is not d_k-dimensional");
  }
}

RouterParams RouterParams::random(int d_k, int r, int d_c, std::uint64_t seed) {
  const SeedTree tree(seed);
  RouterParams p;
  auto draw = [&](std::string_view name, int rows, int cols) {
    Gaussian g(tree.seed(name));
    return gaussian_matrix(g, rows, cols, 1.0 / std::sqrt(static_cast<double>(cols)));
  };
  p.Q_cur = draw("Q_cur", d_k, r);
  p.Q_dep = draw("Q_dep", d_k, r);
  p.Q_ctx = draw("Q_ctx", d_k, d_c);
  p.R_ctx = draw("R_ctx", d_k, d_c);
  p.Q_dep_q = draw("Q_dep_q", d_k, d_k);
  p.Q_dep_k = draw("Q_dep_k", d_k, r);
  return p;
}

Instruction Instruction::embed(std::string text, int d_c, std::uint64_t seed, double radius) {
  if (d_c < 1) throw ShapeError("instruction: d_c must be positive");
  Gaussian g(mix64(fnv1a(text) ^ mix64(seed)));
  Vec e = gaussian_vector(g, d_c, 1.0);
  e *= radius / e.norm();
  return Instruction{std::move(text), std::move(e)};
}

namespace {

std::vector<Vec> normalized_keys(const AtomBank& bank, double eps) {
  std::vector<Vec> out;
  out.reserve(bank.keys.size());
  for (const Vec& k : bank.keys) out.push_back(rmsnorm(k, eps));
  return out;
}

Vec key_scores(const std::vector<Vec>& key_hat, int d_k, const Vec& x, double eps,
               double temperature) {
  const Vec xn = rmsnorm(x, eps);
  const double scale = 1.0 / (std::sqrt(static_cast<double>(d_k)) * temperature);
  Vec out(static_cast<Eigen::Index>(key_hat.size()));
  for (std::size_t m = 0; m < key_hat.size(); ++m) {
    out[static_cast<Eigen::Index>(m)] = xn.dot(key_hat[m]) * scale;
  }
  return out;
}

Vec language_logits_hat(const std::vector<Vec>& key_hat, const AtomBank& bank,
                        const RouterParams& params, const Instruction& instr) {
  if (instr.embedding.size() != params.R_ctx.cols()) {
    throw ShapeError("language_prior: embedding dimension does not match R_ctx");
  }
  return key_scores(key_hat, bank.d_k, params.R_ctx * instr.embedding, params.eps, params.T_lang);
}

}  // namespace

Vec language_logits(const AtomBank& bank, const RouterParams& params,
                    const Instruction& instr) {
  return language_logits_hat(normalized_keys(bank, params.eps), bank, params, instr);
}

Simplex language_prior(const AtomBank& bank, const RouterParams& params,
                       const Instruction& instr) {
  return softmax(language_logits(bank, params, instr));
}

Vec state_logits(const AtomBank& bank, const RouterParams& params, const Vec& q) {
  if (q.size() != bank.d_k) throw ShapeError("state_logits: query dimension is not d_k");
  return key_scores(normalized_keys(bank, params.eps), bank.d_k, q, params.eps, params.T_attn);
}

RoutingCache RoutingCache::build(const AtomBank& bank, const RouterParams& params,
                                 const Instruction* instr) {
  RoutingCache c;
  c.key_hat = normalized_keys(bank, params.eps);
  if (instr != nullptr) {
    c.rho = language_logits_hat(c.key_hat, bank, params, *instr);
    c.prior = softmax(c.rho);
  }
  return c;
}

Vec fuse_logits(const Vec& zeta, const Simplex& prior, double tau_lang) {
  if (zeta.size() != prior.size()) throw ShapeError("fuse_logits: dimension mismatch");
  if (tau_lang == 0.0) return zeta;
  if ((prior.weights().array() == 0.0).any()) throw Error("prior support");
  return zeta.array() + tau_lang * prior.weights().array().log();
}

Mat routed_operator(const AtomBank& bank, const Simplex& alpha) {
  if (alpha.size() != bank.M) throw ShapeError("routed_operator: alpha has wrong length");
  Mat s = Mat::Zero(bank.r, bank.r);
  for (int m = 0; m < bank.M; ++m) {
    if (alpha[m] != 0.0) s.noalias() += alpha[m] * bank.atoms[static_cast<std::size_t>(m)];
  }
  return s;
}

RouteResult route(const AtomBank& bank, const RouterParams& params, const Vec& q,
                  const Instruction* instr) {
  return route(bank, params, q, RoutingCache::build(bank, params, instr));
}

RouteResult route(const AtomBank& bank, const RouterParams& params, const Vec& q,
                  const RoutingCache& cache) {
  if (q.size() != bank.d_k) throw ShapeError("state_logits: query dimension is not d_k");
  RouteResult out;
  out.query = q;
  out.zeta = key_scores(cache.key_hat, bank.d_k, q, params.eps, params.T_attn);
  if (cache.prior) {
    out.rho = cache.rho;
    out.prior = cache.prior;
    out.fused = fuse_logits(out.zeta, *out.prior, params.tau_lang);
  } else {
    out.fused = out.zeta;
  }
  TopK top = topk_softmax(out.fused, params.k_active);
  out.active = std::move(top.active);
  out.alpha = std::move(top.alpha);
  out.S = routed_operator(bank, out.alpha);
  return out;
}

Simplex tempered_prior(const Simplex& prior_I, double tau_lang) {
  if (tau_lang < 0.0) throw Error("tempered_prior: tau must be >= 0");
  if (tau_lang == 0.0) return Simplex::uniform(static_cast<std::size_t>(prior_I.size()));
  if ((prior_I.weights().array() == 0.0).any()) throw Error("prior support");
  return softmax(tau_lang * prior_I.weights().array().log().matrix());
}

double variational_objective(const Vec& a, const Vec& zeta_I, const Simplex& pi) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a[i] > 0.0) kl += a[i] * std::log(a[i] / pi[i]);
  }
  return a.dot(zeta_I) - kl;
}

OracleResult variational_oracle(const Vec& zeta_I, const Simplex& prior_I, double tau_lang,
                                double step, int max_iter) {
  if (zeta_I.size() != prior_I.size()) throw ShapeError("variational_oracle: dimension mismatch");
  require_finite(zeta_I);
  const Simplex pi = tempered_prior(prior_I, tau_lang);
  const Eigen::Index n = zeta_I.size();
  Vec a = Vec::Constant(n, 1.0 / static_cast<double>(n));
  double obj = variational_objective(a, zeta_I, pi);
  for (int it = 1; it <= max_iter; ++it) {
    // Gradient of the objective: zeta - log(a / pi) - 1. The constant drops
    // out after normalization.
    const Vec safe = a.cwiseMax(std::numeric_limits<double>::min());
    Vec logits = safe.array().log() +
                 step * (zeta_I.array() - (safe.array() / pi.weights().array()).log());
    logits.array() -= logits.maxCoeff();
    Vec next = logits.array().exp();
    next /= next.sum();
    const double next_obj = variational_objective(next, zeta_I, pi);
    const double moved = (next - a).cwiseAbs().maxCoeff();
    const double change = std::abs(next_obj - obj);
    a = std::move(next);
    obj = next_obj;
    // The objective is flat to second order at the optimum, so the iterate
    // must also have settled before the result is trusted.
    if (change < 1e-12 && moved < 1e-14) {
      return OracleResult{Simplex(a / a.sum(), 1e-12), it, obj};
    }
  }
  std::ostringstream msg;
  msg << "variational_oracle: no convergence after " << max_iter << " iterations (objective "
      << obj << ")";
  throw Error(msg.str());
}

TradeoffGap tradeoff_gap(const RouteResult& route, double tau_lang) {
  const auto k = static_cast<Eigen::Index>(route.active.size());
  Vec zeta_I(k);
  Vec alpha_I(k);
  Vec p_I(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const int m = route.active[static_cast<std::size_t>(i)];
    zeta_I[i] = route.zeta[m];
    alpha_I[i] = route.alpha[m];
    p_I[i] = route.prior ? (*route.prior)[m] : 1.0;
  }
  p_I /= p_I.sum();
  const Simplex pi = route.prior ? tempered_prior(Simplex(p_I, 1e-9), tau_lang)
                                 : Simplex::uniform(static_cast<std::size_t>(k));
  Eigen::Index m_star = 0;
  const double best = zeta_I.maxCoeff(&m_star);
  TradeoffGap out;
  out.gap = best - alpha_I.dot(zeta_I);
  out.bound = -std::log(pi[m_star]);
  return out;
}

namespace {

nlohmann::json mat_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::string bank_to_json(const AtomBank& bank) {
  bank.validate();
  nlohmann::json j;
  j["format"] = "qmem.atom_bank";
  j["version"] = 1;
  j["M"] = bank.M;
  j["r"] = bank.r;
  j["d_k"] = bank.d_k;
  j["seed"] = bank.seed;
  j["atoms"] = nlohmann::json::array();
  for (const Mat& c : bank.atoms) j["atoms"].push_back(mat_json(c));
  j["keys"] = nlohmann::json::array();
  for (const Vec& k : bank.keys) {
    j["keys"].push_back(std::vector<double>(k.data(), k.data() + k.size()));
  }
  return j.dump(1);
}

AtomBank bank_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("atom bank: invalid JSON: ") + e.what());
  }
  if (j.value("format", "") != "qmem.atom_bank") throw Error("atom bank: unknown format");
  AtomBank bank;
  try {
    bank.M = j.at("M").get<int>();
    bank.r = j.at("r").get<int>();
    bank.d_k = j.at("d_k").get<int>();
    bank.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& a : j.at("atoms")) {
      Mat c(bank.r, bank.r);
      if (a.size() != static_cast<std::size_t>(bank.r)) throw ShapeError("atom bank: atom rows");
      for (int i = 0; i < bank.r; ++i) {
        if (a[static_cast<std::size_t>(i)].size() != static_cast<std::size_t>(bank.r)) {
          throw ShapeError("atom bank: atom cols");
        }
        for (int jj = 0; jj < bank.r; ++jj) {
          c(i, jj) = a[static_cast<std::size_t>(i)][static_cast<std::size_t>(jj)].get<double>();
        }
      }
      bank.atoms.push_back(std::move(c));
    }
    for (const auto& k : j.at("keys")) {
      const auto v = k.get<std::vector<double>>();
      bank.keys.emplace_back(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("atom bank: malformed field: ") + e.what());
  }
  bank.validate();
  return bank;
}

}  // namespace qmem
