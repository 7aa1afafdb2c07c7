// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include "qmem/random.hpp"

namespace qmem {

GradSet GradSet::zeros_like(const Model& model) {
  GradSet g;
  for (const AdapterLayer& l : model.layers) {
    g.A.push_back(Mat::Zero(l.A.rows(), l.A.cols()));
    g.B.push_back(Mat::Zero(l.B.rows(), l.B.cols()));
  }
  g.eta = Vec::Zero(static_cast<Eigen::Index>(model.layers.size()));
  for (const Vec& w : model.router.layer_priors) g.layer_priors.push_back(Vec::Zero(w.size()));
  for (const Mat& c : model.bank.atoms) g.atoms.push_back(Mat::Zero(c.rows(), c.cols()));
  for (const Vec& k : model.bank.keys) g.keys.push_back(Vec::Zero(k.size()));
  const RouterParams& p = model.router;
  g.Q_cur = Mat::Zero(p.Q_cur.rows(), p.Q_cur.cols());
  g.Q_dep = Mat::Zero(p.Q_dep.rows(), p.Q_dep.cols());
  g.Q_ctx = Mat::Zero(p.Q_ctx.rows(), p.Q_ctx.cols());
  g.R_ctx = Mat::Zero(p.R_ctx.rows(), p.R_ctx.cols());
  g.Q_dep_q = Mat::Zero(p.Q_dep_q.rows(), p.Q_dep_q.cols());
  g.Q_dep_k = Mat::Zero(p.Q_dep_k.rows(), p.Q_dep_k.cols());
  return g;
}

std::vector<double> GradSet::layer_norms() const {
  std::vector<double> out;
  out.reserve(A.size());
  for (std::size_t l = 0; l < A.size(); ++l) {
    out.push_back(std::sqrt(A[l].squaredNorm() + B[l].squaredNorm()));
  }
  return out;
}

namespace {

std::span<double> span_of(Mat& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Vec& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// Walks the trainable tensors of `model` in canonical order, handing each to
// `visit(name, model-side tensor index, decay)`. The same walk drives both
// parameter and gradient views.
template <class F>
void walk_trainables(const Model& model, F&& visit) {
  const auto L = model.layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    visit("A." + std::to_string(l), 0, l, true);
    visit("B." + std::to_string(l), 1, l, true);
  }
  if (!model.routed()) return;
  for (std::size_t l = 0; l < L; ++l) {
    if (!model.layers[l].gate_clamped) visit("eta." + std::to_string(l), 2, l, false);
  }
  for (std::size_t b = 0; b < model.router.layer_priors.size(); ++b) {
    visit("w." + std::to_string(b), 3, b, false);
  }
  for (std::size_t m = 0; m < model.bank.atoms.size(); ++m) {
    visit("C." + std::to_string(m), 4, m, true);
  }
  for (std::size_t m = 0; m < model.bank.keys.size(); ++m) {
    visit("k." + std::to_string(m), 5, m, false);
  }
  visit("Q_cur", 6, 0, true);
  visit("Q_dep", 7, 0, true);
  visit("Q_ctx", 8, 0, true);
  visit("R_ctx", 9, 0, true);
  visit("Q_dep_q", 10, 0, true);
  visit("Q_dep_k", 11, 0, true);
}

}  // namespace

std::vector<ParamView> trainable_params(Model& model) {
  std::vector<ParamView> out;
  walk_trainables(model, [&](std::string name, int kind, std::size_t i, bool decay) {
    std::span<double> s;
    switch (kind) {
      case 0: s = span_of(model.layers[i].A); break;
      case 1: s = span_of(model.layers[i].B); break;
      case 2: s = {&model.layers[i].eta, 1}; break;
      case 3: s = span_of(model.router.layer_priors[i]); break;
      case 4: s = span_of(model.bank.atoms[i]); break;
      case 5: s = span_of(model.bank.keys[i]); break;
      case 6: s = span_of(model.router.Q_cur); break;
      case 7: s = span_of(model.router.Q_dep); break;
      case 8: s = span_of(model.router.Q_ctx); break;
      case 9: s = span_of(model.router.R_ctx); break;
      case 10: s = span_of(model.router.Q_dep_q); break;
      default: s = span_of(model.router.Q_dep_k); break;
    }
    out.push_back(ParamView{std::move(name), s, decay});
  });
  return out;
}

std::vector<ParamView> grad_views(const Model& model, GradSet& g) {
  std::vector<ParamView> out;
  walk_trainables(model, [&](std::string name, int kind, std::size_t i, bool decay) {
    std::span<double> s;
    switch (kind) {
      case 0: s = span_of(g.A[i]); break;
      case 1: s = span_of(g.B[i]); break;
      case 2: s = {g.eta.data() + i, 1}; break;
      case 3: s = span_of(g.layer_priors[i]); break;
      case 4: s = span_of(g.atoms[i]); break;
      case 5: s = span_of(g.keys[i]); break;
      case 6: s = span_of(g.Q_cur); break;
      case 7: s = span_of(g.Q_dep); break;
      case 8: s = span_of(g.Q_ctx); break;
      case 9: s = span_of(g.R_ctx); break;
      case 10: s = span_of(g.Q_dep_q); break;
      default: s = span_of(g.Q_dep_k); break;
    }
    out.push_back(ParamView{std::move(name), s, decay});
  });
  return out;
}

double mse_loss(const Vec& pred, const Vec& target) {
  if (pred.size() != target.size()) throw ShapeError("mse_loss: dimension mismatch");
  if (pred.size() == 0) throw ShapeError("mse_loss: empty input");
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

double mse_loss(const Mat& pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("mse_loss: dimension mismatch");
  }
  if (pred.size() == 0) throw ShapeError("mse_loss: empty input");
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

Mat grad_S_block(const ForwardTrace& trace, const GradSet& grads, const Model& model, int block,
                 int unit) {
  if (grads.r.empty()) throw Error("grad_S_block: gradient set has no r_l intermediates");
  const auto [begin, end] = model.partition.blocks.at(static_cast<std::size_t>(block));
  const int r = model.bank.r;
  Mat gS = Mat::Zero(r, r);
  for (int l = begin; l < end; ++l) {
    const LayerTrace& lt = trace.layers.at(static_cast<std::size_t>(l));
    const Mat& R = grads.r.at(static_cast<std::size_t>(l));
    for (int n = 0; n < trace.batch; ++n) {
      if (trace.unit_of(n) != unit) continue;
      gS.noalias() += lt.gate * R.col(n) * lt.s.col(n).transpose();
    }
  }
  return gS;
}

std::vector<Mat> grad_atoms(const RouteResult& route, const Mat& gS) {
  std::vector<Mat> out;
  out.reserve(static_cast<std::size_t>(route.alpha.size()));
  for (Eigen::Index m = 0; m < route.alpha.size(); ++m) out.push_back(route.alpha[m] * gS);
  return out;
}

LogitGrads grad_logits(const RouteResult& route, const Mat& gS, const AtomBank& bank,
                       double tau_lang) {
  LogitGrads out;
  out.psi.resize(bank.M);
  for (int m = 0; m < bank.M; ++m) {
    out.psi[m] = gS.cwiseProduct(bank.atoms[static_cast<std::size_t>(m)]).sum();
  }
  out.psi_bar = route.alpha.weights().dot(out.psi);
  out.dzeta = route.alpha.weights().cwiseProduct((out.psi.array() - out.psi_bar).matrix());
  out.drho = tau_lang * out.dzeta;
  return out;
}

double grad_gate(const ForwardTrace& trace, const GradSet& grads, const Model& model, int layer) {
  const auto li = static_cast<std::size_t>(layer);
  const AdapterLayer& ad = model.layers.at(li);
  if (ad.gate_clamped) return 0.0;
  const LayerTrace& lt = trace.layers.at(li);
  if (lt.d.size() == 0) return 0.0;
  const double g = gate(ad.eta);
  return g * (1.0 - g) * grads.r.at(li).cwiseProduct(lt.d).sum();
}

Mat compressed_gradient(const Mat& G, const AdapterLayer& layer) {
  if (G.rows() != layer.d_out() || G.cols() != layer.d_in()) {
    throw ShapeError("compressed_gradient: G must be d_out x d_in");
  }
  return layer.B.transpose() * G * layer.A.transpose();
}

namespace {

// Cotangents of the normalized keys and instruction projection, summed over
// every routing unit; the RMSNorm VJPs run once at the end since the
// normalized points do not change between units.
struct KeyGrads {
  std::vector<Vec> kn;
  std::vector<Vec> dkn;
  Vec x, xn, dxn;

  KeyGrads(const Model& model, const Instruction* instr) {
    const RouterParams& p = model.router;
    for (const Vec& k : model.bank.keys) {
      kn.push_back(rmsnorm(k, p.eps));
      dkn.push_back(Vec::Zero(k.size()));
    }
    if (instr != nullptr) {
      x = p.R_ctx * instr->embedding;
      xn = rmsnorm(x, p.eps);
      dxn = Vec::Zero(x.size());
    }
  }

  void flush(const Model& model, const Instruction* instr, GradSet& g) const {
    const RouterParams& p = model.router;
    for (std::size_t m = 0; m < dkn.size(); ++m) {
      if (dkn[m].isZero(0.0)) continue;
      g.keys[m] += rmsnorm_vjp(model.bank.keys[m], dkn[m], p.eps);
    }
    if (instr != nullptr && !dxn.isZero(0.0)) {
      g.R_ctx.noalias() += rmsnorm_vjp(x, dxn, p.eps) * instr->embedding.transpose();
    }
  }
};

// Backward through one routing unit of a block. Accumulates parameter
// gradients and dL/dsbar_i of earlier blocks; returns dL/ds_entry.
Vec router_backward(const Model& model, const BlockTrace& bt, int b, int unit, const Mat& dS,
                    const Instruction* instr, GradSet& g, KeyGrads& kg,
                    std::vector<Mat>& d_sbar) {
  const AtomBank& bank = model.bank;
  const RouterParams& p = model.router;
  const auto u = static_cast<std::size_t>(unit);
  const RouteResult& rt = bt.routes[u];
  const QueryParts& qp = bt.query[u];
  const std::vector<Vec>& ctx = bt.context[u];
  const double tau = (instr != nullptr) ? p.tau_lang : 0.0;
  const double dk = static_cast<double>(p.d_k());

  const LogitGrads lg = grad_logits(rt, dS, bank, tau);
  g.psi[static_cast<std::size_t>(b)][u] = lg.psi;
  g.psi_bar[static_cast<std::size_t>(b)][u] = lg.psi_bar;
  g.grad_S[static_cast<std::size_t>(b)][u] = dS;
  for (int m = 0; m < bank.M; ++m) {
    if (rt.alpha[m] != 0.0) g.atoms[static_cast<std::size_t>(m)].noalias() += rt.alpha[m] * dS;
  }

  const std::vector<Vec>& kn = kg.kn;
  std::vector<Vec>& dkn = kg.dkn;

  // State logits.
  const double c_attn = 1.0 / (std::sqrt(dk) * p.T_attn);
  const Vec qn = rmsnorm(rt.query, p.eps);
  Vec dqn = Vec::Zero(bank.d_k);
  for (int m = 0; m < bank.M; ++m) {
    const double dz = lg.dzeta[m];
    if (dz == 0.0) continue;
    dqn.noalias() += (c_attn * dz) * kn[static_cast<std::size_t>(m)];
    dkn[static_cast<std::size_t>(m)].noalias() += (c_attn * dz) * qn;
  }

  // Language logits.
  if (instr != nullptr && tau != 0.0) {
    const double c_lang = 1.0 / (std::sqrt(dk) * p.T_lang);
    for (int m = 0; m < bank.M; ++m) {
      const double dr = lg.drho[m];
      if (dr == 0.0) continue;
      kg.dxn.noalias() += (c_lang * dr) * kn[static_cast<std::size_t>(m)];
      dkn[static_cast<std::size_t>(m)].noalias() += (c_lang * dr) * kg.xn;
    }
  }

  const Vec dq = rmsnorm_vjp(rt.query, dqn, p.eps);
  Vec dq0 = dq;

  // Depth attention.
  if (!ctx.empty()) {
    g.Q_dep.noalias() += dq * qp.u.transpose();
    const Vec du = p.Q_dep.transpose() * dq;
    const auto nb = static_cast<Eigen::Index>(ctx.size());
    Vec dbeta(nb);
    for (Eigen::Index i = 0; i < nb; ++i) dbeta[i] = du.dot(ctx[static_cast<std::size_t>(i)]);
    const Vec dxi = softmax_vjp(qp.beta, dbeta);
    const double c_dep = 1.0 / (std::sqrt(dk) * p.T_dep);
    const Vec a = p.Q_dep_q * qp.q0;
    const Vec an = rmsnorm(a, p.eps);
    Vec dan = Vec::Zero(a.size());
    for (Eigen::Index i = 0; i < nb; ++i) {
      const Vec& sbar = ctx[static_cast<std::size_t>(i)];
      const Vec bi = p.Q_dep_k * sbar;
      const Vec bn = rmsnorm(bi, p.eps);
      dan.noalias() += (c_dep * dxi[i]) * bn;
      const Vec dbi = rmsnorm_vjp(bi, (c_dep * dxi[i]) * an, p.eps);
      g.Q_dep_k.noalias() += dbi * sbar.transpose();
      Vec dsbar = qp.beta[i] * du;
      dsbar.noalias() += p.Q_dep_k.transpose() * dbi;
      d_sbar[static_cast<std::size_t>(i)].col(unit) += dsbar;
    }
    const Vec da = rmsnorm_vjp(a, dan, p.eps);
    g.Q_dep_q.noalias() += da * qp.q0.transpose();
    dq0.noalias() += p.Q_dep_q.transpose() * da;
  }

  // Pre-query.
  g.layer_priors[static_cast<std::size_t>(b)] += dq0;
  g.Q_cur.noalias() += dq0 * bt.s_entry.col(unit).transpose();
  if (instr != nullptr && p.lambda_ctx != 0.0) {
    g.Q_ctx.noalias() += p.lambda_ctx * dq0 * instr->embedding.transpose();
  }
  return p.Q_cur.transpose() * dq0;
}

}  // namespace

GradSet backward(const Model& model, const ForwardTrace& trace, const Mat& d_output,
                 const Instruction* instr) {
  if (model.config.backbone != BackboneKind::kMlp) {
    throw Error("backward: only the MLP backbone supports training");
  }
  const Backbone& bb = *model.backbone;
  if (trace.layers.size() != model.layers.size()) throw Error("backward: trace has no layer records");
  const int N = trace.batch;
  if (d_output.cols() != N || d_output.rows() != bb.head_W.rows()) {
    throw ShapeError("backward: output gradient shape");
  }
  const bool routed = model.routed();
  const int units = trace.units();
  const int r = model.bank.r;
  const int nblocks = model.partition.size();

  GradSet g = GradSet::zeros_like(model);
  g.r.resize(model.layers.size());
  if (routed) {
    g.psi.assign(static_cast<std::size_t>(nblocks), std::vector<Vec>(static_cast<std::size_t>(units)));
    g.psi_bar.assign(static_cast<std::size_t>(nblocks), std::vector<double>(static_cast<std::size_t>(units), 0.0));
    g.grad_S.assign(static_cast<std::size_t>(nblocks), std::vector<Mat>(static_cast<std::size_t>(units)));
  }
  std::vector<Mat> d_sbar(static_cast<std::size_t>(nblocks), Mat::Zero(r, units));
  std::optional<KeyGrads> kg;
  if (routed) kg.emplace(model, instr);

  Mat dH = bb.head_W.transpose() * d_output;
  for (int b = nblocks - 1; b >= 0; --b) {
    const auto [begin, end] = model.partition.blocks[static_cast<std::size_t>(b)];
    const double nb = static_cast<double>(end - begin);
    std::vector<Mat> dS;
    Mat ds_from_sbar;
    if (routed) {
      dS.assign(static_cast<std::size_t>(units), Mat::Zero(r, r));
      const Mat& dz = d_sbar[static_cast<std::size_t>(b)];
      if (units == 1) {
        ds_from_sbar = dz.col(0).replicate(1, N) / (nb * static_cast<double>(N));
      } else {
        ds_from_sbar = dz / nb;
      }
    }
    const BlockTrace* bt = routed ? &trace.blocks[static_cast<std::size_t>(b)] : nullptr;

    for (int l = end - 1; l >= begin; --l) {
      const auto li = static_cast<std::size_t>(l);
      const LayerTrace& lt = trace.layers[li];
      const AdapterLayer& ad = model.layers[li];
      const Mat dY = dH.cwiseProduct(lt.y.binaryExpr(
          lt.cdf, [](double v, double c) { return gelu_grad_from_cdf(v, c); }));
      g.B[li].noalias() += ad.scale() * (dY * lt.t.transpose());
      Mat dT = ad.scale() * (ad.B.transpose() * dY);
      Mat ds = dT;
      if (routed) {
        const double gl = lt.gate;
        if (!ad.gate_clamped) {
          const double sg = gate(ad.eta);
          g.eta[l] = sg * (1.0 - sg) * dT.cwiseProduct(lt.d).sum();
        }
        if (units == 1) {
          dS[0].noalias() += gl * (dT * lt.s.transpose());
          ds.noalias() += gl * (bt->routes[0].S.transpose() * dT);
        } else {
          for (int n = 0; n < N; ++n) {
            dS[static_cast<std::size_t>(n)].noalias() += gl * (dT.col(n) * lt.s.col(n).transpose());
            ds.col(n).noalias() += gl * (bt->routes[static_cast<std::size_t>(n)].S.transpose() * dT.col(n));
          }
        }
        ds += ds_from_sbar;
        if (l == begin) {
          for (int u = 0; u < units; ++u) {
            const Vec de = router_backward(model, *bt, b, u, dS[static_cast<std::size_t>(u)],
                                           instr, g, *kg, d_sbar);
            if (units == 1) {
              ds.colwise() += de / static_cast<double>(N);
            } else {
              ds.col(u) += de;
            }
          }
        }
      }
      g.r[li] = std::move(dT);
      const Mat& a_in = lt.a_in.size() ? lt.a_in : lt.h_in;
      g.A[li].noalias() += ds * a_in.transpose();
      Mat dH_in = bb.W[li].transpose() * dY;
      if (lt.mask.size()) {
        dH_in += (ad.A.transpose() * ds).cwiseProduct(lt.mask);
      } else {
        dH_in.noalias() += ad.A.transpose() * ds;
      }
      dH = std::move(dH_in);
    }
  }

  if (kg) kg->flush(model, instr, g);

  for (const ParamView& v : grad_views(model, g)) {
    for (double x : v.value) {
      if (!std::isfinite(x)) throw Error("backward: non-finite gradient in " + v.name);
    }
  }
  return g;
}

LossAndGrads loss_and_grads(const Model& model, const Mat& X, const Mat& Y,
                            const Instruction* instr, const ForwardOptions& opts) {
  LossAndGrads out;
  out.trace = forward_batch(model, X, instr, opts);
  out.loss = mse_loss(out.trace.output, Y);
  const Mat d_out = (2.0 / static_cast<double>(Y.size())) * (out.trace.output - Y);
  out.grads = backward(model, out.trace, d_out, instr);
  return out;
}

void adamw_step(std::vector<ParamView>& params, const std::vector<ParamView>& grads,
                OptimState& st) {
  if (params.size() != grads.size()) throw ShapeError("adamw: parameter/gradient count mismatch");
  if (st.m.empty()) {
    for (const ParamView& p : params) {
      st.m.push_back(Vec::Zero(static_cast<Eigen::Index>(p.value.size())));
      st.v.push_back(Vec::Zero(static_cast<Eigen::Index>(p.value.size())));
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adamw: optimizer state does not match");
  ++st.step;
  const AdamWConfig& c = st.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.size() != grads[i].value.size()) {
      throw ShapeError("adamw: shape mismatch for " + params[i].name);
    }
    Eigen::Map<Vec> p(params[i].value.data(), static_cast<Eigen::Index>(params[i].value.size()));
    Eigen::Map<const Vec> g(grads[i].value.data(), static_cast<Eigen::Index>(grads[i].value.size()));
    if (params[i].decay && c.weight_decay != 0.0) p *= 1.0 - c.lr * c.weight_decay;
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g.cwiseAbs2();
    p.array() -= c.lr * (st.m[i].array() / bc1) / ((st.v[i].array() / bc2).sqrt() + c.eps);
  }
}

double concentration_index(const std::vector<double>& norms) {
  if (norms.empty()) return 0.0;
  const double mean = std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(norms.size());
  if (mean == 0.0) return 0.0;
  return *std::max_element(norms.begin(), norms.end()) / mean;
}

namespace {

// Fisher-Yates with raw engine bits so the order is library-independent.
std::vector<int> permutation(int n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 eng(seed);
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(eng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

void gather(const Dataset& d, const std::vector<int>& idx, std::size_t from, std::size_t to,
            Mat& X, Mat& Y) {
  const auto n = static_cast<Eigen::Index>(to - from);
  X.resize(d.X.rows(), n);
  Y.resize(d.Y.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int src = idx[from + static_cast<std::size_t>(j)];
    X.col(j) = d.X.col(src);
    Y.col(j) = d.Y.col(src);
  }
}

void clip_global(std::vector<ParamView>& grads, double clip) {
  if (clip <= 0.0) return;
  double sq = 0.0;
  for (const ParamView& v : grads) {
    for (double x : v.value) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm <= clip) return;
  const double scale = clip / norm;
  for (ParamView& v : grads) {
    for (double& x : v.value) x *= scale;
  }
}

// Plain MLP training for the backbone.
struct BackboneGrads {
  std::vector<Mat> W;
  std::vector<Vec> b;
  Mat head_W;
  Vec head_b;
};

std::vector<ParamView> backbone_views(Backbone& bb) {
  std::vector<ParamView> out;
  for (std::size_t l = 0; l < bb.W.size(); ++l) {
    out.push_back({"W." + std::to_string(l), span_of(bb.W[l]), true});
    out.push_back({"b." + std::to_string(l), span_of(bb.b[l]), false});
  }
  out.push_back({"head_W", span_of(bb.head_W), true});
  out.push_back({"head_b", span_of(bb.head_b), false});
  return out;
}

std::vector<ParamView> backbone_grad_views(BackboneGrads& g) {
  std::vector<ParamView> out;
  for (std::size_t l = 0; l < g.W.size(); ++l) {
    out.push_back({"W." + std::to_string(l), span_of(g.W[l]), true});
    out.push_back({"b." + std::to_string(l), span_of(g.b[l]), false});
  }
  out.push_back({"head_W", span_of(g.head_W), true});
  out.push_back({"head_b", span_of(g.head_b), false});
  return out;
}

double backbone_step(const Backbone& bb, const Mat& X, const Mat& Y, BackboneGrads& g) {
  const int L = bb.depth();
  std::vector<Mat> H(static_cast<std::size_t>(L) + 1);
  std::vector<Mat> Ys(static_cast<std::size_t>(L));
  std::vector<Mat> cdf(static_cast<std::size_t>(L));
  H[0] = X;
  for (int l = 0; l < L; ++l) {
    const auto li = static_cast<std::size_t>(l);
    Ys[li].noalias() = bb.W[li] * H[li];
    Ys[li].colwise() += bb.b[li];
    gelu_forward(Ys[li], H[li + 1], cdf[li]);
  }
  Mat out = bb.head_W * H[static_cast<std::size_t>(L)];
  out.colwise() += bb.head_b;
  const double loss = mse_loss(out, Y);
  const Mat dOut = (2.0 / static_cast<double>(Y.size())) * (out - Y);
  g.head_W = dOut * H[static_cast<std::size_t>(L)].transpose();
  g.head_b = dOut.rowwise().sum();
  Mat dH = bb.head_W.transpose() * dOut;
  g.W.resize(static_cast<std::size_t>(L));
  g.b.resize(static_cast<std::size_t>(L));
  for (int l = L - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const Mat dY = dH.cwiseProduct(Ys[li].binaryExpr(
        cdf[li], [](double v, double c) { return gelu_grad_from_cdf(v, c); }));
    g.W[li] = dY * H[li].transpose();
    g.b[li] = dY.rowwise().sum();
    dH = bb.W[li].transpose() * dY;
  }
  return loss;
}

double eval_mse(const Model& model, const Dataset& d, const Instruction* instr) {
  ForwardOptions opts;
  opts.keep_trace = false;
  return mse_loss(forward_batch(model, d.X, instr, opts).output, d.Y);
}

bool bad_loss(double loss, double limit) { return !std::isfinite(loss) || loss > limit; }

}  // namespace

Backbone pretrain_backbone(Backbone bb, const Dataset& train, const Dataset* test,
                           const TrainSchedule& sch, std::uint64_t seed,
                           std::vector<EpochRecord>* log) {
  if (sch.pretrain_epochs <= 0) return bb;
  if (train.size() == 0) throw Error("pretrain: empty training set");
  const SeedTree tree(seed);
  OptimState st;
  st.config.lr = sch.pretrain_lr;
  st.config.weight_decay = sch.weight_decay;
  BackboneGrads g;
  Mat Xb;
  Mat Yb;
  const auto bs = static_cast<std::size_t>(std::max(1, sch.batch_size));
  for (int epoch = 1; epoch <= sch.pretrain_epochs; ++epoch) {
    const auto idx = permutation(train.size(), tree.seed("pretrain.shuffle", static_cast<std::uint64_t>(epoch)));
    double total = 0.0;
    for (std::size_t from = 0; from < idx.size(); from += bs) {
      const std::size_t to = std::min(idx.size(), from + bs);
      gather(train, idx, from, to, Xb, Yb);
      total += backbone_step(bb, Xb, Yb, g) * static_cast<double>(to - from);
      auto pv = backbone_views(bb);
      auto gv = backbone_grad_views(g);
      clip_global(gv, sch.grad_clip);
      adamw_step(pv, gv, st);
    }
    const double train_mse = total / static_cast<double>(train.size());
    if (log != nullptr) {
      log->push_back(EpochRecord{epoch, "train", train_mse, 0.0, {}, {}});
      const bool eval_now = test != nullptr && test->size() > 0 &&
                            (epoch % std::max(1, sch.eval_every) == 0 || epoch == sch.pretrain_epochs);
      if (eval_now) {
        log->push_back(EpochRecord{epoch, "test", mse_loss(backbone_forward(bb, test->X), test->Y),
                                   0.0, {}, {}});
      }
    }
    if (bad_loss(train_mse, sch.divergence)) throw Error("pretrain: backbone training diverged");
  }
  return bb;
}

RunReport post_train(Model& model, const Dataset& train, const Dataset& test,
                     const Instruction* instr, const TrainSchedule& sch, std::uint64_t seed) {
  RunReport rep;
  rep.method = method_name(model.config.method);
  rep.best_train_mse = std::numeric_limits<double>::infinity();
  rep.best_test_mse = std::numeric_limits<double>::infinity();
  if (sch.post_epochs <= 0) {
    rep.best_train_mse = rep.best_test_mse = rep.final_train_mse = rep.final_test_mse =
        std::numeric_limits<double>::quiet_NaN();
    return rep;
  }
  if (train.size() == 0) throw Error("post_train: empty training set");
  const SeedTree tree(seed);
  OptimState st;
  st.config.lr = sch.post_lr;
  st.config.weight_decay = sch.weight_decay;
  const auto bs = static_cast<std::size_t>(std::max(1, sch.batch_size));
  const auto L = model.layers.size();
  const int nblocks = model.partition.size();
  Mat Xb;
  Mat Yb;
  long step = 0;
  for (int epoch = 1; epoch <= sch.post_epochs; ++epoch) {
    const auto idx = permutation(train.size(), tree.seed("post.shuffle", static_cast<std::uint64_t>(epoch)));
    double total = 0.0;
    std::vector<double> norms(L, 0.0);
    std::vector<double> entropy_sum(static_cast<std::size_t>(nblocks), 0.0);
    int batches = 0;
    bool failed = false;
    for (std::size_t from = 0; from < idx.size(); from += bs) {
      const std::size_t to = std::min(idx.size(), from + bs);
      gather(train, idx, from, to, Xb, Yb);
      ForwardOptions opts;
      opts.train = true;
      opts.dropout_seed = tree.seed("dropout", static_cast<std::uint64_t>(step));
      LossAndGrads lg;
      try {
        lg = loss_and_grads(model, Xb, Yb, instr, opts);
      } catch (const Error&) {
        failed = true;
        break;
      }
      total += lg.loss * static_cast<double>(to - from);
      const auto ln = lg.grads.layer_norms();
      for (std::size_t l = 0; l < L; ++l) norms[l] += ln[l];
      for (int b = 0; b < static_cast<int>(lg.trace.blocks.size()); ++b) {
        const auto& routes = lg.trace.blocks[static_cast<std::size_t>(b)].routes;
        double h = 0.0;
        for (const RouteResult& rt : routes) h += entropy(rt.alpha);
        entropy_sum[static_cast<std::size_t>(b)] += h / static_cast<double>(routes.size());
      }
      ++batches;
      ++step;
      auto pv = trainable_params(model);
      auto gv = grad_views(model, lg.grads);
      clip_global(gv, sch.grad_clip);
      adamw_step(pv, gv, st);
      if (sch.project_atoms && model.routed()) model.bank.project_atoms(sch.atom_radius);
    }
    const double train_mse = failed ? std::numeric_limits<double>::infinity()
                                    : total / static_cast<double>(train.size());
    if (bad_loss(train_mse, sch.divergence)) {
      rep.diverged = true;
      rep.diverged_epoch = epoch;
      break;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.split = "train";
    rec.mse = train_mse;
    for (double& n : norms) n /= static_cast<double>(batches);
    rec.grad_concentration = concentration_index(norms);
    rec.layer_grad_norms = std::move(norms);
    if (model.routed()) {
      for (double& h : entropy_sum) h /= static_cast<double>(batches);
      rec.block_entropy = std::move(entropy_sum);
    }
    rep.post.push_back(rec);
    rep.best_train_mse = std::min(rep.best_train_mse, train_mse);
    rep.final_train_mse = train_mse;
    const bool eval_now = test.size() > 0 &&
                          (epoch % std::max(1, sch.eval_every) == 0 || epoch == sch.post_epochs);
    if (eval_now) {
      EpochRecord t;
      t.epoch = epoch;
      t.split = "test";
      t.mse = eval_mse(model, test, instr);
      rep.best_test_mse = std::min(rep.best_test_mse, t.mse);
      rep.final_test_mse = t.mse;
      rep.post.push_back(std::move(t));
    }
  }
  if (rep.diverged) {
    rep.best_train_mse = sch.divergence;
    rep.best_test_mse = sch.divergence;
    rep.final_train_mse = sch.divergence;
    rep.final_test_mse = sch.divergence;
  }
  if (model.routed() && test.size() > 0 && !rep.diverged) {
    const Vec use = atom_usage_of(model, test.X, instr);
    rep.atom_usage.assign(use.data(), use.data() + use.size());
  }
  return rep;
}

RunReport train(Model& model, const Dataset& source, const Dataset& target_train,
                const Dataset& target_test, const Instruction* instr, const TrainSchedule& sch,
                std::uint64_t seed) {
  if (model.config.backbone != BackboneKind::kMlp) throw Error("train: MLP backbone required");
  std::vector<EpochRecord> pre_log;
  Backbone bb = pretrain_backbone(*model.backbone, source, nullptr, sch, seed, &pre_log);
  model.backbone = std::make_shared<const Backbone>(std::move(bb));
  RunReport rep = post_train(model, target_train, target_test, instr, sch, seed);
  rep.pretrain = std::move(pre_log);
  return rep;
}

Vec atom_usage_of(const Model& model, const Mat& X, const Instruction* instr) {
  ForwardOptions opts;
  opts.keep_trace = false;
  const ForwardTrace tr = forward_batch(model, X, instr, opts);
  Vec sum = Vec::Zero(model.bank.M);
  double count = 0.0;
  for (const BlockTrace& bt : tr.blocks) {
    for (const RouteResult& rt : bt.routes) {
      sum += rt.alpha.weights();
      count += 1.0;
    }
  }
  if (count == 0.0) throw Error("atom_usage: model does not route");
  return sum / count;
}

}  // namespace qmem
