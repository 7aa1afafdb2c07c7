// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/adapter.hpp"

#include <cmath>

#include "qmem/random.hpp"

namespace qmem {

double gate(double eta) {
  if (!std::isfinite(eta)) {
    if (std::isnan(eta)) throw Error("gate: NaN logit");
    return eta > 0 ? 1.0 : 0.0;
  }
  return sigmoid(eta);
}

double AdapterLayer::gate() const { return gate_clamped ? 0.0 : qmem::gate(eta); }

void AdapterLayer::validate() const {
  if (A.rows() < 1 || A.cols() < 1) throw ShapeError("adapter: empty A");
  if (B.cols() != A.rows()) throw ShapeError("adapter: B columns must equal rank");
  if (!(alpha_L > 0.0)) throw Error("adapter: alpha_L must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw Error("adapter: dropout outside [0, 1)");
}

AdapterLayer AdapterLayer::init(int d_in, int d_out, int r, double alpha_L, std::uint64_t seed) {
  Gaussian g(seed);
  AdapterLayer layer;
  layer.A = gaussian_matrix(g, r, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
  layer.B = Mat::Zero(d_out, r);
  layer.alpha_L = alpha_L;
  layer.validate();
  return layer;
}

namespace {

void check_operator(const AdapterLayer& layer, const Mat& S) {
  if (S.rows() != layer.rank() || S.cols() != layer.rank()) {
    throw ShapeError("adapter: S must be r x r");
  }
}

}  // namespace

RankStates rank_transform(const AdapterLayer& layer, const Mat& S, const Vec& s) {
  check_operator(layer, S);
  if (s.size() != layer.rank()) throw ShapeError("rank_transform: state is not rank-dimensional");
  RankStates out;
  out.d = S * s;
  out.t = s + layer.gate() * out.d;
  return out;
}

Mat delta_w(const AdapterLayer& layer, const Mat& S) {
  check_operator(layer, S);
  Mat inner = layer.gate() * S;
  inner.diagonal().array() += 1.0;
  return layer.scale() * (layer.B * (inner * layer.A));
}

Vec apply_adapter(const AdapterLayer& layer, const Mat& S, const Vec& h, const Vec& W0h) {
  if (h.size() != layer.d_in()) throw ShapeError("apply_adapter: input dimension");
  if (W0h.size() != layer.d_out()) throw ShapeError("apply_adapter: frozen output dimension");
  const RankStates st = rank_transform(layer, S, layer.A * h);
  return W0h + layer.scale() * (layer.B * st.t);
}

const char* projection_name(Projection p) {
  switch (p) {
    case Projection::kQ: return "Q";
    case Projection::kK: return "K";
    case Projection::kV: return "V";
    case Projection::kO: return "O";
  }
  throw Error("unknown projection");
}

Mat attention_delta_w(const AttentionAdapter& att, const Mat& S, Projection p) {
  const auto idx = static_cast<int>(p);
  if (idx < 0 || idx > 3) throw Error("attention_delta_w: invalid projection");
  return delta_w(att.at(p), S);
}

Vec attention_router_state(const Mat& R_Q, const Mat& R_K, const Mat& R_V) {
  if (R_Q.rows() == 0) throw Error("attention_router_state: empty token set");
  if (R_K.rows() != R_Q.rows() || R_V.rows() != R_Q.rows() || R_K.cols() != R_Q.cols() ||
      R_V.cols() != R_Q.cols()) {
    throw ShapeError("attention_router_state: mismatched token states");
  }
  const Vec mq = R_Q.colwise().mean().transpose();
  const Vec mk = R_K.colwise().mean().transpose();
  const Vec mv = R_V.colwise().mean().transpose();
  return (mq + mk + mv) / 3.0;
}

}  // namespace qmem
