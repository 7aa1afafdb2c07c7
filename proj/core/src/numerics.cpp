// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qmem {

Simplex::Simplex(Vec weights, double tol) : w_(std::move(weights)) {
  if (w_.size() == 0) throw Error("simplex: empty weight vector");
  require_finite(w_);
  if ((w_.array() < 0.0).any()) throw Error("simplex: negative weight");
  if (std::abs(w_.sum() - 1.0) > tol) throw Error("simplex: mass is not 1");
}

Simplex Simplex::uniform(std::size_t n) {
  return Simplex(Vec::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n)));
}

Simplex Simplex::vertex(std::size_t n, std::size_t at) {
  Vec w = Vec::Zero(static_cast<Eigen::Index>(n));
  w[static_cast<Eigen::Index>(at)] = 1.0;
  return Simplex(std::move(w));
}

void require_finite(const Vec& x) {
  if (!x.allFinite()) throw Error("non-finite input");
}

void require_finite(const Mat& x) {
  if (!x.allFinite()) throw Error("non-finite input");
}

namespace {

void check_rms_args(const Vec& x, double eps) {
  if (x.size() == 0) throw ShapeError("rms: empty vector");
  if (!(eps > 0.0)) throw Error("rms: eps must be positive");
  require_finite(x);
}

}  // namespace

double rms(const Vec& x, double eps) {
  check_rms_args(x, eps);
  return std::sqrt(x.squaredNorm() / static_cast<double>(x.size()) + eps);
}

Vec rmsnorm(const Vec& x, double eps) { return x / rms(x, eps); }

Mat rmsnorm_jacobian(const Vec& x, double eps) {
  const double r = rms(x, eps);
  const double d = static_cast<double>(x.size());
  Mat j = Mat::Identity(x.size(), x.size()) / r;
  j.noalias() -= (x * x.transpose()) / (d * r * r * r);
  return j;
}

Vec rmsnorm_vjp(const Vec& x, const Vec& g, double eps) {
  const double r = rms(x, eps);
  const double d = static_cast<double>(x.size());
  return g / r - x * (x.dot(g) / (d * r * r * r));
}

Simplex softmax(const Vec& z) {
  if (z.size() == 0) throw ShapeError("softmax: empty input");
  require_finite(z);
  Vec e = (z.array() - z.maxCoeff()).exp();
  e /= e.sum();
  // Renormalization can leave the sum a few ulps away from 1.
  return Simplex(std::move(e), 1e-12);
}

Vec log_softmax(const Vec& z) {
  if (z.size() == 0) throw ShapeError("log_softmax: empty input");
  require_finite(z);
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

Mat softmax_jacobian(const Simplex& alpha) {
  const Vec& a = alpha.weights();
  Mat j = -a * a.transpose();
  j.diagonal() += a;
  return j;
}

Vec softmax_vjp(const Vec& alpha, const Vec& g) {
  return alpha.cwiseProduct(g) - alpha * alpha.dot(g);
}

TopK topk_softmax(const Vec& z, int k) {
  const auto n = static_cast<int>(z.size());
  if (k < 1 || k > n) throw Error("topk_softmax: k out of range");
  require_finite(z);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return z[a] > z[b]; });
  std::vector<int> active(order.begin(), order.begin() + k);
  std::sort(active.begin(), active.end());

  Vec sub(k);
  for (int i = 0; i < k; ++i) sub[i] = z[active[static_cast<std::size_t>(i)]];
  const Simplex local = softmax(sub);
  Vec full = Vec::Zero(n);
  for (int i = 0; i < k; ++i) full[active[static_cast<std::size_t>(i)]] = local[i];
  return TopK{std::move(active), Simplex(std::move(full), 1e-12)};
}

double kl_div(const Simplex& a, const Simplex& b) {
  if (a.size() != b.size()) throw ShapeError("kl_div: dimension mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a[i] == 0.0) continue;
    if (b[i] == 0.0) throw Error("kl_div: support of a not contained in support of b");
    kl += a[i] * std::log(a[i] / b[i]);
  }
  return std::max(kl, 0.0);
}

double entropy(const Simplex& a) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a[i] > 0.0) h -= a[i] * std::log(a[i]);
  }
  return h;
}

namespace {

// Rayleigh-quotient power iteration for a symmetric PSD operator given as a
// matvec. Returns the dominant eigenvalue estimate and whether it converged.
template <class MatVec>
std::pair<double, bool> power_iterate(Eigen::Index n, MatVec&& apply, int max_iter,
                                      double tol) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Vec w = apply(v);
    const double next = v.dot(w);
    const double nw = w.norm();
    if (nw == 0.0) return {0.0, true};
    v = w / nw;
    if (std::abs(next - lambda) <= tol * std::max(1.0, std::abs(next))) {
      return {next, true};
    }
    lambda = next;
  }
  return {lambda, false};
}

}  // namespace

double spectral_norm(const Mat& a, int max_iter, double tol) {
  if (a.size() == 0) return 0.0;
  require_finite(a);
  auto [lambda, converged] = power_iterate(
      a.cols(), [&](const Vec& v) -> Vec { return a.transpose() * (a * v); },
      max_iter, tol);
  // Slow convergence happens when the top singular values nearly coincide;
  // an SVD gives the exact value in that case.
  if (!converged) {
    Eigen::JacobiSVD<Mat> svd(a);
    return svd.singularValues()[0];
  }
  return std::sqrt(std::max(lambda, 0.0));
}

double symmetric_spectral_radius(const Mat& a, int max_iter, double tol) {
  if (a.rows() != a.cols()) throw ShapeError("symmetric_spectral_radius: not square");
  // |eig|_max(A) = sqrt(eig_max(A^2)).
  auto [lambda, converged] = power_iterate(
      a.cols(), [&](const Vec& v) -> Vec { return a * (a * v); }, max_iter, tol);
  if (!converged) {
    Eigen::SelfAdjointEigenSolver<Mat> es(a);
    return es.eigenvalues().cwiseAbs().maxCoeff();
  }
  return std::sqrt(std::max(lambda, 0.0));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace qmem
