// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace qmem {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Base error for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kDefaultRmsEps = 1e-6;

/// A probability vector. Construction validates non-negativity and unit mass.
class Simplex {
 public:
  Simplex() = default;
  /// Throws Error when any weight is negative or the mass is off by more
  /// than `tol`.
  explicit Simplex(Vec weights, double tol = 1e-12);

  static Simplex uniform(std::size_t n);
  static Simplex vertex(std::size_t n, std::size_t at);

  const Vec& weights() const { return w_; }
  double operator[](Eigen::Index i) const { return w_[i]; }
  Eigen::Index size() const { return w_.size(); }

 private:
  Vec w_;
};

struct TopK {
  std::vector<int> active;  // ascending index order
  Simplex alpha;            // full length, zero off `active`
};

void require_finite(const Vec& x);
void require_finite(const Mat& x);

/// RMS_eps(x) = sqrt(|x|^2 / d + eps).
double rms(const Vec& x, double eps = kDefaultRmsEps);
Vec rmsnorm(const Vec& x, double eps = kDefaultRmsEps);
/// (1/r) I - x x^T / (d r^3).
Mat rmsnorm_jacobian(const Vec& x, double eps = kDefaultRmsEps);
/// J^T g for the RMSNorm map without materializing J (J is symmetric).
Vec rmsnorm_vjp(const Vec& x, const Vec& g, double eps = kDefaultRmsEps);

Simplex softmax(const Vec& z);
/// Max-subtracted log-softmax.
Vec log_softmax(const Vec& z);
/// diag(a) - a a^T.
Mat softmax_jacobian(const Simplex& alpha);
/// J^T g for softmax evaluated at `alpha`.
Vec softmax_vjp(const Vec& alpha, const Vec& g);

/// Indices of the k largest entries (ties: lowest index first), softmax
/// restricted to them.
TopK topk_softmax(const Vec& z, int k);

/// KL(a || b). Throws when supp(a) is not contained in supp(b).
double kl_div(const Simplex& a, const Simplex& b);
double entropy(const Simplex& a);

/// Largest singular value via power iteration on A^T A.
double spectral_norm(const Mat& a, int max_iter = 200, double tol = 1e-10);
/// Largest |eigenvalue| of a symmetric matrix via power iteration.
double symmetric_spectral_radius(const Mat& a, int max_iter = 200,
                                 double tol = 1e-10);

double sigmoid(double x);

}  // namespace qmem
