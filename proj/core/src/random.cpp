// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/random.hpp"

#include <cmath>
#include <numbers>

namespace qmem {

double Gaussian::uniform() {
  // 53 random mantissa bits.
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Gaussian::operator()() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double rad = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * std::numbers::pi * u2;
  spare_ = rad * std::sin(th);
  has_spare_ = true;
  return rad * std::cos(th);
}

Mat gaussian_matrix(Gaussian& g, Eigen::Index rows, Eigen::Index cols, double scale) {
  Mat m(rows, cols);
  // Row-major fill order so serialized payloads read in draw order.
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * g();
  return m;
}

Vec gaussian_vector(Gaussian& g, Eigen::Index n, double scale) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * g();
  return v;
}

}  // namespace qmem
