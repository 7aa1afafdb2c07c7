// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "qmem/numerics.hpp"

namespace qmem {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a over a byte string. Stable across platforms, unlike std::hash.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based seed splitter: every stochastic choice asks for a stream by
/// name, so adding a new consumer never shifts the draws of another.
class SeedTree {
 public:
  explicit SeedTree(std::uint64_t master) : master_(master) {}

  std::uint64_t master() const { return master_; }
  std::uint64_t seed(std::string_view stream, std::uint64_t index = 0) const {
    return mix64(mix64(master_ ^ fnv1a(stream)) + index);
  }
  std::mt19937_64 engine(std::string_view stream, std::uint64_t index = 0) const {
    return std::mt19937_64(seed(stream, index));
  }
  SeedTree child(std::string_view stream, std::uint64_t index = 0) const {
    return SeedTree(seed(stream, index));
  }

 private:
  std::uint64_t master_;
};

/// Standard normal draws via Box-Muller on top of the raw 64-bit engine, so
/// sequences do not depend on the standard library's distribution code.
class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : eng_(seed) {}
  double operator()();
  double uniform();  // [0, 1)
  std::uint64_t bits() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Mat gaussian_matrix(Gaussian& g, Eigen::Index rows, Eigen::Index cols, double scale);
Vec gaussian_vector(Gaussian& g, Eigen::Index n, double scale);

}  // namespace qmem
