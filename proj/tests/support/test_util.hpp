#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "gsgcn/tensor.hpp"

namespace gsgcn::testutil {

inline bool approx(real a, real b, double tol = 1e-5) {
  return std::abs(static_cast<double>(a) - static_cast<double>(b)) <=
         tol * std::max({1.0, std::abs(static_cast<double>(a)), std::abs(static_cast<double>(b))});
}

inline bool approx_tensor(const Tensor& a, const Tensor& b, double tol = 1e-5) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (!approx(a[i], b[i], tol)) return false;
  }
  return true;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

inline Tensor random_tensor(Shape shape, std::mt19937& rng, real lo = real(-1), real hi = real(1)) {
  return Tensor::uniform(std::move(shape), lo, hi, rng);
}

// Random tensor with entries bounded away from zero, for relu-adjacent tests.
inline Tensor random_tensor_away_from(Shape shape, std::mt19937& rng, real margin = real(0.05)) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (auto& v : t.vec()) {
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return t;
}

// Random point on the probability simplex.
inline std::vector<double> random_simplex(int n, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> p(static_cast<size_t>(n));
  double total = 0;
  for (auto& v : p) {
    v = u(rng);
    total += v;
  }
  for (auto& v : p) v /= total;
  return p;
}

}  // namespace gsgcn::testutil
