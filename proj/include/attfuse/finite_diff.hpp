#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "attfuse/tensor.hpp"

namespace attfuse {

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: (f(x + h e_i) - f(x - h e_i)) / 2h. f must be deterministic.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
inline double relative_error(double a, double b, double floor = 1e-6) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  a.require_same_shape(b, "max_relative_error");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, relative_error(a[i], b[i], floor));
  return m;
}

}  // namespace attfuse
