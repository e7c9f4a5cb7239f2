#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace eva {

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

/// N stacked D_head x D_head matrices, head-major then row-major. Index
/// [h][a][b] where a runs over the key dimension (the one decayed by w).
template <typename Real>
struct HeadStates {
  int heads = 0;
  int size = 0;
  std::vector<Real> data;

  HeadStates() = default;
  HeadStates(int n, int d) : heads(n), size(d), data(static_cast<std::size_t>(n) * d * d, Real(0)) {}

  std::size_t head_stride() const { return static_cast<std::size_t>(size) * size; }
  Real* head(int h) { return data.data() + h * head_stride(); }
  const Real* head(int h) const { return data.data() + h * head_stride(); }
  Real& at(int h, int a, int b) { return data[h * head_stride() + static_cast<std::size_t>(a) * size + b]; }
  Real at(int h, int a, int b) const { return data[h * head_stride() + static_cast<std::size_t>(a) * size + b]; }
  void clear() { std::fill(data.begin(), data.end(), Real(0)); }

  template <typename To>
  HeadStates<To> cast() const {
    HeadStates<To> out(heads, size);
    std::transform(data.begin(), data.end(), out.data.begin(), [](Real v) { return static_cast<To>(v); });
    return out;
  }
};

/// max|a - b| / max|b|: a norm-wise relative deviation that stays meaningful
/// when individual reference entries are near zero.
template <typename A, typename B>
double max_relative_deviation(const A& a, const B& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(b.size()); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    den = std::max(den, std::abs(static_cast<double>(b.data()[i])));
  }
  return den == 0.0 ? num : num / den;
}

template <typename Real>
std::span<const Real> as_span(const Matrix<Real>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace eva
