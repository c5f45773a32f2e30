#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "mphs/errors.hpp"

namespace mphs {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Weighted Euclidean inner product <a,b> = sum_i w_i a_i b_i.
///
/// All adjoints in the library are taken with respect to a Metric, so the
/// skew-symmetry of interconnections holds exactly in the discrete
/// quadrature inner products rather than only for raw transposes.
class Metric {
 public:
  Metric() = default;

  explicit Metric(Vector weights) : weights_(std::move(weights)) {
    for (Eigen::Index i = 0; i < weights_.size(); ++i) {
      if (!(weights_[i] > 0.0) || !std::isfinite(weights_[i])) {
        throw InvalidParameter("Metric: weight " + std::to_string(i) +
                               " must be finite and strictly positive");
      }
    }
  }

  static Metric euclidean(Eigen::Index dim) {
    return Metric(Vector::Ones(dim));
  }

  /// Block-diagonal product metric on a ⊕ b.
  static Metric product(const Metric& a, const Metric& b) {
    Vector w(a.dim() + b.dim());
    w << a.weights_, b.weights_;
    return Metric(std::move(w));
  }

  Eigen::Index dim() const { return weights_.size(); }
  const Vector& weights() const { return weights_; }

  double inner(const Vector& a, const Vector& b) const {
    detail::require_dim(a.size(), dim(), "Metric::inner (lhs)");
    detail::require_dim(b.size(), dim(), "Metric::inner (rhs)");
    return (weights_.array() * a.array() * b.array()).sum();
  }

  double norm_squared(const Vector& a) const { return inner(a, a); }
  double norm(const Vector& a) const { return std::sqrt(norm_squared(a)); }

  /// Adjoint of L : (this, W) -> (target, V), namely W^{-1} L^T V.
  Matrix adjoint_of(const Matrix& L, const Metric& target) const {
    detail::require_dim(L.cols(), dim(), "Metric::adjoint_of (cols)");
    detail::require_dim(L.rows(), target.dim(), "Metric::adjoint_of (rows)");
    return weights_.cwiseInverse().asDiagonal() * L.transpose() *
           target.weights().asDiagonal();
  }

  Metric segment(Eigen::Index start, Eigen::Index len) const {
    return Metric(weights_.segment(start, len));
  }

 private:
  Vector weights_;
};

}  // namespace mphs
