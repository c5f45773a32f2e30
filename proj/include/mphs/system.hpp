#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mphs/errors.hpp"
#include "mphs/metric.hpp"

namespace mphs {

/// A candidate accretive map M on R^dim.
///
/// `eval` must be deterministic. `derivative`, when present, returns the
/// Jacobian DM(x). When `linear_part` is set the operator is affine,
/// M(x) = L x + offset, and solvers use the matrix directly.
struct MonotoneOperator {
  Eigen::Index dim = 0;
  std::function<Vector(const Vector&)> eval;
  std::function<Matrix(const Vector&)> derivative;
  std::optional<Matrix> linear_part;
  Vector offset;  // only meaningful together with linear_part

  Vector operator()(const Vector& x) const {
    detail::require_dim(x.size(), dim, "MonotoneOperator::eval");
    return eval(x);
  }

  bool has_derivative() const { return static_cast<bool>(derivative); }
  bool is_affine() const { return linear_part.has_value(); }

  Matrix jacobian(const Vector& x) const {
    if (linear_part) return *linear_part;
    if (!derivative) throw InvalidParameter("MonotoneOperator: no derivative");
    return derivative(x);
  }

  /// M(x) = L x + offset.
  static MonotoneOperator affine(Matrix L, Vector offset = Vector()) {
    if (L.rows() != L.cols()) {
      throw DimensionMismatch("MonotoneOperator::affine: L must be square");
    }
    const Eigen::Index n = L.rows();
    if (offset.size() == 0) offset = Vector::Zero(n);
    detail::require_dim(offset.size(), n, "MonotoneOperator::affine offset");
    MonotoneOperator op;
    op.dim = n;
    op.eval = [L, offset](const Vector& x) -> Vector { return L * x + offset; };
    op.derivative = [L](const Vector&) -> Matrix { return L; };
    op.linear_part = std::move(L);
    op.offset = std::move(offset);
    return op;
  }

  static MonotoneOperator linear(Matrix L) { return affine(std::move(L)); }

  static MonotoneOperator zero(Eigen::Index n) {
    return linear(Matrix::Zero(n, n));
  }

  /// Black-box operator without structural information.
  static MonotoneOperator nonlinear(
      Eigen::Index n, std::function<Vector(const Vector&)> f,
      std::function<Matrix(const Vector&)> df = {}) {
    MonotoneOperator op;
    op.dim = n;
    op.eval = std::move(f);
    op.derivative = std::move(df);
    return op;
  }
};

/// Monotone port-Hamiltonian system  xdot = -M(x) + B u,  y = B* x.
///
/// B* is the adjoint of B with respect to (metric, input_metric). A system
/// with B of width zero is autonomous.
struct PHSystem {
  MonotoneOperator M;
  Matrix B;
  Metric metric;
  Metric input_metric;

  PHSystem() = default;
  PHSystem(MonotoneOperator op, Matrix b, Metric x_metric, Metric u_metric)
      : M(std::move(op)),
        B(std::move(b)),
        metric(std::move(x_metric)),
        input_metric(std::move(u_metric)) {
    detail::require_dim(metric.dim(), M.dim, "PHSystem metric");
    detail::require_dim(B.rows(), M.dim, "PHSystem B rows");
    detail::require_dim(input_metric.dim(), B.cols(), "PHSystem input metric");
  }

  /// Euclidean metrics on both state and input spaces.
  static PHSystem euclidean(MonotoneOperator op, Matrix b) {
    const auto n = op.dim;
    const auto m = b.cols();
    return PHSystem(std::move(op), std::move(b), Metric::euclidean(n),
                    Metric::euclidean(m));
  }

  Eigen::Index state_dim() const { return M.dim; }
  Eigen::Index input_dim() const { return B.cols(); }

  Matrix B_adjoint() const { return input_metric.adjoint_of(B, metric); }

  Vector output(const Vector& x) const { return B_adjoint() * x; }

  /// Right-hand side -M(x) + B u.
  Vector drift(const Vector& x, const Vector& u) const {
    detail::require_dim(u.size(), input_dim(), "PHSystem::drift input");
    Vector r = -M(x);
    if (input_dim() > 0) r += B * u;
    return r;
  }
};

struct SteadyStatePair {
  Vector x_bar;
  Vector u_bar;
  Vector y_bar;
  double residual = 0.0;
};

/// Sampled solution of a pH system.
struct Trajectory {
  std::vector<double> times;
  std::vector<Vector> states;
  std::vector<Vector> inputs;

  std::size_t size() const { return times.size(); }

  void push_back(double t, Vector x, Vector u) {
    if (!times.empty() && !(t > times.back())) {
      throw InvalidParameter("Trajectory: times must be strictly increasing");
    }
    times.push_back(t);
    states.push_back(std::move(x));
    inputs.push_back(std::move(u));
  }

  void validate() const {
    if (states.size() != times.size() || inputs.size() != times.size()) {
      throw DimensionMismatch("Trajectory: times/states/inputs length differ");
    }
    for (std::size_t k = 1; k < times.size(); ++k) {
      if (!(times[k] > times[k - 1])) {
        throw InvalidParameter("Trajectory: times must be strictly increasing");
      }
    }
  }
};

}  // namespace mphs
