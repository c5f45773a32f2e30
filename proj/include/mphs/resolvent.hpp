#pragma once

#include <cmath>
#include <string>

#include "mphs/errors.hpp"
#include "mphs/system.hpp"

namespace mphs {

/// Solves x + lambda M(x) = z repeatedly for a fixed lambda.
///
/// Affine operators are factored once. Operators with a derivative use
/// Newton's method; with `reuse_jacobian` the factorization is kept across
/// calls and only refreshed when the iteration stops contracting (chord
/// method), which is what time stepping wants. Operators without a
/// derivative fall back to the damped fixed point x <- (x + z - lambda M(x))/2.
class ResolventSolver {
 public:
  static constexpr int kMaxNewtonIterations = 100;
  static constexpr int kMaxFixedPointIterations = 10000;
  static constexpr double kDamping = 0.5;

  ResolventSolver(const MonotoneOperator& M, double lambda, Metric metric,
                  double tol, bool reuse_jacobian = false)
      : M_(M),
        lambda_(lambda),
        metric_(std::move(metric)),
        tol_(tol),
        reuse_(reuse_jacobian) {
    if (!(lambda > 0.0)) throw InvalidParameter("resolvent: lambda must be > 0");
    if (!(tol > 0.0)) throw InvalidParameter("resolvent: tol must be > 0");
    detail::require_dim(metric_.dim(), M.dim, "resolvent metric");
    if (M_.is_affine()) {
      lu_.compute(Matrix::Identity(M.dim, M.dim) + lambda_ * *M_.linear_part);
      factored_ = true;
    }
  }

  double lambda() const { return lambda_; }

  Vector solve(const Vector& z) {
    detail::require_dim(z.size(), M_.dim, "resolvent argument");
    if (M_.is_affine()) return solve_affine(z);
    if (M_.has_derivative()) return solve_newton(z);
    return solve_fixed_point(z);
  }

  double residual(const Vector& x, const Vector& z) const {
    return metric_.norm(x + lambda_ * M_(x) - z);
  }

 private:
  Vector solve_affine(const Vector& z) {
    const Vector rhs = z - lambda_ * M_.offset;
    Vector x = lu_.solve(rhs);
    // one step of iterative refinement covers ill-conditioned stages
    double res = residual(x, z);
    if (res > tol_) {
      x -= lu_.solve(x + lambda_ * M_(x) - z);
      res = residual(x, z);
    }
    if (!(res <= tol_)) {
      throw NonConvergence("resolvent: affine solve residual " +
                           std::to_string(res) + " exceeds tol");
    }
    return x;
  }

  void refactor(const Vector& x) {
    lu_.compute(Matrix::Identity(M_.dim, M_.dim) + lambda_ * M_.jacobian(x));
    factored_ = true;
  }

  Vector solve_newton(const Vector& z) {
    Vector x = z;
    Vector r = x + lambda_ * M_(x) - z;
    double res = metric_.norm(r);
    if (!reuse_ || !factored_) refactor(x);
    for (int it = 0; it < kMaxNewtonIterations; ++it) {
      if (res <= tol_) return x;
      Vector dx = lu_.solve(r);
      // backtracking on the residual norm
      double step = 1.0;
      Vector x_new;
      Vector r_new;
      double res_new = res;
      for (int ls = 0; ls < 30; ++ls) {
        x_new = x - step * dx;
        r_new = x_new + lambda_ * M_(x_new) - z;
        res_new = metric_.norm(r_new);
        if (std::isfinite(res_new) && res_new < res) break;
        step *= 0.5;
      }
      if (!(res_new < res)) break;  // stagnated at round-off
      const bool slow = !(res_new <= 0.5 * res);
      x = std::move(x_new);
      r = std::move(r_new);
      res = res_new;
      if (!reuse_ || slow) refactor(x);
    }
    if (res <= tol_) return x;
    throw NonConvergence("resolvent: Newton did not reach tol (residual " +
                         std::to_string(res) + ")");
  }

  Vector solve_fixed_point(const Vector& z) {
    Vector x = z;
    for (int it = 0; it < kMaxFixedPointIterations; ++it) {
      const Vector Mx = M_(x);
      if (metric_.norm(x + lambda_ * Mx - z) <= tol_) return x;
      x = (1.0 - kDamping) * x + kDamping * (z - lambda_ * Mx);
    }
    if (residual(x, z) <= tol_) return x;
    throw NonConvergence(
        "resolvent: damped fixed point exceeded iteration limit; M may not be "
        "m-accretive or tol is too tight");
  }

  MonotoneOperator M_;
  double lambda_;
  Metric metric_;
  double tol_;
  bool reuse_;
  bool factored_ = false;
  Eigen::PartialPivLU<Matrix> lu_;
};

/// (I + lambda M)^{-1} z, to ||x + lambda M(x) - z||_metric <= tol.
inline Vector resolvent(const MonotoneOperator& M, double lambda,
                        const Vector& z, const Metric& metric, double tol) {
  ResolventSolver solver(M, lambda, metric, tol);
  return solver.solve(z);
}

inline Vector resolvent(const MonotoneOperator& M, double lambda,
                        const Vector& z, double tol = 1e-12) {
  return resolvent(M, lambda, z, Metric::euclidean(M.dim), tol);
}

/// Exponential formula (I + (t/n) M)^{-n} x0 by n chained resolvents.
inline Vector semigroup_approx(const MonotoneOperator& M, double t, int n,
                               const Vector& x0) {
  if (!(t >= 0.0)) throw InvalidParameter("semigroup_approx: t must be >= 0");
  if (n < 1) throw InvalidParameter("semigroup_approx: n must be >= 1");
  detail::require_dim(x0.size(), M.dim, "semigroup_approx x0");
  if (t == 0.0) return x0;
  const double tol = 1e-13 * std::max(1.0, x0.norm());
  ResolventSolver solver(M, t / n, Metric::euclidean(M.dim), tol);
  Vector x = x0;
  for (int k = 0; k < n; ++k) x = solver.solve(x);
  return x;
}

}  // namespace mphs
