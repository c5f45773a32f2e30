#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>

#include "mphs/errors.hpp"
#include "mphs/resolvent.hpp"
#include "mphs/system.hpp"

namespace mphs {

enum class Scheme { implicit_midpoint, implicit_euler, rk4 };

inline const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::implicit_midpoint:
      return "implicit_midpoint";
    case Scheme::implicit_euler:
      return "implicit_euler";
    case Scheme::rk4:
      return "rk4";
  }
  return "?";
}

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "implicit_midpoint") return Scheme::implicit_midpoint;
  if (s == "implicit_euler") return Scheme::implicit_euler;
  if (s == "rk4") return Scheme::rk4;
  throw InvalidParameter("unknown integrator scheme '" + s + "'");
}

struct IntegratorConfig {
  Scheme scheme = Scheme::implicit_midpoint;
  double h_t = 1e-2;
  double newton_tol = 1e-12;
  long max_steps = 50'000'000;
  /// keep every k-th step in the returned Trajectory (the last step is
  /// always kept)
  long record_every = 1;
  /// rk4 only: relative per-step power-balance defect that rejects a step
  double rk4_audit_threshold = 1e-2;
};

/// Called after every step with (t_next, x_prev, x_next).
using StepObserver =
    std::function<void(double, const Vector&, const Vector&)>;

namespace detail {

inline double step_power_defect(const PHSystem& sys, const Vector& x0,
                                const Vector& x1, const Vector& u, double h) {
  const Vector xm = 0.5 * (x0 + x1);
  const double lhs =
      0.5 * (sys.metric.norm_squared(x1) - sys.metric.norm_squared(x0)) / h;
  double rhs = -sys.metric.inner(xm, sys.M(xm));
  if (sys.input_dim() > 0) rhs += sys.input_metric.inner(u, sys.output(xm));
  return std::abs(lhs - rhs);
}

}  // namespace detail

/// Integrates xdot = -M(x) + B u with constant input u on [0, T].
///
/// The step is adjusted to T / ceil(T / h_t) so that the final sample lands
/// on T. Implicit midpoint solves m + (h/2) M(m) = x_k + (h/2) B u and sets
/// x_{k+1} = 2m - x_k, i.e. one resolvent per step, which keeps the
/// quadratic energy identities exact up to the solver tolerance.
inline Trajectory integrate(const PHSystem& sys, const Vector& x0,
                            const Vector& u, const IntegratorConfig& cfg,
                            double T, const StepObserver& observer = {}) {
  if (!(T > 0.0)) throw InvalidParameter("integrate: T must be > 0");
  if (!(cfg.h_t > 0.0)) throw InvalidParameter("integrate: h_t must be > 0");
  if (cfg.record_every < 1) {
    throw InvalidParameter("integrate: record_every must be >= 1");
  }
  detail::require_dim(x0.size(), sys.state_dim(), "integrate x0");
  detail::require_dim(u.size(), sys.input_dim(), "integrate input");

  const long steps = static_cast<long>(std::ceil(T / cfg.h_t - 1e-12));
  if (steps > cfg.max_steps) {
    throw InvalidParameter("integrate: T / h_t exceeds max_steps");
  }
  const double h = T / static_cast<double>(steps);
  const Vector Bu =
      sys.input_dim() > 0 ? Vector(sys.B * u) : Vector::Zero(sys.state_dim());

  std::optional<ResolventSolver> solver;
  const double tol = cfg.newton_tol * std::max(1.0, sys.metric.norm(x0));
  if (cfg.scheme == Scheme::implicit_midpoint) {
    solver.emplace(sys.M, 0.5 * h, sys.metric, tol, /*reuse_jacobian=*/true);
  } else if (cfg.scheme == Scheme::implicit_euler) {
    solver.emplace(sys.M, h, sys.metric, tol, /*reuse_jacobian=*/true);
  }

  Trajectory traj;
  traj.push_back(0.0, x0, u);
  Vector x = x0;
  for (long k = 1; k <= steps; ++k) {
    Vector next;
    switch (cfg.scheme) {
      case Scheme::implicit_midpoint: {
        const Vector m = solver->solve(x + 0.5 * h * Bu);
        next = 2.0 * m - x;
        break;
      }
      case Scheme::implicit_euler:
        next = solver->solve(x + h * Bu);
        break;
      case Scheme::rk4: {
        auto f = [&](const Vector& y) -> Vector { return -sys.M(y) + Bu; };
        const Vector k1 = f(x);
        const Vector k2 = f(x + 0.5 * h * k1);
        const Vector k3 = f(x + 0.5 * h * k2);
        const Vector k4 = f(x + h * k3);
        next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        const double defect = detail::step_power_defect(sys, x, next, u, h);
        const double scale = 1.0 + sys.metric.norm_squared(x);
        if (!next.allFinite() || !(defect <= cfg.rk4_audit_threshold * scale)) {
          throw StepRejected("rk4: power-balance defect " +
                             std::to_string(defect) + " at step " +
                             std::to_string(k));
        }
        break;
      }
    }
    const double t = static_cast<double>(k) * h;
    if (observer) observer(t, x, next);
    x = std::move(next);
    if (k % cfg.record_every == 0 || k == steps) traj.push_back(t, x, u);
  }
  return traj;
}

}  // namespace mphs
