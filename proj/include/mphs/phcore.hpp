#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mphs/errors.hpp"
#include "mphs/integrate.hpp"
#include "mphs/resolvent.hpp"
#include "mphs/system.hpp"

namespace mphs {

// ---------------------------------------------------------------------------
// Accretivity probes

/// Seeded generator of random states (standard normal entries times scale).
class PairSampler {
 public:
  PairSampler(std::uint64_t seed, double scale = 1.0)
      : rng_(seed), scale_(scale) {}

  Vector sample(Eigen::Index dim) {
    Vector v(dim);
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = scale_ * normal_(rng_);
    return v;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
  double scale_;
};

struct ProbeReport {
  double min_gap = std::numeric_limits<double>::infinity();
  double c_estimate = std::numeric_limits<double>::infinity();
  int n_pairs = 0;
  bool violation = false;
};

/// Samples <M(x1) - M(x2), x1 - x2>_metric over random pairs.
///
/// With `x_bar`, every pair is (x, x_bar) and c_estimate estimates the
/// strong-accretivity constant at x_bar. A violation is flagged when some
/// pair has gap < -tolerance * ||x1 - x2||^2, i.e. the tolerance is
/// relative to the squared pair distance.
inline ProbeReport accretivity_probe(const MonotoneOperator& M,
                                     const Metric& metric, PairSampler& sampler,
                                     int n_pairs,
                                     const std::optional<Vector>& x_bar = {},
                                     double tolerance = 1e-9) {
  if (n_pairs < 1) throw InvalidParameter("accretivity_probe: n_pairs >= 1");
  detail::require_dim(metric.dim(), M.dim, "accretivity_probe metric");
  std::optional<Vector> M_bar;
  if (x_bar) {
    detail::require_dim(x_bar->size(), M.dim, "accretivity_probe x_bar");
    M_bar = M(*x_bar);
  }
  ProbeReport rep;
  rep.n_pairs = n_pairs;
  for (int k = 0; k < n_pairs; ++k) {
    Vector x1, x2, M1, M2;
    if (x_bar) {
      x1 = *x_bar + sampler.sample(M.dim);
      x2 = *x_bar;
      M2 = *M_bar;
    } else {
      x1 = sampler.sample(M.dim);
      x2 = sampler.sample(M.dim);
      M2 = M(x2);
    }
    M1 = M(x1);
    const Vector d = x1 - x2;
    const double d2 = metric.norm_squared(d);
    if (d2 == 0.0) continue;
    const double gap = metric.inner(M1 - M2, d);
    rep.min_gap = std::min(rep.min_gap, gap);
    rep.c_estimate = std::min(rep.c_estimate, gap / d2);
    if (gap < -tolerance * d2) rep.violation = true;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Power balance and shifted passivity

namespace detail {

inline double uniform_step(const Trajectory& traj) {
  traj.validate();
  if (traj.size() < 2) {
    throw InsufficientData("audit: trajectory needs at least two samples");
  }
  const double h = traj.times[1] - traj.times[0];
  for (std::size_t k = 1; k < traj.size(); ++k) {
    const double hk = traj.times[k] - traj.times[k - 1];
    if (std::abs(hk - h) > 1e-9 * std::max(1.0, std::abs(h))) {
      throw InvalidParameter("audit: trajectory is not uniformly sampled");
    }
  }
  return h;
}

inline void check_shapes(const PHSystem& sys, const Trajectory& traj) {
  for (std::size_t k = 0; k < traj.size(); ++k) {
    require_dim(traj.states[k].size(), sys.state_dim(), "audit state");
    require_dim(traj.inputs[k].size(), sys.input_dim(), "audit input");
  }
}

}  // namespace detail

struct PowerBalanceReport {
  std::vector<double> residual;  // one per interval
  double max_abs = 0.0;
};

/// Per-interval defect of  d/dt 1/2||x||^2 = -<x, M(x)> + <u, y>_U.
///
/// The left side is the difference quotient, the right side is evaluated at
/// the averaged state and input of the interval.
inline PowerBalanceReport power_balance_audit(const PHSystem& sys,
                                              const Trajectory& traj) {
  const double h = detail::uniform_step(traj);
  detail::check_shapes(sys, traj);
  PowerBalanceReport rep;
  rep.residual.reserve(traj.size() - 1);
  for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
    const Vector& x0 = traj.states[k];
    const Vector& x1 = traj.states[k + 1];
    const Vector xm = 0.5 * (x0 + x1);
    const Vector um = 0.5 * (traj.inputs[k] + traj.inputs[k + 1]);
    const double lhs =
        0.5 * (sys.metric.norm_squared(x1) - sys.metric.norm_squared(x0)) / h;
    double rhs = -sys.metric.inner(xm, sys.M(xm));
    if (sys.input_dim() > 0) rhs += sys.input_metric.inner(um, sys.output(xm));
    const double r = lhs - rhs;
    rep.residual.push_back(r);
    rep.max_abs = std::max(rep.max_abs, std::abs(r));
  }
  return rep;
}

struct ShiftedPassivityReport {
  std::vector<double> equality_residual;
  /// max(0, d/dt 1/2||x - x_bar||^2 - <u - u_bar, y - y_bar>) per interval
  std::vector<double> inequality_violation;
  /// d/dt 1/2||x - x_bar||^2 per interval (difference quotient)
  std::vector<double> storage_rate;
  double max_equality = 0.0;
  double max_violation = 0.0;
};

inline ShiftedPassivityReport shifted_passivity_audit(const PHSystem& sys,
                                                      const Trajectory& traj,
                                                      const SteadyStatePair& ss) {
  const double h = detail::uniform_step(traj);
  detail::check_shapes(sys, traj);
  detail::require_dim(ss.x_bar.size(), sys.state_dim(), "shifted audit x_bar");
  detail::require_dim(ss.u_bar.size(), sys.input_dim(), "shifted audit u_bar");
  const Vector M_bar = sys.M(ss.x_bar);
  const Vector y_bar = sys.output(ss.x_bar);
  ShiftedPassivityReport rep;
  for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
    const Vector e0 = traj.states[k] - ss.x_bar;
    const Vector e1 = traj.states[k + 1] - ss.x_bar;
    const Vector xm = 0.5 * (traj.states[k] + traj.states[k + 1]);
    const Vector em = xm - ss.x_bar;
    const Vector um = 0.5 * (traj.inputs[k] + traj.inputs[k + 1]);
    const double lhs =
        0.5 * (sys.metric.norm_squared(e1) - sys.metric.norm_squared(e0)) / h;
    double supply = 0.0;
    if (sys.input_dim() > 0) {
      supply = sys.input_metric.inner(um - ss.u_bar, sys.output(xm) - y_bar);
    }
    const double dissipation = sys.metric.inner(em, sys.M(xm) - M_bar);
    const double eq = lhs - (-dissipation + supply);
    const double viol = std::max(0.0, lhs - supply);
    rep.equality_residual.push_back(eq);
    rep.inequality_violation.push_back(viol);
    rep.storage_rate.push_back(lhs);
    rep.max_equality = std::max(rep.max_equality, std::abs(eq));
    rep.max_violation = std::max(rep.max_violation, viol);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Steady states

/// Solves M(x_bar) = B u_bar.
///
/// Affine M: direct solve. With a derivative: damped Newton started at
/// B u_bar. Otherwise (or if Newton fails) the implicit Euler iteration
/// x <- (I + M)^{-1}(x + B u_bar) is run to stationarity.
inline SteadyStatePair steady_state(const PHSystem& sys, const Vector& u_bar,
                                    double tol = 1e-10) {
  detail::require_dim(u_bar.size(), sys.input_dim(), "steady_state u_bar");
  const Eigen::Index n = sys.state_dim();
  const Vector b = sys.input_dim() > 0 ? Vector(sys.B * u_bar) : Vector::Zero(n);
  auto residual = [&](const Vector& x) { return sys.metric.norm(sys.M(x) - b); };
  auto finish = [&](Vector x, double res) {
    SteadyStatePair ss;
    ss.y_bar = sys.output(x);
    ss.x_bar = std::move(x);
    ss.u_bar = u_bar;
    ss.residual = res;
    return ss;
  };

  if (sys.M.is_affine()) {
    const Matrix& L = *sys.M.linear_part;
    Eigen::PartialPivLU<Matrix> lu(L);
    Vector x = lu.solve(b - sys.M.offset);
    double res = residual(x);
    for (int k = 0; k < 3 && res > tol; ++k) {
      x -= lu.solve(sys.M(x) - b);
      res = residual(x);
    }
    if (!(res <= tol)) {
      throw NonConvergence("steady_state: linear solve residual " +
                           std::to_string(res) + " (M singular?)");
    }
    return finish(std::move(x), res);
  }

  if (sys.M.has_derivative()) {
    Vector x = b;
    double res = residual(x);
    for (int it = 0; it < 200 && res > tol; ++it) {
      Eigen::FullPivLU<Matrix> lu(sys.M.jacobian(x));
      if (!lu.isInvertible()) break;
      const Vector dx = lu.solve(sys.M(x) - b);
      double step = 1.0;
      Vector trial = x - dx;
      double res_trial = residual(trial);
      while (!(res_trial < res) && step > 1e-10) {
        step *= 0.5;
        trial = x - step * dx;
        res_trial = residual(trial);
      }
      if (!(res_trial < res)) break;
      x = std::move(trial);
      res = res_trial;
    }
    if (res <= tol) return finish(std::move(x), res);
  }

  // implicit Euler x <- (I + lam M)^{-1}(x + lam b); lam shrinks when the
  // derivative-free resolvent cannot be solved
  Vector x = b;
  double res = residual(x);
  for (double lam = 1.0; res > tol && lam >= 1e-4; lam *= 0.25) {
    try {
      ResolventSolver solver(sys.M, lam, sys.metric, 1e-3 * tol);
      x = b;
      res = residual(x);
      for (int it = 0; it < 100000 && res > tol; ++it) {
        x = solver.solve(x + lam * b);
        res = residual(x);
      }
    } catch (const NonConvergence&) {
      res = std::numeric_limits<double>::infinity();
    }
  }
  if (!(res <= tol)) {
    throw NonConvergence("steady_state: no steady state reached (residual " +
                         std::to_string(res) + ")");
  }
  return finish(std::move(x), res);
}

// ---------------------------------------------------------------------------
// Power-preserving interconnection

/// Input columns of B that take part in the coupling (the "first" port).
struct PortSplit {
  std::vector<Eigen::Index> coupled;
};

namespace detail {

inline Matrix select_columns(const Matrix& B,
                             const std::vector<Eigen::Index>& cols) {
  Matrix out(B.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] < 0 || cols[j] >= B.cols()) {
      throw DimensionMismatch("PortSplit: column index out of range");
    }
    out.col(static_cast<Eigen::Index>(j)) = B.col(cols[j]);
  }
  return out;
}

inline Vector select_entries(const Vector& v,
                             const std::vector<Eigen::Index>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out[j] = v[idx[j]];
  return out;
}

inline std::vector<Eigen::Index> complement(
    Eigen::Index n, const std::vector<Eigen::Index>& cols) {
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  for (auto c : cols) {
    if (c < 0 || c >= n) {
      throw DimensionMismatch("PortSplit: column index out of range");
    }
    if (used[c]) throw DimensionMismatch("PortSplit: duplicate column");
    used[c] = true;
  }
  std::vector<Eigen::Index> rest;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (!used[j]) rest.push_back(j);
  }
  return rest;
}

}  // namespace detail

/// Coupling block K added to blockdiag(M1, M2) by the interconnection
///   [u1^1; u2^1] = [[0, F], [-F*, 0]] [y1^1; y2^1].
///
/// In the convention xdot = -M(x) + B u this is
///   K = [[0, -B1^1 F (B2^1)*], [B2^1 F* (B1^1)*, 0]],
/// which is skew in the product metric.
inline Matrix coupling_operator(const PHSystem& sys1, const PHSystem& sys2,
                                const Matrix& F, const PortSplit& split1,
                                const PortSplit& split2) {
  const Matrix B1 = detail::select_columns(sys1.B, split1.coupled);
  const Matrix B2 = detail::select_columns(sys2.B, split2.coupled);
  detail::require_dim(F.rows(), B1.cols(), "interconnect: F rows");
  detail::require_dim(F.cols(), B2.cols(), "interconnect: F cols");
  const Metric U1(detail::select_entries(sys1.input_metric.weights(),
                                         split1.coupled));
  const Metric U2(detail::select_entries(sys2.input_metric.weights(),
                                         split2.coupled));
  const Matrix B1_adj = U1.adjoint_of(B1, sys1.metric);
  const Matrix B2_adj = U2.adjoint_of(B2, sys2.metric);
  const Matrix F_adj = U2.adjoint_of(F, U1);  // F : U2 -> U1

  const Eigen::Index n1 = sys1.state_dim();
  const Eigen::Index n2 = sys2.state_dim();
  Matrix K = Matrix::Zero(n1 + n2, n1 + n2);
  K.topRightCorner(n1, n2) = -B1 * F * B2_adj;
  K.bottomLeftCorner(n2, n1) = B2 * F_adj * B1_adj;
  return K;
}

/// Composes two monotone pH systems through a skew output feedback on their
/// first ports; the remaining ports stay open with B = diag(B1^2, B2^2).
inline PHSystem interconnect(const PHSystem& sys1, const PHSystem& sys2,
                             const Matrix& F, const PortSplit& split1,
                             const PortSplit& split2) {
  const Matrix K = coupling_operator(sys1, sys2, F, split1, split2);
  const Eigen::Index n1 = sys1.state_dim();
  const Eigen::Index n2 = sys2.state_dim();
  const auto rest1 = detail::complement(sys1.input_dim(), split1.coupled);
  const auto rest2 = detail::complement(sys2.input_dim(), split2.coupled);
  const Matrix B1r = detail::select_columns(sys1.B, rest1);
  const Matrix B2r = detail::select_columns(sys2.B, rest2);

  Matrix B = Matrix::Zero(n1 + n2, B1r.cols() + B2r.cols());
  B.topLeftCorner(n1, B1r.cols()) = B1r;
  B.bottomRightCorner(n2, B2r.cols()) = B2r;
  Vector uw(B.cols());
  uw << detail::select_entries(sys1.input_metric.weights(), rest1),
      detail::select_entries(sys2.input_metric.weights(), rest2);

  MonotoneOperator M;
  M.dim = n1 + n2;
  if (sys1.M.is_affine() && sys2.M.is_affine()) {
    Matrix L = K;
    L.topLeftCorner(n1, n1) += *sys1.M.linear_part;
    L.bottomRightCorner(n2, n2) += *sys2.M.linear_part;
    Vector off(n1 + n2);
    off << sys1.M.offset, sys2.M.offset;
    M = MonotoneOperator::affine(std::move(L), std::move(off));
  } else {
    const MonotoneOperator M1 = sys1.M;
    const MonotoneOperator M2 = sys2.M;
    M.eval = [M1, M2, K, n1, n2](const Vector& x) -> Vector {
      Vector r = K * x;
      r.head(n1) += M1(x.head(n1));
      r.tail(n2) += M2(x.tail(n2));
      return r;
    };
    if (M1.has_derivative() && M2.has_derivative()) {
      M.derivative = [M1, M2, K, n1, n2](const Vector& x) -> Matrix {
        Matrix J = K;
        J.topLeftCorner(n1, n1) += M1.jacobian(x.head(n1));
        J.bottomRightCorner(n2, n2) += M2.jacobian(x.tail(n2));
        return J;
      };
    }
  }
  return PHSystem(std::move(M), std::move(B),
                  Metric::product(sys1.metric, sys2.metric), Metric(uw));
}

}  // namespace mphs
