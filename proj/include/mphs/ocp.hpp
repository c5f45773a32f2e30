#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "mphs/errors.hpp"
#include "mphs/metric.hpp"

namespace mphs::ocp {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Uniform grid on the virtual time interval [0, t_f] with trapezoidal
/// weights for node-collocated quantities.
struct Grid {
  double t_f = 0.0;
  int N = 0;
  double h = 0.0;
  Vector nodes;
  Vector weights;
};

inline Grid build_grid(double t_f, int N) {
  if (!(t_f > 0.0) || !std::isfinite(t_f)) {
    throw InvalidParameter("build_grid: t_f must be > 0");
  }
  if (N < 2) throw InvalidParameter("build_grid: N must be >= 2");
  Grid g;
  g.t_f = t_f;
  g.N = N;
  g.h = t_f / N;
  g.nodes.resize(N + 1);
  g.weights = Vector::Constant(N + 1, g.h);
  for (int i = 0; i <= N; ++i) g.nodes[i] = i * g.h;
  g.nodes[N] = t_f;
  g.weights[0] = g.weights[N] = 0.5 * g.h;
  return g;
}

/// xdot = A x + B u + f on the grid, x(0) = x0. `f` holds one column per node.
struct LinearPlantModel {
  Matrix A;
  Matrix B;
  Matrix f;
  Vector x0;

  Eigen::Index n() const { return A.rows(); }
  Eigen::Index m() const { return B.cols(); }

  void validate(const Grid& grid) const {
    if (A.rows() != A.cols()) throw DimensionMismatch("model: A must be square");
    detail::require_dim(B.rows(), n(), "model: B rows");
    detail::require_dim(x0.size(), n(), "model: x0");
    detail::require_dim(f.rows(), n(), "model: f rows");
    detail::require_dim(f.cols(), grid.N + 1, "model: f samples");
  }
};

// ---------------------------------------------------------------------------
// Stage costs

/// l(x) = 1/2 (x - q)^T Q (x - q)
struct QuadraticStage {
  Matrix Q;
  Vector q;
};

/// l(x) = sum_j s^2 log cosh(x_j / s)
struct LogCoshStage {
  double scale = 1.0;
};

struct CostSpec {
  double alpha = 1.0;
  std::variant<QuadraticStage, LogCoshStage> stage;

  bool is_quadratic() const {
    return std::holds_alternative<QuadraticStage>(stage);
  }

  void validate(Eigen::Index n) const {
    if (!(alpha > 0.0)) throw InvalidParameter("cost: alpha must be > 0");
    if (const auto* qs = std::get_if<QuadraticStage>(&stage)) {
      detail::require_dim(qs->Q.rows(), n, "cost: Q rows");
      detail::require_dim(qs->Q.cols(), n, "cost: Q cols");
      detail::require_dim(qs->q.size(), n, "cost: q");
      if (!qs->Q.isApprox(qs->Q.transpose(), 1e-12)) {
        throw InvalidParameter("cost: Q must be symmetric");
      }
      Eigen::SelfAdjointEigenSolver<Matrix> es(qs->Q);
      if (es.eigenvalues().minCoeff() < -1e-12 * (1.0 + qs->Q.norm())) {
        throw InvalidParameter("cost: Q must be positive semidefinite");
      }
    } else if (!(std::get<LogCoshStage>(stage).scale > 0.0)) {
      throw InvalidParameter("cost: logcosh scale must be > 0");
    }
  }

  double stage_value(const Vector& x) const {
    if (const auto* qs = std::get_if<QuadraticStage>(&stage)) {
      const Vector d = x - qs->q;
      return 0.5 * d.dot(qs->Q * d);
    }
    const double s = std::get<LogCoshStage>(stage).scale;
    double v = 0.0;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      // log cosh(a) = |a| + log1p(exp(-2|a|)) - log 2, stable for large |a|
      const double a = std::abs(x[j] / s);
      v += s * s * (a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0));
    }
    return v;
  }

  Vector stage_gradient(const Vector& x) const {
    if (const auto* qs = std::get_if<QuadraticStage>(&stage)) {
      return qs->Q * (x - qs->q);
    }
    const double s = std::get<LogCoshStage>(stage).scale;
    return (x.array() / s).tanh() * s;
  }

  Matrix stage_hessian(const Vector& x) const {
    if (const auto* qs = std::get_if<QuadraticStage>(&stage)) return qs->Q;
    const double s = std::get<LogCoshStage>(stage).scale;
    const Eigen::ArrayXd c = (x.array() / s).cosh();
    return (1.0 / (c * c)).matrix().asDiagonal();
  }
};

// ---------------------------------------------------------------------------
// Stacked vector layout

/// Index layout of the stacked vectors.
///
/// Primal z = (x_0..x_N, u_0..u_N), node-major. Dual w = (lambda_1..lambda_N,
/// lambda0), where lambda_k is the multiplier of interval k, i.e. of the
/// dynamics residual on [tau_{k-1}, tau_k]. The full optimizer state is
/// (z, w).
struct Layout {
  Eigen::Index n = 0;
  Eigen::Index m = 0;
  int N = 0;

  Eigen::Index nx() const { return (N + 1) * n; }
  Eigen::Index nu() const { return (N + 1) * m; }
  Eigen::Index nlambda() const { return static_cast<Eigen::Index>(N) * n; }
  Eigen::Index primal() const { return nx() + nu(); }
  Eigen::Index dual() const { return nlambda() + n; }
  Eigen::Index total() const { return primal() + dual(); }

  Eigen::Index x_offset(int node) const { return node * n; }
  Eigen::Index u_offset(int node) const { return nx() + node * m; }
  /// interval k in 1..N, offset within the dual vector
  Eigen::Index lambda_offset(int k) const { return (k - 1) * n; }
  Eigen::Index lambda0_offset() const { return nlambda(); }
};

/// Samples of (x, u) on the grid; column i is node i.
struct TrajectoryVector {
  Matrix x;
  Matrix u;

  Vector stack() const {
    Vector z(x.size() + u.size());
    z << Eigen::Map<const Vector>(x.data(), x.size()),
        Eigen::Map<const Vector>(u.data(), u.size());
    return z;
  }

  static TrajectoryVector unstack(const Vector& z, const Layout& L) {
    detail::require_dim(z.size(), L.primal(), "TrajectoryVector::unstack");
    TrajectoryVector t;
    t.x = Eigen::Map<const Matrix>(z.data(), L.n, L.N + 1);
    t.u = Eigen::Map<const Matrix>(z.data() + L.nx(), L.m, L.N + 1);
    return t;
  }
};

/// Multipliers: column k-1 of `lambda` belongs to interval k.
struct AdjointVector {
  Matrix lambda;
  Vector lambda0;

  Vector stack() const {
    Vector w(lambda.size() + lambda0.size());
    w << Eigen::Map<const Vector>(lambda.data(), lambda.size()), lambda0;
    return w;
  }

  static AdjointVector unstack(const Vector& w, const Layout& L) {
    detail::require_dim(w.size(), L.dual(), "AdjointVector::unstack");
    AdjointVector a;
    a.lambda = Eigen::Map<const Matrix>(w.data(), L.n, L.N);
    a.lambda0 = w.tail(L.n);
    return a;
  }
};

/// Stacked (x, u, lambda, lambda0) state of the optimizer dynamics.
struct OptimizerState {
  TrajectoryVector primal;
  AdjointVector dual;

  Vector stack() const {
    const Vector z = primal.stack();
    const Vector w = dual.stack();
    Vector s(z.size() + w.size());
    s << z, w;
    return s;
  }

  static OptimizerState unstack(const Vector& s, const Layout& L) {
    detail::require_dim(s.size(), L.total(), "OptimizerState::unstack");
    return {TrajectoryVector::unstack(s.head(L.primal()), L),
            AdjointVector::unstack(s.tail(L.dual()), L)};
  }
};

// ---------------------------------------------------------------------------
// Discretized problem

struct ConstraintSystem {
  SparseMatrix C;  // primal -> dual-space residuals
  Vector rhs;      // (interval-averaged f, x0)
};

/// Trapezoidal stencil: row block k (k = 1..N) is
///   (x_k - x_{k-1})/h - A (x_k + x_{k-1})/2 - B (u_k + u_{k-1})/2,
/// the last row block extracts x_0.
inline ConstraintSystem assemble_constraint(const LinearPlantModel& model,
                                            const Grid& grid) {
  model.validate(grid);
  const Layout L{model.n(), model.m(), grid.N};
  const double h = grid.h;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(grid.N) *
                   (2 * L.n * L.n + 2 * L.n * L.m) +
               L.n);
  for (int k = 1; k <= grid.N; ++k) {
    const Eigen::Index row = L.lambda_offset(k);
    for (Eigen::Index r = 0; r < L.n; ++r) {
      for (Eigen::Index c = 0; c < L.n; ++c) {
        const double id = (r == c) ? 1.0 / h : 0.0;
        const double a = 0.5 * model.A(r, c);
        trip.emplace_back(row + r, L.x_offset(k) + c, id - a);
        trip.emplace_back(row + r, L.x_offset(k - 1) + c, -id - a);
      }
      for (Eigen::Index c = 0; c < L.m; ++c) {
        const double b = 0.5 * model.B(r, c);
        if (b == 0.0) continue;
        trip.emplace_back(row + r, L.u_offset(k) + c, -b);
        trip.emplace_back(row + r, L.u_offset(k - 1) + c, -b);
      }
    }
  }
  for (Eigen::Index r = 0; r < L.n; ++r) {
    trip.emplace_back(L.lambda0_offset() + r, L.x_offset(0) + r, 1.0);
  }
  ConstraintSystem cs;
  cs.C.resize(L.dual(), L.primal());
  cs.C.setFromTriplets(trip.begin(), trip.end());
  cs.C.prune(0.0);
  cs.rhs.resize(L.dual());
  for (int k = 1; k <= grid.N; ++k) {
    cs.rhs.segment(L.lambda_offset(k), L.n) =
        0.5 * (model.f.col(k) + model.f.col(k - 1));
  }
  cs.rhs.tail(L.n) = model.x0;
  return cs;
}

/// Primal metric: trapezoidal weights per node for x and u.
inline Metric primal_metric(const Grid& grid, Eigen::Index n, Eigen::Index m) {
  const Layout L{n, m, grid.N};
  Vector w(L.primal());
  for (int i = 0; i <= grid.N; ++i) {
    w.segment(L.x_offset(i), n).setConstant(grid.weights[i]);
    w.segment(L.u_offset(i), m).setConstant(grid.weights[i]);
  }
  return Metric(std::move(w));
}

/// Dual metric: midpoint weight h per interval multiplier, Euclidean lambda0.
inline Metric dual_metric(const Grid& grid, Eigen::Index n) {
  Vector w(static_cast<Eigen::Index>(grid.N) * n + n);
  w.head(static_cast<Eigen::Index>(grid.N) * n).setConstant(grid.h);
  w.tail(n).setOnes();
  return Metric(std::move(w));
}

struct DiscretizedOCP {
  Grid grid;
  LinearPlantModel model;
  CostSpec cost;
  Layout layout;
  SparseMatrix C;
  SparseMatrix C_adjoint;  // W_primal^{-1} C^T W_dual
  Vector rhs;
  Metric primal;
  Metric dual;

  Metric state_metric() const { return Metric::product(primal, dual); }
};

inline DiscretizedOCP discretize(LinearPlantModel model, const Grid& grid,
                                 CostSpec cost) {
  model.validate(grid);
  cost.validate(model.n());
  DiscretizedOCP ocp;
  ocp.grid = grid;
  ocp.layout = Layout{model.n(), model.m(), grid.N};
  auto cs = assemble_constraint(model, grid);
  ocp.C = std::move(cs.C);
  ocp.rhs = std::move(cs.rhs);
  ocp.primal = primal_metric(grid, model.n(), model.m());
  ocp.dual = dual_metric(grid, model.n());
  const Vector wp_inv = ocp.primal.weights().cwiseInverse();
  ocp.C_adjoint = wp_inv.asDiagonal() * SparseMatrix(ocp.C.transpose()) *
                  ocp.dual.weights().asDiagonal();
  ocp.model = std::move(model);
  ocp.cost = std::move(cost);
  return ocp;
}

inline Vector constraint_apply(const DiscretizedOCP& ocp, const Vector& z) {
  detail::require_dim(z.size(), ocp.layout.primal(), "constraint_apply");
  return ocp.C * z;
}

/// Metric adjoint C* = W_primal^{-1} C^T W_dual applied to (lambda, lambda0).
inline Vector adjoint_apply(const DiscretizedOCP& ocp, const Vector& w) {
  detail::require_dim(w.size(), ocp.layout.dual(), "adjoint_apply");
  return ocp.C_adjoint * w;
}

inline Vector adjoint_apply(const DiscretizedOCP& ocp,
                            const AdjointVector& lam) {
  return adjoint_apply(ocp, lam.stack());
}

/// Node values of the interval multipliers: the mean of the two adjacent
/// intervals inside, the single adjacent interval at either end. With these,
/// the u-part of C* w is exactly -B^T lambda_node at every node.
inline Matrix nodal_multiplier(const Layout& L, const AdjointVector& lam) {
  detail::require_dim(lam.lambda.cols(), L.N, "nodal_multiplier");
  Matrix out(L.n, L.N + 1);
  out.col(0) = lam.lambda.col(0);
  out.col(L.N) = lam.lambda.col(L.N - 1);
  for (int i = 1; i < L.N; ++i) {
    out.col(i) = 0.5 * (lam.lambda.col(i - 1) + lam.lambda.col(i));
  }
  return out;
}

/// Solves the trapezoidal recursion so that C (x, u) = rhs exactly.
inline Matrix input_to_state(const LinearPlantModel& model, const Matrix& u,
                             const Grid& grid) {
  model.validate(grid);
  detail::require_dim(u.rows(), model.m(), "input_to_state: u rows");
  detail::require_dim(u.cols(), grid.N + 1, "input_to_state: u samples");
  const Eigen::Index n = model.n();
  const double h = grid.h;
  const Matrix I = Matrix::Identity(n, n);
  Eigen::FullPivLU<Matrix> lu(I - 0.5 * h * model.A);
  if (!lu.isInvertible() || lu.rcond() < 1e-14) {
    throw SingularStep(
        "input_to_state: I - (h/2)A is singular; refine the grid");
  }
  const Matrix P = I + 0.5 * h * model.A;
  Matrix x(n, grid.N + 1);
  x.col(0) = model.x0;
  for (int k = 1; k <= grid.N; ++k) {
    const Vector rhs = P * x.col(k - 1) +
                       0.5 * h * model.B * (u.col(k) + u.col(k - 1)) +
                       0.5 * h * (model.f.col(k) + model.f.col(k - 1));
    x.col(k) = lu.solve(rhs);
  }
  return x;
}

struct CostValue {
  double J = 0.0;
  Vector gradient;  // metric gradient, stacked primal
};

/// J = sum_i w_i (l(x_i) + alpha/2 |u_i|^2). In the trapezoidal metric the
/// gradient is nodewise (grad l(x_i), alpha u_i).
inline CostValue cost_and_gradient(const CostSpec& cost, const Grid& grid,
                                   const TrajectoryVector& z) {
  detail::require_dim(z.x.cols(), grid.N + 1, "cost: x samples");
  detail::require_dim(z.u.cols(), grid.N + 1, "cost: u samples");
  const Layout L{z.x.rows(), z.u.rows(), grid.N};
  CostValue out;
  out.gradient.resize(L.primal());
  for (int i = 0; i <= grid.N; ++i) {
    const Vector xi = z.x.col(i);
    const Vector ui = z.u.col(i);
    out.J += grid.weights[i] *
             (cost.stage_value(xi) + 0.5 * cost.alpha * ui.squaredNorm());
    out.gradient.segment(L.x_offset(i), L.n) = cost.stage_gradient(xi);
    out.gradient.segment(L.u_offset(i), L.m) = cost.alpha * ui;
  }
  return out;
}

inline Vector cost_gradient(const DiscretizedOCP& ocp, const Vector& z) {
  return cost_and_gradient(ocp.cost, ocp.grid,
                           TrajectoryVector::unstack(z, ocp.layout))
      .gradient;
}

/// J_u(u) = J(input_to_state(u), u)
inline double reduced_cost(const DiscretizedOCP& ocp, const Matrix& u) {
  TrajectoryVector z{input_to_state(ocp.model, u, ocp.grid), u};
  return cost_and_gradient(ocp.cost, ocp.grid, z).J;
}

// ---------------------------------------------------------------------------
// Optimality system

/// M_opt(z, w) = (grad J(z) - C* w, C z).
inline Vector kkt_operator(const DiscretizedOCP& ocp, const Vector& s) {
  const Layout& L = ocp.layout;
  detail::require_dim(s.size(), L.total(), "kkt_operator");
  const Vector z = s.head(L.primal());
  const Vector w = s.tail(L.dual());
  Vector out(L.total());
  out.head(L.primal()) = cost_gradient(ocp, z) - ocp.C_adjoint * w;
  out.tail(L.dual()) = ocp.C * z;
  return out;
}

/// Right-hand side (0, 0, f, x0) of the optimality system.
inline Vector kkt_rhs(const DiscretizedOCP& ocp) {
  Vector r = Vector::Zero(ocp.layout.total());
  r.tail(ocp.layout.dual()) = ocp.rhs;
  return r;
}

/// Sparse Jacobian [[H(z), -C*], [C, 0]] of M_opt; H is the nodewise
/// Hessian of J.
inline SparseMatrix kkt_jacobian(const DiscretizedOCP& ocp, const Vector& s) {
  const Layout& L = ocp.layout;
  detail::require_dim(s.size(), L.total(), "kkt_jacobian");
  std::vector<Eigen::Triplet<double>> trip;
  for (int i = 0; i <= L.N; ++i) {
    const Matrix Hx = ocp.cost.stage_hessian(s.segment(L.x_offset(i), L.n));
    for (Eigen::Index r = 0; r < L.n; ++r) {
      for (Eigen::Index c = 0; c < L.n; ++c) {
        if (Hx(r, c) != 0.0) {
          trip.emplace_back(L.x_offset(i) + r, L.x_offset(i) + c, Hx(r, c));
        }
      }
    }
    for (Eigen::Index r = 0; r < L.m; ++r) {
      trip.emplace_back(L.u_offset(i) + r, L.u_offset(i) + r, ocp.cost.alpha);
    }
  }
  for (int k = 0; k < ocp.C_adjoint.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(ocp.C_adjoint, k); it; ++it) {
      trip.emplace_back(it.row(), L.primal() + it.col(), -it.value());
    }
  }
  for (int k = 0; k < ocp.C.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(ocp.C, k); it; ++it) {
      trip.emplace_back(L.primal() + it.row(), it.col(), it.value());
    }
  }
  SparseMatrix J(L.total(), L.total());
  J.setFromTriplets(trip.begin(), trip.end());
  return J;
}

struct KKTResidual {
  Vector residual;
  double norm = 0.0;  // in the product metric
};

inline KKTResidual kkt_residual(const DiscretizedOCP& ocp, const Vector& s) {
  KKTResidual r;
  r.residual = kkt_operator(ocp, s) - kkt_rhs(ocp);
  r.norm = ocp.state_metric().norm(r.residual);
  return r;
}

inline KKTResidual kkt_residual(const DiscretizedOCP& ocp,
                                const OptimizerState& s) {
  return kkt_residual(ocp, s.stack());
}

/// (free response from x0, u = 0, lambda = 0, lambda0 = 0); the exact KKT
/// point when the stage cost vanishes.
inline Vector default_initial_state(const DiscretizedOCP& ocp) {
  const Layout& L = ocp.layout;
  const Matrix u0 = Matrix::Zero(L.m, L.N + 1);
  OptimizerState s{{input_to_state(ocp.model, u0, ocp.grid), u0},
                   {Matrix::Zero(L.n, L.N), Vector::Zero(L.n)}};
  return s.stack();
}

/// Direct solve of M_opt(s) = (0, 0, f, x0).
///
/// Quadratic stage costs give one sparse LU solve. Otherwise Newton with a
/// backtracking line search on the residual norm, started at
/// default_initial_state.
inline Vector kkt_solve(const DiscretizedOCP& ocp, double tol = 1e-8,
                        int max_iterations = 100) {
  const Vector b = kkt_rhs(ocp);
  const Metric metric = ocp.state_metric();
  Vector s = default_initial_state(ocp);
  Vector r = kkt_operator(ocp, s) - b;
  double res = metric.norm(r);
  Eigen::SparseLU<SparseMatrix> lu;
  bool analyzed = false;
  for (int it = 0; it < max_iterations; ++it) {
    // quadratic costs: one step is exact, the rest is refinement
    if (res <= 1e-3 * tol) break;
    const SparseMatrix J = kkt_jacobian(ocp, s);
    if (!analyzed) {
      lu.analyzePattern(J);
      analyzed = true;
    }
    lu.factorize(J);
    if (lu.info() != Eigen::Success) {
      throw NonConvergence("kkt_solve: KKT matrix factorization failed");
    }
    const Vector ds = lu.solve(r);
    double step = 1.0;
    Vector trial = s - ds;
    Vector r_trial = kkt_operator(ocp, trial) - b;
    double res_trial = metric.norm(r_trial);
    while (!(res_trial < res) && step > 1e-12) {
      step *= 0.5;
      trial = s - step * ds;
      r_trial = kkt_operator(ocp, trial) - b;
      res_trial = metric.norm(r_trial);
    }
    if (!(res_trial < res)) break;
    s = std::move(trial);
    r = std::move(r_trial);
    res = res_trial;
  }
  if (!(res <= tol)) {
    throw NonConvergence("kkt_solve: residual " + std::to_string(res) +
                         " above tolerance (non-convex or ill-scaled cost?)");
  }
  return s;
}

}  // namespace mphs::ocp
