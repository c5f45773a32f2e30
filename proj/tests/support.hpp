#pragma once

#include <Eigen/IterativeLinearSolvers>
#include <functional>

#include "mphs/ocp.hpp"

namespace testing_support {

using mphs::Matrix;
using mphs::Vector;

/// xdot = [[0,1],[0,0]] x + [0;1] u, x0 = (1,0), f = 0.
inline mphs::ocp::LinearPlantModel double_integrator(int N,
                                                     Vector x0 = Vector{{1.0, 0.0}}) {
  mphs::ocp::LinearPlantModel m;
  m.A = Matrix{{0.0, 1.0}, {0.0, 0.0}};
  m.B = Matrix{{0.0}, {1.0}};
  m.f = Matrix::Zero(2, N + 1);
  m.x0 = std::move(x0);
  return m;
}

inline mphs::ocp::CostSpec quadratic_cost(const Matrix& Q, double alpha,
                                          Vector q = Vector()) {
  mphs::ocp::CostSpec c;
  c.alpha = alpha;
  if (q.size() == 0) q = Vector::Zero(Q.rows());
  c.stage = mphs::ocp::QuadraticStage{Q, q};
  return c;
}

inline mphs::ocp::DiscretizedOCP double_integrator_problem(int N, double t_f = 1.0) {
  return mphs::ocp::discretize(double_integrator(N), mphs::ocp::build_grid(t_f, N),
                               quadratic_cost(Matrix::Identity(2, 2), 1.0));
}

/// Minimizes the reduced cost of a quadratic-stage problem by conjugate
/// gradients on the normal equations in u, with the input-to-state map
/// assembled column by column. Returns the optimal u (m x (N+1)).
inline Matrix reduced_cost_minimizer(const mphs::ocp::DiscretizedOCP& P,
                                     double tol = 1e-14) {
  using namespace mphs::ocp;
  const auto& qs = std::get<QuadraticStage>(P.cost.stage);
  const Layout& L = P.layout;
  const Eigen::Index nu = L.nu();
  const Matrix u0 = Matrix::Zero(L.m, L.N + 1);
  const Matrix x_free = input_to_state(P.model, u0, P.grid);
  // S: u -> x - x_free, linear
  Matrix S(L.nx(), nu);
  LinearPlantModel homog = P.model;
  homog.x0.setZero();
  homog.f.setZero();
  for (Eigen::Index j = 0; j < nu; ++j) {
    Vector e = Vector::Zero(nu);
    e[j] = 1.0;
    const Matrix U = Eigen::Map<const Matrix>(e.data(), L.m, L.N + 1);
    const Matrix X = input_to_state(homog, U, P.grid);
    S.col(j) = Eigen::Map<const Vector>(X.data(), X.size());
  }
  // J_u(u) = sum_i w_i (1/2 (x_i - q)^T Q (x_i - q) + alpha/2 |u_i|^2)
  Matrix WQ = Matrix::Zero(L.nx(), L.nx());
  Vector Wq(L.nx());
  for (int i = 0; i <= L.N; ++i) {
    WQ.block(i * L.n, i * L.n, L.n, L.n) = P.grid.weights[i] * qs.Q;
    Wq.segment(i * L.n, L.n) = P.grid.weights[i] * (qs.Q * qs.q);
  }
  Vector Wu(nu);
  for (int i = 0; i <= L.N; ++i) {
    Wu.segment(i * L.m, L.m).setConstant(P.grid.weights[i] * P.cost.alpha);
  }
  const Vector xf = Eigen::Map<const Vector>(x_free.data(), x_free.size());
  Matrix H = S.transpose() * WQ * S;
  H.diagonal() += Wu;
  const Vector g = S.transpose() * (Wq - WQ * xf);
  Eigen::ConjugateGradient<Matrix, Eigen::Lower | Eigen::Upper> cg;
  cg.setTolerance(tol);
  cg.setMaxIterations(10 * static_cast<int>(nu));
  cg.compute(H);
  const Vector u = cg.solve(g);
  return Eigen::Map<const Matrix>(u.data(), L.m, L.N + 1);
}

}  // namespace testing_support
