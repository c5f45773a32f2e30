#include <gtest/gtest.h>

#include <cmath>
#include <unsupported/Eigen/MatrixFunctions>

#include "mphs/closedloop.hpp"
#include "support.hpp"

using namespace mphs;
using namespace mphs::closedloop;
using testing_support::double_integrator;
using testing_support::quadratic_cost;

namespace {

PlantSpec linear_plant(Matrix R, Matrix B, Vector x0, Matrix J = Matrix()) {
  return PlantSpec{LinearPlant{std::move(R), std::move(J)}, std::move(B), std::move(x0)};
}

PlantSpec cubic_plant(Eigen::Index n, Matrix B, Vector x0, double kappa = 1.0) {
  return PlantSpec{CubicPlant{Matrix::Identity(n, n), kappa}, std::move(B), std::move(x0)};
}

IntegratorConfig config(double h) {
  IntegratorConfig cfg;
  cfg.h_t = h;
  return cfg;
}

struct Loop {
  ocp::DiscretizedOCP problem;
  ClosedLoopSystem cls;
  Vector s0;
};

Loop make_loop(const PlantSpec& plant, int N, std::optional<double> gamma = {},
               double alpha = 1.0) {
  Loop l{ocp::discretize(double_integrator(N, plant.x_p0), ocp::build_grid(1.0, N),
                         quadratic_cost(Matrix::Identity(2, 2), alpha)),
         {}, {}};
  l.cls = couple(optimizer::assemble_optimizer(l.problem), assemble_plant(plant),
                 l.problem, CouplingSpec{gamma});
  l.s0 = initial_state(l.cls, l.problem, plant.x_p0);
  return l;
}

Matrix di_B() { return Matrix{{0.0}, {1.0}}; }

}  // namespace

// ---------------------------------------------------------------------------
// Plants

TEST(Plant, LinearDecayMatchesExponential) {
  const PHSystem p = assemble_plant(linear_plant(Matrix::Identity(1, 1), Matrix::Ones(1, 1),
                                                 Vector::Ones(1)));
  const auto tr = integrate(p, Vector::Ones(1), Vector::Zero(1), config(1e-3), 1.0);
  EXPECT_NEAR(tr.states.back()[0], std::exp(-1.0), 1e-6);
}

TEST(Plant, LinearWithSkewPartMatchesMatrixExponential) {
  const Matrix R{{1.0, 0.0}, {0.0, 0.5}};
  const Matrix J{{0.0, 2.0}, {-2.0, 0.0}};
  const Vector x0{{1.0, -1.0}};
  const PHSystem p = assemble_plant(linear_plant(R, di_B(), x0, J));
  const auto tr = integrate(p, x0, Vector::Zero(1), config(1e-3), 1.0);
  const Vector ref = Matrix(-(R + J)).exp() * x0;
  EXPECT_LT((tr.states.back() - ref).norm(), 1e-6);
}

TEST(Plant, PureSkewConservesEnergy) {
  // zero damping makes the probe gap exactly zero, which is not a violation
  const Matrix J{{0.0, 1.0}, {-1.0, 0.0}};
  PlantReport rep;
  const PHSystem p =
      assemble_plant(linear_plant(Matrix::Zero(2, 2), di_B(), Vector{{1.0, 0.0}}, J), &rep);
  EXPECT_NEAR(rep.c_p, 0.0, 1e-12);
  const auto tr = integrate(p, Vector{{1.0, 0.0}}, Vector::Zero(1), config(0.01), 5.0);
  EXPECT_NEAR(tr.states.back().norm(), 1.0, 1e-12);
}

TEST(Plant, CubicConstantAtLeastOne) {
  PlantReport rep;
  const PHSystem p = assemble_plant(cubic_plant(2, di_B(), Vector{{1.0, 1.0}}), &rep, 4);
  EXPECT_FALSE(rep.probe.violation);
  EXPECT_GE(rep.c_p, 1.0 - 1e-12);
  // x + x^3 at x = 1 is 2
  EXPECT_NEAR(p.M(Vector{{1.0, -1.0}})[1], -2.0, 1e-15);
  const Vector x{{0.3, -2.0}};
  const Matrix D = p.M.jacobian(x);
  EXPECT_NEAR(D(0, 0), 1.0 + 3.0 * 0.09, 1e-15);
  EXPECT_NEAR(D(1, 1), 1.0 + 12.0, 1e-15);
  EXPECT_DOUBLE_EQ(D(0, 1), 0.0);
}

TEST(Plant, NonAccretivePlantIsRejected) {
  EXPECT_THROW(assemble_plant(linear_plant(Matrix{{-1.0, 0.0}, {0.0, 1.0}}, di_B(),
                                           Vector::Zero(2))),
               AccretivityViolation);
  EXPECT_THROW(assemble_plant(linear_plant(Matrix::Identity(2, 2), di_B(), Vector::Zero(2),
                                           Matrix{{0.0, 1.0}, {1.0, 0.0}})),
               InvalidParameter);
  EXPECT_THROW(assemble_plant(cubic_plant(2, di_B(), Vector::Zero(2), -1.0)),
               InvalidParameter);
  EXPECT_THROW(assemble_plant(linear_plant(Matrix::Identity(2, 2), di_B(), Vector::Zero(3))),
               DimensionMismatch);
}

// ---------------------------------------------------------------------------
// Coupling

TEST(Couple, CouplingBlockIsSkewInProductMetric) {
  const Loop l = make_loop(cubic_plant(2, di_B(), Vector{{1.0, 0.0}}), 8);
  const Metric& W = l.cls.system.metric;
  PairSampler s(2);
  for (int k = 0; k < 100; ++k) {
    const Vector z = s.sample(W.dim());
    EXPECT_LE(std::abs(W.inner(l.cls.K * z, z)), 1e-12 * W.norm_squared(z));
  }
  EXPECT_EQ(l.cls.system.input_dim(), l.problem.layout.dual() - 2);
  EXPECT_DOUBLE_EQ(l.cls.gamma, 1.0);
  EXPECT_TRUE(l.cls.warnings.empty());
}

TEST(Couple, LinearClosedLoopMatchesHandAssembledMatrix) {
  const Matrix R{{2.0, 0.3}, {0.3, 1.0}};
  const double gamma = 0.7;
  const Loop l = make_loop(linear_plant(R, di_B(), Vector{{1.0, 0.0}}), 6, gamma, 2.0);
  ASSERT_TRUE(l.cls.system.M.is_affine());
  const auto& L = l.problem.layout;
  const Eigen::Index np = 2;
  const Eigen::Index nt = np + L.total();
  const Matrix DMopt = Matrix(ocp::kkt_jacobian(l.problem, Vector::Zero(L.total())));
  Matrix expect = Matrix::Zero(nt, nt);
  expect.topLeftCorner(np, np) = R;
  expect.bottomRightCorner(L.total(), L.total()) = DMopt;
  const Eigen::Index l0 = np + L.primal() + L.lambda0_offset();
  // u_p = -gamma B^T lambda0 enters xdot_p = -M_p + B u_p
  expect.block(0, l0, np, 2) = gamma * di_B() * di_B().transpose();
  // lambda0 rows receive gamma B y_p = gamma B B^T x_p
  expect.block(l0, 0, 2, np) = -gamma * di_B() * di_B().transpose();
  EXPECT_LT((*l.cls.system.M.linear_part - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Couple, PowerBalanceAndProbeOfTheClosedLoop) {
  const Loop l = make_loop(cubic_plant(2, di_B(), Vector{{1.0, 0.5}}), 8);
  const auto tr = integrate(l.cls.system, l.s0, l.cls.closed_input(), config(0.01), 2.0);
  const auto pb = power_balance_audit(l.cls.system, tr);
  EXPECT_LE(pb.max_abs, 1e-10 * (1.0 + l.cls.system.metric.norm_squared(l.s0)));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PairSampler s(seed);
    EXPECT_FALSE(accretivity_probe(l.cls.system.M, l.cls.system.metric, s, 100).violation);
  }
}

TEST(Couple, DimensionAndModelChecks) {
  const int N = 4;
  const auto P = ocp::discretize(double_integrator(N), ocp::build_grid(1.0, N),
                                 quadratic_cost(Matrix::Identity(2, 2), 1.0));
  const PHSystem opt = optimizer::assemble_optimizer(P);
  const PHSystem p3 = assemble_plant(
      linear_plant(Matrix::Identity(3, 3), Matrix::Ones(3, 1), Vector::Zero(3)));
  EXPECT_THROW(couple(opt, p3, P, {}), DimensionMismatch);
  const PHSystem p_wide = assemble_plant(
      linear_plant(Matrix::Identity(2, 2), Matrix::Ones(2, 2), Vector::Zero(2)));
  EXPECT_THROW(couple(opt, p_wide, P, {}), DimensionMismatch);
  const PHSystem p_mismatch = assemble_plant(
      linear_plant(Matrix::Identity(2, 2), Matrix{{0.1}, {1.0}}, Vector::Zero(2)));
  const auto cls = couple(opt, p_mismatch, P, {});
  ASSERT_EQ(cls.warnings.size(), 1u);
  const PHSystem ok = assemble_plant(
      linear_plant(Matrix::Identity(2, 2), di_B(), Vector::Zero(2)));
  EXPECT_THROW(couple(opt, ok, P, CouplingSpec{-1.0}), InvalidParameter);
}

// ---------------------------------------------------------------------------
// Closed-loop behaviour

TEST(ClosedLoop, LinearPlantConverges) {
  const Loop l = make_loop(linear_plant(Matrix::Identity(2, 2), di_B(), Vector{{1.0, -0.5}}), 32);
  const Metric& W = l.cls.system.metric;
  double prev = W.norm(l.s0), worst = 0.0;
  const auto run = simulate_closed_loop(l.cls, l.s0, config(0.01), 20.0,
                                        [&](double, const Vector&, const Vector& next) {
                                          const double e = W.norm(next);
                                          worst = std::max(worst, e - prev);
                                          prev = e;
                                        });
  EXPECT_LE(worst, 1e-9);
  EXPECT_LE(W.norm(run.trajectory.states.back()), 1e-4 * W.norm(l.s0));
  std::vector<double> t, v;
  for (std::size_t k = run.trajectory.size() / 2; k < run.trajectory.size(); ++k) {
    t.push_back(run.trajectory.times[k]);
    v.push_back(W.norm(run.trajectory.states[k]));
  }
  EXPECT_GT(analysis::decay_fit(t, v).c_fit, 0.0);
}

TEST(ClosedLoop, OriginIsAnEquilibrium) {
  const Loop l = make_loop(cubic_plant(2, di_B(), Vector::Zero(2)), 8);
  EXPECT_LT(l.s0.cwiseAbs().maxCoeff(), 1e-300);
  const auto run = simulate_closed_loop(l.cls, l.s0, config(0.05), 1.0);
  for (const auto& s : run.trajectory.states) EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ClosedLoop, ZeroGainDecouples) {
  const Vector x0{{1.0, 0.5}};
  const Loop l = make_loop(linear_plant(Matrix::Identity(2, 2), di_B(), x0), 8, 0.0);
  const auto run = simulate_closed_loop(l.cls, l.s0, config(1e-3), 1.0);
  // plant evolves as xdot = -x on its own
  EXPECT_LT((run.trajectory.states.back().head(2) - std::exp(-1.0) * x0).norm(), 1e-6);
  for (const auto& u : run.feedback.u_p) EXPECT_EQ(u.norm(), 0.0);
}

TEST(ClosedLoop, FeedbackIsLinearInGain) {
  Loop l = make_loop(cubic_plant(2, di_B(), Vector{{1.0, 0.0}}), 8, 0.5);
  PairSampler s(9);
  const Vector st = s.sample(l.cls.system.state_dim());
  const Vector lambda0 = st.segment(l.cls.lambda0_offset(), 2);
  EXPECT_NEAR(feedback_at(l.cls, st)[0], -0.5 * lambda0[1], 1e-15);
  const Vector u1 = feedback_at(l.cls, st);
  l.cls.gamma = 1.0;
  EXPECT_LT((feedback_at(l.cls, st) - 2.0 * u1).norm(), 1e-15);
}

TEST(ClosedLoop, FeedbackSeriesExtractsMultipliers) {
  const Loop l = make_loop(cubic_plant(2, di_B(), Vector{{1.0, 0.0}}), 8, {}, 2.0);
  EXPECT_DOUBLE_EQ(l.cls.gamma, 0.5);
  const auto run = simulate_closed_loop(l.cls, l.s0, config(0.01), 0.5);
  ASSERT_EQ(run.feedback.times.size(), run.trajectory.size());
  const auto& L = l.problem.layout;
  const Eigen::Index lam1 = 2 + L.primal() + L.lambda_offset(1);
  for (std::size_t k = 0; k < run.trajectory.size(); ++k) {
    const Vector& s = run.trajectory.states[k];
    EXPECT_NEAR(run.feedback.u_p[k][0], -0.5 * s[l.cls.lambda0_offset() + 1], 1e-15);
    EXPECT_NEAR(run.feedback.mpc[k][0], -0.5 * s[lam1 + 1], 1e-15);
  }
}

TEST(ClosedLoop, BlockNormsSplitTheState) {
  const Loop l = make_loop(cubic_plant(2, di_B(), Vector{{3.0, 4.0}}), 4);
  const auto b = block_norms(l.cls, l.s0);
  EXPECT_DOUBLE_EQ(b.plant, 5.0);
  EXPECT_NEAR(b.total * b.total, b.plant * b.plant + b.optimizer * b.optimizer, 1e-12);
}

TEST(ClosedLoop, InitialMultiplierGapToOpenLoopInputIsFirstOrder) {
  // lambda0 and the first interval multiplier differ by O(h) at the KKT point,
  // so -(1/alpha) B^T lambda0 only approximates u(0)
  auto gap = [](int N) {
    const auto P = testing_support::double_integrator_problem(N);
    const auto st = ocp::OptimizerState::unstack(ocp::kkt_solve(P, 1e-12), P.layout);
    const Vector fb = -(1.0 / P.cost.alpha) * P.model.B.transpose() * st.dual.lambda0;
    return std::abs(fb[0] - st.primal.u(0, 0));
  };
  double prev = gap(16);
  for (int N : {32, 64, 128}) {
    const double g = gap(N);
    EXPECT_GT(g, 0.0);
    EXPECT_NEAR(prev / g, 2.0, 0.25) << "N=" << N;
    prev = g;
  }
}
