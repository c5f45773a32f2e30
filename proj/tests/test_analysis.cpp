#include <gtest/gtest.h>

#include <cmath>

#include "mphs/analysis.hpp"
#include "mphs/optimizer.hpp"
#include "support.hpp"

using namespace mphs;
using namespace mphs::analysis;

namespace {

/// Vectorized oracle: (I (x) A^T + A^T (x) I) vec P = vec C.
Matrix lyapunov_kron(const Matrix& A, const Matrix& C) {
  const Eigen::Index n = A.rows();
  const Matrix I = Matrix::Identity(n, n);
  Matrix K = Matrix::Zero(n * n, n * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      K.block(i * n, j * n, n, n) += I(i, j) * A.transpose();
      K.block(i * n, j * n, n, n) += A.transpose()(i, j) * I;
    }
  }
  const Vector c = Eigen::Map<const Vector>(C.data(), C.size());
  const Vector p = K.partialPivLu().solve(c);
  return Eigen::Map<const Matrix>(p.data(), n, n);
}

IntegratorConfig config(double h) {
  IntegratorConfig cfg;
  cfg.h_t = h;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Linearization

TEST(Linearize, AffineOperatorIsExact) {
  const Matrix L{{2.0, -1.0}, {1.0, 0.5}};
  const auto lin = linearize(MonotoneOperator::affine(L, Vector{{1.0, 2.0}}), Vector{{3.0, -4.0}});
  EXPECT_EQ(lin.DM, L);
  // only cancellation error in M(x+h) - M(x)
  for (double r : lin.remainder_ratio) EXPECT_LT(r, 1e-10);
}

TEST(Linearize, FiniteDifferencesForBlackBoxOperator) {
  const auto M = MonotoneOperator::nonlinear(2, [](const Vector& x) -> Vector {
    return Vector{{x[0] + x[0] * x[0] * x[0], x[1] + x[0] * x[1]}};
  });
  const Vector xb{{0.5, 2.0}};
  const auto lin = linearize(M, xb);
  const Matrix expect{{1.0 + 3.0 * 0.25, 0.0}, {2.0, 1.5}};
  EXPECT_LT((lin.DM - expect).cwiseAbs().maxCoeff(), 1e-8);
  // remainder is O(|h|) for a smooth operator
  ASSERT_EQ(lin.remainder_ratio.size(), 3u);
  EXPECT_GT(lin.remainder_ratio[0] / lin.remainder_ratio[1], 5.0);
  EXPECT_GT(lin.remainder_ratio[1] / lin.remainder_ratio[2], 5.0);
}

TEST(Linearize, OptimizerBlockStructure) {
  const auto P = testing_support::double_integrator_problem(8);
  const PHSystem sys = optimizer::assemble_optimizer(P);
  const Vector z_hat = ocp::kkt_solve(P, 1e-12);
  const auto lin = linearize(sys.M, z_hat, P.layout.primal(), P.state_metric());
  ASSERT_TRUE(lin.blocks.has_value());
  EXPECT_EQ(lin.blocks->lower_right_max, 0.0);
  EXPECT_LT(lin.blocks->adjoint_mismatch, 1e-12);
  EXPECT_TRUE(lin.blocks->DM1.isIdentity(0.0));
  EXPECT_LT((lin.blocks->M2 - Matrix(P.C)).cwiseAbs().maxCoeff(), 1e-15);
  // M2 = C is onto, so its smallest singular value is positive
  EXPECT_GT(min_singular_value(lin.blocks->M2.transpose()), 1e-3);
  EXPECT_THROW(linearize(sys.M, z_hat, 0), DimensionMismatch);
  EXPECT_THROW(linearize(sys.M, z_hat, P.layout.total()), DimensionMismatch);
}

// ---------------------------------------------------------------------------
// Spectra

TEST(Spectrum, AbscissaExamples) {
  EXPECT_NEAR(spectral_abscissa(Matrix::Identity(3, 3)), -1.0, 1e-14);
  EXPECT_NEAR(spectral_abscissa(Matrix{{1.0, -1.0}, {1.0, 0.0}}), -0.5, 1e-10);
  EXPECT_NEAR(spectral_abscissa(Matrix{{0.0, -1.0}, {1.0, 0.0}}), 0.0, 1e-14);
  EXPECT_NEAR(spectral_abscissa(Matrix{{2.0, 5.0}, {0.0, 0.25}}), -0.25, 1e-14);
}

TEST(Spectrum, QuadraticOptimizerGeneratorIsHurwitz) {
  for (int N : {8, 32}) {
    const auto P = testing_support::double_integrator_problem(N);
    const PHSystem sys = optimizer::assemble_optimizer(P);
    const double a = spectral_abscissa(*sys.M.linear_part);
    EXPECT_LT(a, 0.0);
    // damping only enters through the primal block, so the decay rate
    // cannot exceed min(lambda_min(Q), alpha) = 1
    EXPECT_GE(a, -1.0 - 1e-12);
  }
}

TEST(Spectrum, DepartureFromNormality) {
  EXPECT_NEAR(departure_from_normality(Matrix{{2.0, 1.0}, {1.0, 3.0}}), 0.0, 1e-15);
  EXPECT_NEAR(departure_from_normality(Matrix{{0.0, 1.0}, {0.0, 0.0}}), std::sqrt(2.0), 1e-15);
  // self-adjoint in a weighted metric: W^{-1} S with S symmetric
  const Metric W(Vector{{1.0, 4.0}});
  const Matrix S{{1.0, 2.0}, {2.0, 5.0}};
  const Matrix A = W.weights().cwiseInverse().asDiagonal() * S;
  EXPECT_GT(departure_from_normality(A), 0.1);
  EXPECT_NEAR(departure_from_normality(A, W), 0.0, 1e-14);
}

TEST(Spectrum, DimensionGuards) {
  EXPECT_THROW(eigenvalues(Matrix::Zero(2, 3)), DimensionMismatch);
  EXPECT_THROW(spectral_abscissa(Matrix(0, 0)), DimensionMismatch);
  EXPECT_THROW(eigenvalues(Matrix::Identity(kMaxDenseDim + 1, kMaxDenseDim + 1)),
               EigenFailure);
  EXPECT_DOUBLE_EQ(min_singular_value(Matrix(0, 0)), 0.0);
  EXPECT_NEAR(min_singular_value(Matrix{{3.0, 0.0}, {0.0, 0.5}}), 0.5, 1e-15);
}

// ---------------------------------------------------------------------------
// Lyapunov

TEST(Lyapunov, NegativeIdentityGivesHalfIdentity) {
  const Matrix P = solve_lyapunov(-Matrix::Identity(3, 3), -Matrix::Identity(3, 3));
  EXPECT_LT((P - 0.5 * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Lyapunov, MatchesKroneckerOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PairSampler s(seed);
    const Eigen::Index n = 5;
    Matrix A = Eigen::Map<const Matrix>(s.sample(n * n).data(), n, n);
    // shift into the open left half-plane
    A.diagonal().array() -= A.norm() + 0.1;
    Matrix C = Eigen::Map<const Matrix>(s.sample(n * n).data(), n, n);
    C = -(C * C.transpose() + Matrix::Identity(n, n));
    const Matrix P = solve_lyapunov(A, C);
    const Matrix Pk = lyapunov_kron(A, C);
    EXPECT_LT((P - Pk).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + Pk.norm())) << "seed " << seed;
    EXPECT_LT((A.transpose() * P + P * A - C).norm(), 1e-10 * (1.0 + C.norm()));
  }
}

TEST(Lyapunov, CertificateForOptimizerMatrix) {
  const auto P = testing_support::double_integrator_problem(8);
  const PHSystem sys = optimizer::assemble_optimizer(P);
  const auto cert = lyapunov_certificate(*sys.M.linear_part);
  EXPECT_TRUE(cert.valid);
  EXPECT_LE(cert.residual, 1e-8);
  EXPECT_GT(cert.min_eig_P, 0.0);
  EXPECT_LT(cert.abscissa, 0.0);
}

TEST(Lyapunov, QuadraticFormDecaysAlongTheFlow) {
  const auto P = testing_support::double_integrator_problem(8);
  const PHSystem sys = optimizer::assemble_optimizer(P);
  const auto cert = lyapunov_certificate(*sys.M.linear_part);
  const Vector z_hat = ocp::kkt_solve(P, 1e-12);
  auto V = [&](const Vector& z) {
    const Vector h = z - z_hat;
    return h.dot(cert.P * h);
  };
  double worst = -1.0;
  optimizer::integrate_flow(sys, ocp::default_initial_state(P), optimizer::flow_input(P),
                            config(0.01), 5.0,
                            [&](double, const Vector& prev, const Vector& next) {
                              worst = std::max(worst, V(next) - V(prev));
                            });
  EXPECT_LE(worst, 1e-9);
}

TEST(Lyapunov, RejectsNonHurwitzGenerators) {
  EXPECT_THROW(lyapunov_certificate(Matrix{{0.0, -1.0}, {1.0, 0.0}}), NotHurwitz);
  EXPECT_THROW(lyapunov_certificate(-Matrix::Identity(2, 2)), NotHurwitz);
  EXPECT_THROW(solve_lyapunov(Matrix::Zero(2, 2), Matrix::Identity(2, 2)), NotHurwitz);
  EXPECT_THROW(solve_lyapunov(Matrix::Identity(2, 2), Matrix::Identity(3, 3)),
               DimensionMismatch);
}

// ---------------------------------------------------------------------------
// Decay fits

TEST(DecayFit, ExactExponential) {
  std::vector<double> t, v;
  for (int k = 0; k < 50; ++k) {
    t.push_back(0.1 * k);
    v.push_back(3.0 * std::exp(-0.7 * t.back()));
  }
  const auto fit = decay_fit(t, v);
  EXPECT_NEAR(fit.c_fit, 0.7, 1e-12);
  EXPECT_NEAR(fit.amplitude, 3.0, 1e-12);
  EXPECT_TRUE(decay_fit(t, v, 0.5).bound_satisfied);
  const auto tight = decay_fit(t, v, 1.0);
  EXPECT_FALSE(tight.bound_satisfied);
  EXPECT_NEAR(tight.worst_ratio, std::exp(0.3 * 4.9), 1e-9);
}

TEST(DecayFit, InputValidation) {
  std::vector<double> t(9, 0.0), v(9, 1.0);
  for (int k = 0; k < 9; ++k) t[k] = k;
  EXPECT_THROW(decay_fit(t, v), InsufficientData);
  t.push_back(9.0);
  EXPECT_THROW(decay_fit(t, v), DimensionMismatch);
  v.push_back(0.0);
  EXPECT_THROW(decay_fit(t, v), InvalidParameter);
  EXPECT_THROW(decay_fit(std::vector<double>(10, 1.0), std::vector<double>(10, 1.0)),
               InsufficientData);
}

TEST(DecayFit, FlowRateMatchesSpectralAbscissa) {
  const auto P = testing_support::double_integrator_problem(16);
  const PHSystem sys = optimizer::assemble_optimizer(P);
  const Vector z_hat = ocp::kkt_solve(P, 1e-12);
  IntegratorConfig cfg = config(0.01);
  cfg.record_every = 10;
  const auto tr = optimizer::integrate_flow(sys, ocp::default_initial_state(P),
                                            optimizer::flow_input(P), cfg, 40.0);
  const auto rep = optimizer::convergence_report(tr, z_hat, P);
  ASSERT_TRUE(rep.rate.has_value());
  const double sigma = spectral_abscissa(*sys.M.linear_part);
  EXPECT_NEAR(*rep.rate, -sigma, 0.1 * std::abs(sigma));
}
