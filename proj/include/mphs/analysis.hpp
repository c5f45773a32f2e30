#pragma once

#include <Eigen/Eigenvalues>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mphs/errors.hpp"
#include "mphs/system.hpp"

namespace mphs::analysis {

/// Dense eigensolves are refused above this dimension.
inline constexpr Eigen::Index kMaxDenseDim = 2000;

/// Blocks of DM = [[DM1, -M2*], [M2, 0]] for a structured operator.
struct BlockStructure {
  Matrix DM1;
  Matrix M2;
  Matrix M2_adjoint;
  /// max |entry| of the lower-right block, which must vanish
  double lower_right_max = 0.0;
  /// max |M2_adjoint - metric adjoint of M2|
  double adjoint_mismatch = 0.0;
};

struct Linearization {
  Vector x_bar;
  Matrix DM;
  std::optional<BlockStructure> blocks;
  /// ||M(x+h) - M(x) - DM h|| / ||h|| at ||h|| = 1e-2, 1e-3, 1e-4
  std::vector<double> remainder_ratio;
};

/// Jacobian of M at x_bar: analytic when available, otherwise central
/// differences with step 1e-6 * max(1, ||x_bar||).
///
/// With `split` the state is read as X1 ⊕ X2 (first `split` coordinates in
/// X1) and the block form is extracted; `metric` is then used to check
/// that the upper-right block is minus the metric adjoint of M2.
inline Linearization linearize(const MonotoneOperator& M, const Vector& x_bar,
                               std::optional<Eigen::Index> split = {},
                               const std::optional<Metric>& metric = {}) {
  detail::require_dim(x_bar.size(), M.dim, "linearize x_bar");
  Linearization lin;
  lin.x_bar = x_bar;
  const double scale = std::max(1.0, x_bar.norm());
  if (M.is_affine() || M.has_derivative()) {
    lin.DM = M.jacobian(x_bar);
  } else {
    const double eps = 1e-6 * scale;
    lin.DM.resize(M.dim, M.dim);
    for (Eigen::Index j = 0; j < M.dim; ++j) {
      Vector e = Vector::Zero(M.dim);
      e[j] = eps;
      lin.DM.col(j) = (M(x_bar + e) - M(x_bar - e)) / (2.0 * eps);
    }
  }

  const Vector M0 = M(x_bar);
  Vector dir = Vector::Ones(M.dim) / std::sqrt(static_cast<double>(M.dim));
  for (double hn : {1e-2, 1e-3, 1e-4}) {
    const Vector hvec = hn * scale * dir;
    const Vector rem = M(x_bar + hvec) - M0 - lin.DM * hvec;
    lin.remainder_ratio.push_back(rem.norm() / hvec.norm());
  }

  if (split) {
    const Eigen::Index k = *split;
    if (k <= 0 || k >= M.dim) {
      throw DimensionMismatch("linearize: block split out of range");
    }
    const Eigen::Index r = M.dim - k;
    BlockStructure b;
    b.DM1 = lin.DM.topLeftCorner(k, k);
    b.M2 = lin.DM.bottomLeftCorner(r, k);
    b.M2_adjoint = -lin.DM.topRightCorner(k, r);
    b.lower_right_max = lin.DM.bottomRightCorner(r, r).cwiseAbs().maxCoeff();
    if (metric) {
      detail::require_dim(metric->dim(), M.dim, "linearize metric");
      const Metric X1 = metric->segment(0, k);
      const Metric X2 = metric->segment(k, r);
      const Matrix adj = X1.adjoint_of(b.M2, X2);
      b.adjoint_mismatch = (adj - b.M2_adjoint).cwiseAbs().maxCoeff();
    }
    lin.blocks = std::move(b);
  }
  return lin;
}

namespace internal {

inline void require_square(const Matrix& A, const char* what) {
  if (A.rows() != A.cols()) {
    throw DimensionMismatch(std::string(what) + ": matrix must be square");
  }
  if (A.rows() > kMaxDenseDim) {
    throw EigenFailure(std::string(what) + ": dimension " +
                       std::to_string(A.rows()) + " exceeds dense cap");
  }
}

}  // namespace internal

inline Eigen::VectorXcd eigenvalues(const Matrix& A) {
  internal::require_square(A, "eigenvalues");
  Eigen::EigenSolver<Matrix> es(A, /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success) {
    throw EigenFailure("eigenvalues: QR iteration did not converge");
  }
  return es.eigenvalues();
}

/// max Re spec(-DM), the spectral abscissa of the generator of zdot = -DM z.
inline double spectral_abscissa(const Matrix& DM) {
  if (DM.rows() == 0) throw DimensionMismatch("spectral_abscissa: empty");
  return eigenvalues(-DM).real().maxCoeff();
}

/// ||A^T A - A A^T||_F, computed for A in coordinates where the metric is
/// Euclidean (A -> W^{1/2} A W^{-1/2}) when a metric is given.
inline double departure_from_normality(const Matrix& A,
                                       const std::optional<Metric>& metric = {}) {
  Matrix S = A;
  if (metric) {
    const Vector s = metric->weights().cwiseSqrt();
    S = s.asDiagonal() * A * s.cwiseInverse().asDiagonal();
  }
  return (S.transpose() * S - S * S.transpose()).norm();
}

/// Solves A^T P + P A = C through the complex Schur form A = U T U^H:
/// T^H Y + Y T = U^H C U is triangular and solved entrywise, P = U Y U^H.
inline Matrix solve_lyapunov(const Matrix& A, const Matrix& C) {
  internal::require_square(A, "solve_lyapunov");
  detail::require_dim(C.rows(), A.rows(), "solve_lyapunov C rows");
  detail::require_dim(C.cols(), A.cols(), "solve_lyapunov C cols");
  const Eigen::Index n = A.rows();
  Eigen::ComplexSchur<Matrix> schur(A);
  if (schur.info() != Eigen::Success) {
    throw EigenFailure("solve_lyapunov: Schur decomposition failed");
  }
  const Eigen::MatrixXcd& U = schur.matrixU();
  const Eigen::MatrixXcd& T = schur.matrixT();
  const Eigen::MatrixXcd F = U.adjoint() * C.cast<std::complex<double>>() * U;
  Eigen::MatrixXcd Y = Eigen::MatrixXcd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      std::complex<double> acc = F(i, j);
      for (Eigen::Index k = 0; k < i; ++k) acc -= std::conj(T(k, i)) * Y(k, j);
      for (Eigen::Index k = 0; k < j; ++k) acc -= Y(i, k) * T(k, j);
      const std::complex<double> den = std::conj(T(i, i)) + T(j, j);
      if (std::abs(den) < 1e-300) {
        throw NotHurwitz("solve_lyapunov: eigenvalues sum to zero");
      }
      Y(i, j) = acc / den;
    }
  }
  Matrix P = (U * Y * U.adjoint()).real();
  return 0.5 * (P + P.transpose());
}

struct LyapunovCertificate {
  Matrix P;
  double residual = 0.0;  // ||A^T P + P A + I||_F
  double min_eig_P = 0.0;
  double abscissa = 0.0;
  bool valid = false;
};

/// Certificate for the generator A = -DM: A^T P + P A = -I with P > 0.
inline LyapunovCertificate lyapunov_certificate(const Matrix& DM,
                                                double tol = 1e-8) {
  internal::require_square(DM, "lyapunov_certificate");
  const Matrix A = -DM;
  LyapunovCertificate cert;
  cert.abscissa = spectral_abscissa(DM);
  if (!(cert.abscissa < 0.0)) {
    throw NotHurwitz("lyapunov_certificate: generator has spectral abscissa " +
                     std::to_string(cert.abscissa));
  }
  const Eigen::Index n = A.rows();
  cert.P = solve_lyapunov(A, -Matrix::Identity(n, n));
  cert.residual =
      (A.transpose() * cert.P + cert.P * A + Matrix::Identity(n, n)).norm();
  Eigen::SelfAdjointEigenSolver<Matrix> es(cert.P, Eigen::EigenvaluesOnly);
  cert.min_eig_P = es.eigenvalues().minCoeff();
  cert.valid = cert.min_eig_P > 0.0 && cert.residual <= tol;
  return cert;
}

inline double min_singular_value(const Matrix& A) {
  if (A.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(A);
  return svd.singularValues().minCoeff();
}

struct DecayFit {
  double c_fit = 0.0;
  double amplitude = 0.0;
  /// only meaningful when a reference rate was given
  bool bound_satisfied = false;
  /// max_k value(t_k) / (value(t_0) e^{-c_ref t_k})
  double worst_ratio = 0.0;
};

/// Least-squares fit of log(value) = log(amplitude) - c t.
inline DecayFit decay_fit(const std::vector<double>& t,
                          const std::vector<double>& value,
                          std::optional<double> c_ref = {},
                          double bound_tol = 1e-6) {
  if (t.size() != value.size()) {
    throw DimensionMismatch("decay_fit: t and value lengths differ");
  }
  if (t.size() < 10) throw InsufficientData("decay_fit: need >= 10 samples");
  double st = 0, sy = 0, stt = 0, sty = 0;
  const double n = static_cast<double>(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (!(value[k] > 0.0)) {
      throw InvalidParameter("decay_fit: values must be positive");
    }
    const double y = std::log(value[k]);
    st += t[k];
    sy += y;
    stt += t[k] * t[k];
    sty += t[k] * y;
  }
  const double den = n * stt - st * st;
  if (!(den > 0.0)) throw InsufficientData("decay_fit: degenerate time grid");
  const double slope = (n * sty - st * sy) / den;
  const double intercept = (sy - slope * st) / n;
  DecayFit fit;
  fit.c_fit = -slope;
  fit.amplitude = std::exp(intercept);
  if (c_ref) {
    fit.bound_satisfied = true;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double bound = value[0] * std::exp(-*c_ref * (t[k] - t[0]));
      fit.worst_ratio = std::max(fit.worst_ratio, value[k] / bound);
      if (value[k] > bound * (1.0 + bound_tol)) fit.bound_satisfied = false;
    }
  }
  return fit;
}

}  // namespace mphs::analysis
