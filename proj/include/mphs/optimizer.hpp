#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "mphs/analysis.hpp"
#include "mphs/integrate.hpp"
#include "mphs/ocp.hpp"
#include "mphs/phcore.hpp"
#include "mphs/system.hpp"

namespace mphs::optimizer {

/// Primal-dual gradient flow of the discretized problem as a monotone pH
/// system:
///   M(z, w) = (grad J(z) - C* w, C z),  B = [0; I],  y = (lambda, lambda0).
/// Feeding the constant input (f, x0) gives the optimizer dynamics whose
/// equilibrium is the KKT point. Quadratic stage costs make M affine.
inline PHSystem assemble_optimizer(const ocp::DiscretizedOCP& problem) {
  const ocp::Layout& L = problem.layout;
  MonotoneOperator M;
  if (problem.cost.is_quadratic()) {
    const Vector zero = Vector::Zero(L.total());
    Matrix DM = Matrix(ocp::kkt_jacobian(problem, zero));
    Vector offset = ocp::kkt_operator(problem, zero);
    M = MonotoneOperator::affine(std::move(DM), std::move(offset));
  } else {
    M = MonotoneOperator::nonlinear(
        L.total(),
        [problem](const Vector& s) -> Vector {
          return ocp::kkt_operator(problem, s);
        },
        [problem](const Vector& s) -> Matrix {
          return Matrix(ocp::kkt_jacobian(problem, s));
        });
  }
  Matrix B = Matrix::Zero(L.total(), L.dual());
  B.bottomRows(L.dual()).setIdentity();
  return PHSystem(std::move(M), std::move(B), problem.state_metric(),
                  problem.dual);
}

/// Constant port input (f, x0) that turns the pH system into the flow.
inline Vector flow_input(const ocp::DiscretizedOCP& problem) {
  return problem.rhs;
}

/// Outer step 0.01 / (1 + ||A|| + lambda_max(Hess l) + alpha).
inline double default_step(const ocp::DiscretizedOCP& problem) {
  const double normA =
      problem.model.A.size() > 0
          ? Eigen::JacobiSVD<Matrix>(problem.model.A).singularValues()[0]
          : 0.0;
  double lmax = 1.0;  // logcosh Hessian is bounded by 1
  if (const auto* qs =
          std::get_if<ocp::QuadraticStage>(&problem.cost.stage)) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(qs->Q, Eigen::EigenvaluesOnly);
    lmax = es.eigenvalues().maxCoeff();
  }
  return 0.01 / (1.0 + normA + lmax + problem.cost.alpha);
}

inline Trajectory integrate_flow(const PHSystem& sys, const Vector& z0,
                                 const Vector& u_opt,
                                 const IntegratorConfig& cfg, double T,
                                 const StepObserver& observer = {}) {
  return integrate(sys, z0, u_opt, cfg, T, observer);
}

struct ConvergenceReport {
  std::vector<double> times;
  std::vector<double> err_total;
  std::vector<double> err_primal;
  std::vector<double> err_dual;
  std::optional<double> rate;  // empty when indeterminate
  double amplitude = 0.0;
  double initial_dual_error = 0.0;
  /// Gronwall-type primal bound ||h1(t)|| <= ||h(0)|| e^{-c1 t} (1 + 1e-6)
  std::optional<double> c1;
  bool primal_bound_satisfied = false;
  double primal_bound_worst_ratio = 0.0;
  /// the valid part of the estimate: ||h1(t)|| <= ||h(0)||
  bool primal_norm_bounded = false;
};

/// Errors of a trajectory against the KKT point, an exponential fit over the
/// second half of the samples, and the primal block bound when c1 is given.
inline ConvergenceReport convergence_report(
    const Trajectory& traj, const Vector& z_hat,
    const ocp::DiscretizedOCP& problem, std::optional<double> c1 = {},
    double bound_tol = 1e-6) {
  const ocp::Layout& L = problem.layout;
  detail::require_dim(z_hat.size(), L.total(), "convergence_report z_hat");
  if (traj.size() < 20) {
    throw InsufficientData("convergence_report: need >= 20 samples");
  }
  ConvergenceReport rep;
  rep.c1 = c1;
  const Metric full = problem.state_metric();
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const Vector e = traj.states[k] - z_hat;
    rep.times.push_back(traj.times[k]);
    rep.err_total.push_back(full.norm(e));
    rep.err_primal.push_back(problem.primal.norm(e.head(L.primal())));
    rep.err_dual.push_back(problem.dual.norm(e.tail(L.dual())));
  }
  rep.initial_dual_error = rep.err_dual.front();

  const double peak =
      *std::max_element(rep.err_total.begin(), rep.err_total.end());
  const std::size_t start = traj.size() / 2;
  std::vector<double> t_tail(rep.times.begin() + start, rep.times.end());
  std::vector<double> e_tail(rep.err_total.begin() + start,
                             rep.err_total.end());
  const bool positive = std::all_of(e_tail.begin(), e_tail.end(),
                                    [](double v) { return v > 0.0; });
  if (peak < 1e-9 || !positive) {
    rep.amplitude = peak;
  } else {
    const auto fit = analysis::decay_fit(t_tail, e_tail);
    rep.rate = fit.c_fit;
    rep.amplitude = fit.amplitude;
  }

  const double h0 = rep.err_total.front();
  rep.primal_norm_bounded = true;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    if (rep.err_primal[k] > h0 * (1.0 + bound_tol)) {
      rep.primal_norm_bounded = false;
    }
  }
  if (c1) {
    rep.primal_bound_satisfied = true;
    for (std::size_t k = 0; k < traj.size(); ++k) {
      const double bound = h0 * std::exp(-*c1 * rep.times[k]);
      const double ratio = bound > 0.0 ? rep.err_primal[k] / bound
                                       : std::numeric_limits<double>::infinity();
      rep.primal_bound_worst_ratio = std::max(rep.primal_bound_worst_ratio,
                                              ratio);
      if (rep.err_primal[k] > bound * (1.0 + bound_tol)) {
        rep.primal_bound_satisfied = false;
      }
    }
  }
  return rep;
}

/// Probe estimate of the strong-accretivity constant of the grad J block
/// (the X1 part of the block operator), anchored at `anchor`.
inline double primal_accretivity_constant(const ocp::DiscretizedOCP& problem,
                                          const Vector& anchor,
                                          std::uint64_t seed = 0,
                                          int n_pairs = 200) {
  const ocp::Layout& L = problem.layout;
  const auto grad = MonotoneOperator::nonlinear(
      L.primal(), [problem](const Vector& z) -> Vector {
        return ocp::cost_gradient(problem, z);
      });
  PairSampler sampler(seed);
  const auto rep = accretivity_probe(grad, problem.primal, sampler, n_pairs,
                                     anchor.head(L.primal()));
  return rep.c_estimate;
}

/// Horizon after which an exponential decay at `rate` has shrunk the error
/// by `reduction`, with a safety factor.
inline double horizon_for_reduction(double rate, double reduction,
                                    double safety = 1.2) {
  if (!(rate > 0.0)) {
    throw InvalidParameter("horizon_for_reduction: rate must be > 0");
  }
  return safety * std::log(1.0 / reduction) / rate;
}

struct FlowRun {
  Trajectory trajectory;
  double T = 0.0;
  std::optional<double> pilot_rate;
  double final_ratio = 0.0;  // ||z(T) - z_hat|| / ||z(0) - z_hat||
};

/// Integrates the flow long enough to shrink the error to z_hat by
/// `reduction`: a pilot run on [0, pilot_T] fits the rate, the horizon is
/// taken from the fit, and is extended (x1.5, at most 6 times) if the run
/// falls short.
inline FlowRun run_to_reduction(const PHSystem& sys, const Vector& z0,
                                const Vector& u_opt, const Vector& z_hat,
                                const ocp::DiscretizedOCP& problem,
                                IntegratorConfig cfg, double reduction = 1e-6,
                                double pilot_T = 10.0,
                                const StepObserver& observer = {}) {
  const Metric W = problem.state_metric();
  const double e0 = W.norm(z0 - z_hat);
  FlowRun out;
  if (e0 == 0.0) {
    out.T = pilot_T;
    out.trajectory = integrate_flow(sys, z0, u_opt, cfg, out.T, observer);
    return out;
  }
  IntegratorConfig pilot_cfg = cfg;
  const long pilot_steps = static_cast<long>(std::ceil(pilot_T / cfg.h_t));
  pilot_cfg.record_every = std::max(1L, pilot_steps / 200);
  const Trajectory pilot = integrate_flow(sys, z0, u_opt, pilot_cfg, pilot_T);
  const auto rep = convergence_report(pilot, z_hat, problem);
  out.pilot_rate = rep.rate;
  out.T = (rep.rate && *rep.rate > 0.0)
              ? std::max(pilot_T, horizon_for_reduction(*rep.rate, reduction))
              : pilot_T;
  for (int attempt = 0;; ++attempt) {
    out.trajectory = integrate_flow(sys, z0, u_opt, cfg, out.T, observer);
    out.final_ratio = W.norm(out.trajectory.states.back() - z_hat) / e0;
    if (out.final_ratio <= reduction || attempt == 6) break;
    out.T *= 1.5;
  }
  return out;
}

}  // namespace mphs::optimizer
