#pragma once

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "mphs/integrate.hpp"
#include "mphs/ocp.hpp"
#include "mphs/optimizer.hpp"
#include "mphs/phcore.hpp"
#include "mphs/system.hpp"

namespace mphs::closedloop {

/// M_p(x) = (R + J) x, R symmetric positive definite, J skew.
struct LinearPlant {
  Matrix R;
  Matrix J;  // empty means zero
};

/// M_p(x) = R x + kappa x^3 elementwise, kappa >= 0.
struct CubicPlant {
  Matrix R;
  double kappa = 0.0;
};

struct PlantSpec {
  std::variant<LinearPlant, CubicPlant> kind;
  Matrix B_p;
  Vector x_p0;

  Eigen::Index n_p() const { return B_p.rows(); }
};

struct PlantReport {
  ProbeReport probe;
  double c_p = 0.0;
};

inline MonotoneOperator plant_operator(const PlantSpec& spec) {
  const Eigen::Index n = spec.n_p();
  if (const auto* lin = std::get_if<LinearPlant>(&spec.kind)) {
    detail::require_dim(lin->R.rows(), n, "plant R rows");
    detail::require_dim(lin->R.cols(), n, "plant R cols");
    Matrix L = lin->R;
    if (lin->J.size() > 0) {
      detail::require_dim(lin->J.rows(), n, "plant J rows");
      detail::require_dim(lin->J.cols(), n, "plant J cols");
      if (!(lin->J + lin->J.transpose()).isZero(1e-12 * (1.0 + lin->J.norm()))) {
        throw InvalidParameter("plant: J must be skew-symmetric");
      }
      L += lin->J;
    }
    return MonotoneOperator::linear(std::move(L));
  }
  const auto& cub = std::get<CubicPlant>(spec.kind);
  detail::require_dim(cub.R.rows(), n, "plant R rows");
  detail::require_dim(cub.R.cols(), n, "plant R cols");
  if (!(cub.kappa >= 0.0)) throw InvalidParameter("plant: kappa must be >= 0");
  const Matrix R = cub.R;
  const double kappa = cub.kappa;
  return MonotoneOperator::nonlinear(
      n,
      [R, kappa](const Vector& x) -> Vector {
        return R * x + kappa * x.array().cube().matrix();
      },
      [R, kappa](const Vector& x) -> Matrix {
        Matrix D = R;
        D.diagonal() += 3.0 * kappa * x.array().square().matrix();
        return D;
      });
}

/// Euclidean pH plant with y_p = B_p^T x_p. Throws AccretivityViolation if
/// the seeded probe finds a negative gap.
inline PHSystem assemble_plant(const PlantSpec& spec, PlantReport* report = nullptr,
                               std::uint64_t seed = 0, int n_pairs = 200) {
  if (spec.n_p() < 1) throw DimensionMismatch("plant: B_p has no rows");
  detail::require_dim(spec.x_p0.size(), spec.n_p(), "plant x_p0");
  MonotoneOperator M = plant_operator(spec);
  PairSampler sampler(seed);
  const Metric metric = Metric::euclidean(spec.n_p());
  PlantReport rep;
  rep.probe = accretivity_probe(M, metric, sampler, n_pairs);
  PairSampler anchored(seed + 1);
  rep.c_p = accretivity_probe(M, metric, anchored, n_pairs,
                              Vector(Vector::Zero(spec.n_p())))
                .c_estimate;
  if (rep.probe.violation) {
    throw AccretivityViolation("plant: probe found gap " +
                               std::to_string(rep.probe.min_gap) + " < 0");
  }
  if (report) *report = rep;
  return PHSystem::euclidean(std::move(M), spec.B_p);
}

struct CouplingSpec {
  /// empty means 1/alpha
  std::optional<double> gamma;
};

struct ClosedLoopSystem {
  PHSystem system;  // state (x_p, x, u, lambda, lambda0)
  PHSystem plant;
  PHSystem optimizer;
  Matrix K;  // skew coupling block
  double gamma = 0.0;
  double alpha = 0.0;
  Eigen::Index n_p = 0;
  ocp::Layout layout;
  Matrix B;    // OCP input matrix
  Matrix B_p;  // plant input matrix
  std::vector<std::string> warnings;

  Eigen::Index lambda0_offset() const {
    return n_p + layout.primal() + layout.lambda0_offset();
  }
  /// input of the remaining open port (the optimizer f-port, held at zero)
  Vector closed_input() const { return Vector::Zero(system.input_dim()); }
};

/// Closes the loop  u_opt,1 = 0,  u_opt,2 = gamma B y_p,  u_p = -gamma B^T lambda0.
///
/// Built as interconnect(plant, optimizer, F = -gamma B^T) on the plant port
/// and the lambda0 block of the optimizer port.
inline ClosedLoopSystem couple(const PHSystem& opt_sys,
                               const PHSystem& plant_sys,
                               const ocp::DiscretizedOCP& problem,
                               const CouplingSpec& cspec) {
  const ocp::Layout& L = problem.layout;
  detail::require_dim(opt_sys.state_dim(), L.total(), "couple: optimizer state");
  detail::require_dim(opt_sys.input_dim(), L.dual(), "couple: optimizer port");
  detail::require_dim(plant_sys.input_dim(), L.m, "couple: plant port");
  const double gamma = cspec.gamma.value_or(1.0 / problem.cost.alpha);
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw InvalidParameter("couple: gamma must be >= 0");
  }

  ClosedLoopSystem cls;
  cls.gamma = gamma;
  cls.alpha = problem.cost.alpha;
  cls.n_p = plant_sys.state_dim();
  cls.layout = L;
  cls.B = problem.model.B;
  cls.B_p = plant_sys.B;
  if (cls.n_p != L.n) {
    throw DimensionMismatch("couple: plant dimension " +
                            std::to_string(cls.n_p) +
                            " differs from OCP state dimension " +
                            std::to_string(L.n));
  }
  if ((cls.B_p - cls.B).cwiseAbs().maxCoeff() > 1e-14) {
    cls.warnings.push_back("plant B_p differs from OCP B (model mismatch)");
  }

  PortSplit plant_split;
  for (Eigen::Index j = 0; j < L.m; ++j) plant_split.coupled.push_back(j);
  PortSplit opt_split;
  for (Eigen::Index j = 0; j < L.n; ++j) {
    opt_split.coupled.push_back(L.lambda0_offset() + j);
  }
  const Matrix F = -gamma * problem.model.B.transpose();
  cls.K = coupling_operator(plant_sys, opt_sys, F, plant_split, opt_split);
  cls.system = interconnect(plant_sys, opt_sys, F, plant_split, opt_split);
  cls.plant = plant_sys;
  cls.optimizer = opt_sys;
  return cls;
}

/// (x_p0, default optimizer state with x0 replaced by x_p0).
inline Vector initial_state(const ClosedLoopSystem& cls,
                            const ocp::DiscretizedOCP& problem,
                            const Vector& x_p0) {
  detail::require_dim(x_p0.size(), cls.n_p, "closed loop x_p0");
  ocp::DiscretizedOCP shifted = problem;
  shifted.model.x0 = x_p0;
  const Vector z0 = ocp::default_initial_state(shifted);
  Vector s(cls.n_p + z0.size());
  s << x_p0, z0;
  return s;
}

struct FeedbackSeries {
  std::vector<double> times;
  std::vector<Vector> u_p;  // -gamma B^T lambda0
  std::vector<Vector> mpc;  // -(1/alpha) B^T lambda at the first interval
};

inline Vector feedback_at(const ClosedLoopSystem& cls, const Vector& s) {
  return -cls.gamma * cls.B.transpose() *
         s.segment(cls.lambda0_offset(), cls.layout.n);
}

inline FeedbackSeries feedback_extract(const ClosedLoopSystem& cls,
                                       const Trajectory& traj) {
  FeedbackSeries fb;
  const Eigen::Index lam1 =
      cls.n_p + cls.layout.primal() + cls.layout.lambda_offset(1);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const Vector& s = traj.states[k];
    detail::require_dim(s.size(), cls.system.state_dim(), "feedback state");
    fb.times.push_back(traj.times[k]);
    fb.u_p.push_back(feedback_at(cls, s));
    fb.mpc.push_back(-(1.0 / cls.alpha) * cls.B.transpose() *
                     s.segment(lam1, cls.layout.n));
  }
  return fb;
}

struct ClosedLoopRun {
  Trajectory trajectory;
  FeedbackSeries feedback;
};

inline ClosedLoopRun simulate_closed_loop(const ClosedLoopSystem& cls,
                                          const Vector& s0,
                                          const IntegratorConfig& cfg, double T,
                                          const StepObserver& observer = {}) {
  ClosedLoopRun run;
  run.trajectory =
      integrate(cls.system, s0, cls.closed_input(), cfg, T, observer);
  run.feedback = feedback_extract(cls, run.trajectory);
  return run;
}

/// Norms of the plant block, the optimizer block and the whole state.
struct BlockNorms {
  double total = 0.0;
  double plant = 0.0;
  double optimizer = 0.0;
};

inline BlockNorms block_norms(const ClosedLoopSystem& cls, const Vector& s) {
  const Metric& W = cls.system.metric;
  BlockNorms b;
  b.total = W.norm(s);
  b.plant = W.segment(0, cls.n_p).norm(s.head(cls.n_p));
  const Eigen::Index nz = s.size() - cls.n_p;
  b.optimizer = W.segment(cls.n_p, nz).norm(s.tail(nz));
  return b;
}

}  // namespace mphs::closedloop
