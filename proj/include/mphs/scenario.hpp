#pragma once

// Scenario runner behind the mphs_cli tool. Needs nlohmann/json and
// OpenSSL libcrypto in addition to Eigen.

#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mphs/analysis.hpp"
#include "mphs/closedloop.hpp"
#include "mphs/csv.hpp"
#include "mphs/ocp.hpp"
#include "mphs/optimizer.hpp"
#include "mphs/phcore.hpp"

namespace mphs::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "1.0.0";

enum class Mode { solve, flow, closedloop, audit, spectrum };

inline Mode mode_from_string(const std::string& s) {
  if (s == "solve") return Mode::solve;
  if (s == "flow") return Mode::flow;
  if (s == "closedloop") return Mode::closedloop;
  if (s == "audit") return Mode::audit;
  if (s == "spectrum") return Mode::spectrum;
  throw ConfigError("mode: unknown mode '" + s + "'");
}

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::solve: return "solve";
    case Mode::flow: return "flow";
    case Mode::closedloop: return "closedloop";
    case Mode::audit: return "audit";
    case Mode::spectrum: return "spectrum";
  }
  return "?";
}

struct IntegratorSettings {
  Scheme scheme = Scheme::implicit_midpoint;
  std::optional<double> h_t;  // empty: default_step
  std::optional<double> T;    // empty: chosen by the runner
  double newton_tol = 1e-12;
  std::optional<long> record_every;
};

struct ScenarioConfig {
  std::optional<Mode> mode;
  ocp::Grid grid;
  ocp::LinearPlantModel model;
  ocp::CostSpec cost;
  std::optional<closedloop::PlantSpec> plant;
  closedloop::CouplingSpec coupling;
  IntegratorSettings integrator;
  std::string out_dir;
  bool full_state = false;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline void check_keys(const json& obj, const std::string& path,
                       const std::set<std::string>& allowed) {
  if (!obj.is_object()) {
    throw ConfigError((path.empty() ? "<root>" : path) + ": expected an object");
  }
  for (const auto& [k, v] : obj.items()) {
    if (!allowed.count(k)) {
      throw ConfigError(join(path, k) + ": unknown field");
    }
  }
}

inline const json& need(const json& obj, const std::string& path,
                        const std::string& key) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ConfigError(join(path, key) + ": missing field");
  return *it;
}

inline double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ConfigError(path + ": must be finite");
  return v;
}

inline Vector vector(const json& j, const std::string& path,
                     std::optional<Eigen::Index> len = {}) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    v[static_cast<Eigen::Index>(i)] =
        number(j[i], path + "[" + std::to_string(i) + "]");
  }
  if (len && v.size() != *len) {
    throw ConfigError(path + ": expected length " + std::to_string(*len) +
                      ", got " + std::to_string(v.size()));
  }
  return v;
}

/// Row-major nested arrays.
inline Matrix matrix(const json& j, const std::string& path,
                     std::optional<Eigen::Index> rows = {},
                     std::optional<Eigen::Index> cols = {}) {
  if (!j.is_array() || j.empty()) {
    throw ConfigError(path + ": expected a non-empty array of rows");
  }
  const auto r = static_cast<Eigen::Index>(j.size());
  const Vector first = vector(j[0], path + "[0]");
  const Eigen::Index c = first.size();
  Matrix M(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    M.row(i) = vector(j[i], path + "[" + std::to_string(i) + "]", c);
  }
  if (rows && r != *rows) {
    throw ConfigError(path + ": expected " + std::to_string(*rows) +
                      " rows, got " + std::to_string(r));
  }
  if (cols && c != *cols) {
    throw ConfigError(path + ": expected " + std::to_string(*cols) +
                      " columns, got " + std::to_string(c));
  }
  return M;
}

inline std::string location(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

inline ScenarioConfig parse_config(const json& root) {
  using namespace detail;
  ScenarioConfig cfg;
  check_keys(root, "", {"mode", "ocp", "plant", "coupling", "integrator",
                        "output", "seed"});
  if (root.contains("mode")) {
    if (!root["mode"].is_string()) throw ConfigError("mode: expected a string");
    cfg.mode = mode_from_string(root["mode"].get<std::string>());
  }

  const json& o = need(root, "", "ocp");
  check_keys(o, "ocp", {"t_f", "N", "A", "B", "f", "x0", "cost"});
  const double t_f = number(need(o, "ocp", "t_f"), "ocp.t_f");
  if (!(t_f > 0.0)) throw ConfigError("ocp.t_f: must be > 0");
  const json& jN = need(o, "ocp", "N");
  if (!jN.is_number_integer()) throw ConfigError("ocp.N: expected an integer");
  const long N = jN.get<long>();
  if (N < 2) throw ConfigError("ocp.N: must be >= 2");
  if (N > 100000) throw ConfigError("ocp.N: must be <= 100000");
  cfg.grid = ocp::build_grid(t_f, static_cast<int>(N));

  cfg.model.A = matrix(need(o, "ocp", "A"), "ocp.A");
  const Eigen::Index n = cfg.model.A.rows();
  if (cfg.model.A.cols() != n) throw ConfigError("ocp.A: must be square");
  cfg.model.B = matrix(need(o, "ocp", "B"), "ocp.B", n);
  const Eigen::Index m = cfg.model.B.cols();
  cfg.model.x0 = vector(need(o, "ocp", "x0"), "ocp.x0", n);
  cfg.model.f = Matrix::Zero(n, N + 1);
  if (o.contains("f")) {
    const json& jf = o["f"];
    if (jf.is_array() && !jf.empty() && jf[0].is_array()) {
      cfg.model.f = matrix(jf, "ocp.f", N + 1, n).transpose();
    } else {
      const Vector fc = vector(jf, "ocp.f", n);
      cfg.model.f = fc.replicate(1, N + 1);
    }
  }

  const json& c = need(o, "ocp", "cost");
  check_keys(c, "ocp.cost", {"alpha", "stage"});
  cfg.cost.alpha = number(need(c, "ocp.cost", "alpha"), "ocp.cost.alpha");
  if (!(cfg.cost.alpha > 0.0)) throw ConfigError("ocp.cost.alpha: must be > 0");
  const json& st = need(c, "ocp.cost", "stage");
  const std::string sp = "ocp.cost.stage";
  if (!st.is_object()) throw ConfigError(sp + ": expected an object");
  const json& kind = need(st, sp, "kind");
  if (!kind.is_string()) throw ConfigError(sp + ".kind: expected a string");
  if (kind == "quadratic") {
    check_keys(st, sp, {"kind", "Q", "q"});
    ocp::QuadraticStage qs;
    qs.Q = matrix(need(st, sp, "Q"), sp + ".Q", n, n);
    qs.q = st.contains("q") ? vector(st["q"], sp + ".q", n) : Vector::Zero(n);
    if (!qs.Q.isApprox(qs.Q.transpose(), 1e-12)) {
      throw ConfigError(sp + ".Q: must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(qs.Q, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-12 * (1.0 + qs.Q.norm())) {
      throw ConfigError(sp + ".Q: must be positive semidefinite");
    }
    cfg.cost.stage = qs;
  } else if (kind == "logcosh") {
    check_keys(st, sp, {"kind", "scale"});
    ocp::LogCoshStage lc;
    lc.scale = st.contains("scale") ? number(st["scale"], sp + ".scale") : 1.0;
    if (!(lc.scale > 0.0)) throw ConfigError(sp + ".scale: must be > 0");
    cfg.cost.stage = lc;
  } else {
    throw ConfigError(sp + ".kind: expected 'quadratic' or 'logcosh'");
  }

  if (root.contains("plant")) {
    const json& p = root["plant"];
    check_keys(p, "plant", {"kind", "R", "J", "kappa", "B_p", "x_p0"});
    const json& pk = need(p, "plant", "kind");
    closedloop::PlantSpec ps;
    ps.B_p = matrix(need(p, "plant", "B_p"), "plant.B_p");
    const Eigen::Index np = ps.B_p.rows();
    ps.x_p0 = vector(need(p, "plant", "x_p0"), "plant.x_p0", np);
    const Matrix R = matrix(need(p, "plant", "R"), "plant.R", np, np);
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (R + R.transpose()),
                                             Eigen::EigenvaluesOnly);
    if (!R.isApprox(R.transpose(), 1e-12) || !(es.eigenvalues().minCoeff() > 0.0)) {
      throw ConfigError("plant.R: must be symmetric positive definite");
    }
    if (pk == "linear") {
      if (p.contains("kappa")) throw ConfigError("plant.kappa: only for kind 'cubic'");
      closedloop::LinearPlant lp{R, Matrix()};
      if (p.contains("J")) {
        lp.J = matrix(p["J"], "plant.J", np, np);
        if (!(lp.J + lp.J.transpose()).isZero(1e-12 * (1.0 + lp.J.norm()))) {
          throw ConfigError("plant.J: must be skew-symmetric");
        }
      }
      ps.kind = lp;
    } else if (pk == "cubic") {
      if (p.contains("J")) throw ConfigError("plant.J: only for kind 'linear'");
      closedloop::CubicPlant cp{R, number(need(p, "plant", "kappa"), "plant.kappa")};
      if (!(cp.kappa >= 0.0)) throw ConfigError("plant.kappa: must be >= 0");
      ps.kind = cp;
    } else {
      throw ConfigError("plant.kind: expected 'linear' or 'cubic'");
    }
    if (np != n) {
      throw ConfigError("plant.B_p: plant dimension " + std::to_string(np) +
                        " must equal the OCP state dimension " +
                        std::to_string(n));
    }
    if (ps.B_p.cols() != m) {
      throw ConfigError("plant.B_p: expected " + std::to_string(m) +
                        " columns to match ocp.B");
    }
    cfg.plant = ps;
  }

  if (root.contains("coupling")) {
    const json& cp = root["coupling"];
    check_keys(cp, "coupling", {"gamma"});
    if (cp.contains("gamma")) {
      const json& g = cp["gamma"];
      if (g.is_string()) {
        if (g != "inv_alpha") {
          throw ConfigError("coupling.gamma: expected a number or \"inv_alpha\"");
        }
      } else {
        const double gamma = number(g, "coupling.gamma");
        if (!(gamma > 0.0)) throw ConfigError("coupling.gamma: must be > 0");
        cfg.coupling.gamma = gamma;
      }
    }
  }

  if (root.contains("integrator")) {
    const json& ig = root["integrator"];
    check_keys(ig, "integrator",
               {"scheme", "h_t", "T", "newton_tol", "record_every"});
    if (ig.contains("scheme")) {
      if (!ig["scheme"].is_string()) {
        throw ConfigError("integrator.scheme: expected a string");
      }
      try {
        cfg.integrator.scheme = scheme_from_string(ig["scheme"].get<std::string>());
      } catch (const InvalidParameter&) {
        throw ConfigError(
            "integrator.scheme: expected implicit_midpoint, implicit_euler or rk4");
      }
    }
    auto positive_or_auto = [&](const char* key) -> std::optional<double> {
      if (!ig.contains(key)) return std::nullopt;
      const std::string path = std::string("integrator.") + key;
      if (ig[key].is_string() && ig[key] == "auto") return std::nullopt;
      const double v = number(ig[key], path);
      if (!(v > 0.0)) throw ConfigError(path + ": must be > 0");
      return v;
    };
    cfg.integrator.h_t = positive_or_auto("h_t");
    cfg.integrator.T = positive_or_auto("T");
    if (ig.contains("newton_tol")) {
      cfg.integrator.newton_tol =
          number(ig["newton_tol"], "integrator.newton_tol");
      if (!(cfg.integrator.newton_tol > 0.0)) {
        throw ConfigError("integrator.newton_tol: must be > 0");
      }
    }
    if (ig.contains("record_every")) {
      if (!ig["record_every"].is_number_integer() ||
          ig["record_every"].get<long>() < 1) {
        throw ConfigError("integrator.record_every: expected an integer >= 1");
      }
      cfg.integrator.record_every = ig["record_every"].get<long>();
    }
  }

  if (root.contains("output")) {
    const json& out = root["output"];
    check_keys(out, "output", {"dir", "full_state"});
    if (out.contains("dir")) {
      if (!out["dir"].is_string()) throw ConfigError("output.dir: expected a string");
      cfg.out_dir = out["dir"].get<std::string>();
    }
    if (out.contains("full_state")) {
      if (!out["full_state"].is_boolean()) {
        throw ConfigError("output.full_state: expected true or false");
      }
      cfg.full_state = out["full_state"].get<bool>();
    }
  }
  if (root.contains("seed")) {
    if (!root["seed"].is_number_unsigned()) {
      throw ConfigError("seed: expected a non-negative integer");
    }
    cfg.seed = root["seed"].get<std::uint64_t>();
  }
  return cfg;
}

/// Reads and validates a config file; syntax errors carry line and column,
/// schema errors the field path.
inline ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + detail::location(text, e.byte) +
                      ": syntax error: " + e.what());
  }
  try {
    return parse_config(root);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Output helpers

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read '" + path + "' for checksum");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0')
        << static_cast<int>(md[i]);
  }
  return hex.str();
}

/// `key: value` lines grouped under `[section]` headers.
class Report {
 public:
  void section(const std::string& name) { sections_.push_back({name, {}}); }

  void put(const std::string& key, const std::string& value) {
    if (sections_.empty()) section("general");
    sections_.back().second.emplace_back(key, value);
  }
  void put(const std::string& key, double v) { put(key, csv::format_double(v)); }
  void put(const std::string& key, bool v) { put(key, std::string(v ? "true" : "false")); }
  void put(const std::string& key, long v) { put(key, std::to_string(v)); }
  void put(const std::string& key, int v) { put(key, std::to_string(v)); }
  void put(const std::string& key, const char* v) { put(key, std::string(v)); }

  std::string str() const {
    std::ostringstream os;
    for (std::size_t s = 0; s < sections_.size(); ++s) {
      if (s) os << '\n';
      os << '[' << sections_[s].first << "]\n";
      for (const auto& [k, v] : sections_[s].second) os << k << ": " << v << '\n';
    }
    return os.str();
  }

 private:
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>>
      sections_;
};

struct RunContext {
  fs::path out;
  std::vector<std::string> files;
  std::ostream* log = nullptr;

  std::string path(const std::string& name) {
    files.push_back(name);
    return (out / name).string();
  }
  void note(const std::string& msg) const {
    if (log) *log << msg << '\n';
  }
};

inline void write_text(RunContext& ctx, const std::string& name,
                       const std::string& text) {
  std::ofstream f(ctx.path(name), std::ios::binary);
  f << text;
  if (!f) throw FormatError("write to '" + name + "' failed");
}

inline json config_echo(const ScenarioConfig& c, Mode mode) {
  auto mat = [](const Matrix& M) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
      json r = json::array();
      for (Eigen::Index j = 0; j < M.cols(); ++j) r.push_back(M(i, j));
      rows.push_back(r);
    }
    return rows;
  };
  auto vec = [](const Vector& v) {
    return json(std::vector<double>(v.data(), v.data() + v.size()));
  };
  json j;
  j["mode"] = to_string(mode);
  j["ocp"] = {{"t_f", c.grid.t_f},
              {"N", c.grid.N},
              {"A", mat(c.model.A)},
              {"B", mat(c.model.B)},
              {"f", mat(c.model.f.transpose())},
              {"x0", vec(c.model.x0)}};
  json stage;
  if (const auto* qs = std::get_if<ocp::QuadraticStage>(&c.cost.stage)) {
    stage = {{"kind", "quadratic"}, {"Q", mat(qs->Q)}, {"q", vec(qs->q)}};
  } else {
    stage = {{"kind", "logcosh"},
             {"scale", std::get<ocp::LogCoshStage>(c.cost.stage).scale}};
  }
  j["ocp"]["cost"] = {{"alpha", c.cost.alpha}, {"stage", stage}};
  if (c.plant) {
    json p;
    if (const auto* lp = std::get_if<closedloop::LinearPlant>(&c.plant->kind)) {
      p = {{"kind", "linear"}, {"R", mat(lp->R)}};
      if (lp->J.size() > 0) p["J"] = mat(lp->J);
    } else {
      const auto& cp = std::get<closedloop::CubicPlant>(c.plant->kind);
      p = {{"kind", "cubic"}, {"R", mat(cp.R)}, {"kappa", cp.kappa}};
    }
    p["B_p"] = mat(c.plant->B_p);
    p["x_p0"] = vec(c.plant->x_p0);
    j["plant"] = p;
  }
  j["coupling"]["gamma"] =
      c.coupling.gamma ? json(*c.coupling.gamma) : json("inv_alpha");
  j["integrator"] = {{"scheme", mphs::to_string(c.integrator.scheme)},
                     {"newton_tol", c.integrator.newton_tol}};
  j["integrator"]["h_t"] = c.integrator.h_t ? json(*c.integrator.h_t) : json("auto");
  j["integrator"]["T"] = c.integrator.T ? json(*c.integrator.T) : json("auto");
  if (c.integrator.record_every) {
    j["integrator"]["record_every"] = *c.integrator.record_every;
  }
  j["output"] = {{"dir", c.out_dir}, {"full_state", c.full_state}};
  j["seed"] = c.seed;
  return j;
}

// ---------------------------------------------------------------------------
// Modes

namespace detail {

inline IntegratorConfig integrator_config(const ScenarioConfig& c,
                                          const ocp::DiscretizedOCP& P) {
  IntegratorConfig ic;
  ic.scheme = c.integrator.scheme;
  ic.h_t = c.integrator.h_t.value_or(optimizer::default_step(P));
  ic.newton_tol = c.integrator.newton_tol;
  return ic;
}

inline long auto_record_every(double T, double h) {
  const long steps = static_cast<long>(std::ceil(T / h - 1e-12));
  return std::max(1L, steps / 2000);
}

/// Per-step power defect keyed by the step end time; restarts overwrite.
struct DefectLog {
  std::map<double, double> by_time;
  double last_t = -1.0;

  StepObserver observer(const PHSystem& sys, const Vector& u) {
    return [this, &sys, u](double t, const Vector& a, const Vector& b) {
      if (t <= last_t) by_time.clear();
      last_t = t;
      const double h = by_time.empty() ? t : t - by_time.rbegin()->first;
      by_time[t] = mphs::detail::step_power_defect(sys, a, b, u, h);
    };
  }
  double at(double t) const {
    const auto it = by_time.find(t);
    return it == by_time.end() ? 0.0 : it->second;
  }
  double max() const {
    double m = 0.0;
    for (const auto& [t, d] : by_time) m = std::max(m, d);
    return m;
  }
};

inline void write_full_state(RunContext& ctx, const std::string& name,
                             const Trajectory& traj) {
  csv::Table t;
  t.header.push_back("t");
  const Eigen::Index d = traj.states.front().size();
  for (Eigen::Index j = 1; j <= d; ++j) t.header.push_back("s_" + std::to_string(j));
  for (std::size_t k = 0; k < traj.size(); ++k) {
    std::vector<double> row{traj.times[k]};
    row.insert(row.end(), traj.states[k].data(), traj.states[k].data() + d);
    t.rows.push_back(std::move(row));
  }
  csv::write(ctx.path(name), t);
}

inline std::string opt_num(const std::optional<double>& v) {
  return v ? csv::format_double(*v) : std::string("indeterminate");
}

}  // namespace detail

inline void run_solve(const ScenarioConfig& c, const ocp::DiscretizedOCP& P,
                      RunContext& ctx) {
  const Vector zh = ocp::kkt_solve(P, 1e-8);
  const auto res = ocp::kkt_residual(P, zh);
  const auto s = ocp::OptimizerState::unstack(zh, P.layout);
  csv::write(ctx.path("kkt.csv"), csv::kkt_table(P, s));
  Report r;
  r.section("kkt");
  r.put("dimension", static_cast<long>(P.layout.total()));
  r.put("residual_norm", res.norm);
  r.put("residual_primal", P.primal.norm(res.residual.head(P.layout.primal())));
  r.put("residual_dual", P.dual.norm(res.residual.tail(P.layout.dual())));
  r.put("cost", ocp::cost_and_gradient(P.cost, P.grid, s.primal).J);
  r.put("within_tolerance", res.norm <= 1e-8);
  write_text(ctx, "report.txt", r.str());
  ctx.note("kkt residual " + csv::format_double(res.norm));
  (void)c;
}

inline void run_flow(const ScenarioConfig& c, const ocp::DiscretizedOCP& P,
                     RunContext& ctx) {
  const Vector zh = ocp::kkt_solve(P, 1e-8);
  const PHSystem sys = optimizer::assemble_optimizer(P);
  const Vector z0 = ocp::default_initial_state(P);
  const Vector u = optimizer::flow_input(P);
  IntegratorConfig ic = detail::integrator_config(c, P);
  detail::DefectLog defects;
  Trajectory traj;
  double T = 0.0;
  if (c.integrator.T) {
    T = *c.integrator.T;
    ic.record_every = c.integrator.record_every.value_or(
        detail::auto_record_every(T, ic.h_t));
    traj = optimizer::integrate_flow(sys, z0, u, ic, T,
                                     defects.observer(sys, u));
  } else {
    // record density is fixed after the pilot fixes the horizon
    IntegratorConfig probe = ic;
    probe.record_every = std::max(1L, static_cast<long>(10.0 / ic.h_t) / 200);
    const auto pilot = optimizer::convergence_report(
        optimizer::integrate_flow(sys, z0, u, probe, 10.0), zh, P);
    double T_guess = 10.0;
    if (pilot.rate && *pilot.rate > 0.0) {
      T_guess = std::max(10.0, optimizer::horizon_for_reduction(*pilot.rate, 1e-6));
    }
    ic.record_every = c.integrator.record_every.value_or(
        detail::auto_record_every(T_guess, ic.h_t));
    auto run = optimizer::run_to_reduction(sys, z0, u, zh, P, ic, 1e-6, 10.0,
                                           defects.observer(sys, u));
    traj = std::move(run.trajectory);
    T = run.T;
  }
  const double c1 = optimizer::primal_accretivity_constant(P, zh, c.seed);
  const auto rep = optimizer::convergence_report(traj, zh, P, c1);

  csv::Table t;
  t.header = {"t", "err_total", "err_primal", "err_dual", "power_residual"};
  for (std::size_t k = 0; k < traj.size(); ++k) {
    t.rows.push_back({rep.times[k], rep.err_total[k], rep.err_primal[k],
                      rep.err_dual[k], defects.at(traj.times[k])});
  }
  csv::write(ctx.path("trajectory.csv"), t);
  if (c.full_state) detail::write_full_state(ctx, "state.csv", traj);

  Report r;
  r.section("flow");
  r.put("scheme", mphs::to_string(ic.scheme));
  r.put("h_t", ic.h_t);
  r.put("T", T);
  r.put("samples", static_cast<long>(traj.size()));
  r.put("power_residual_max", defects.max());
  r.section("convergence");
  r.put("initial_error", rep.err_total.front());
  r.put("final_error", rep.err_total.back());
  r.put("final_ratio", rep.err_total.back() / rep.err_total.front());
  r.put("rate", detail::opt_num(rep.rate));
  r.put("amplitude", rep.amplitude);
  r.put("initial_dual_error", rep.initial_dual_error);
  r.put("c1_probe", c1);
  r.put("primal_bound_satisfied", rep.primal_bound_satisfied);
  r.put("primal_bound_worst_ratio", rep.primal_bound_worst_ratio);
  r.put("primal_norm_bounded", rep.primal_norm_bounded);
  write_text(ctx, "report.txt", r.str());
  ctx.note("flow final ratio " +
           csv::format_double(rep.err_total.back() / rep.err_total.front()));
}

inline void run_closedloop(const ScenarioConfig& c,
                           const ocp::DiscretizedOCP& P, RunContext& ctx) {
  if (!c.plant) throw ConfigError("plant: required in closedloop mode");
  closedloop::PlantReport prep;
  PHSystem plant;
  try {
    plant = closedloop::assemble_plant(*c.plant, &prep, c.seed);
  } catch (const AccretivityViolation& e) {
    throw ConfigError(std::string("plant: ") + e.what());
  }
  const PHSystem opt = optimizer::assemble_optimizer(P);
  const auto cls = closedloop::couple(opt, plant, P, c.coupling);
  for (const auto& w : cls.warnings) ctx.note("warning: " + w);
  const Vector s0 = closedloop::initial_state(cls, P, c.plant->x_p0);
  IntegratorConfig ic = detail::integrator_config(c, P);
  const Vector u0 = cls.closed_input();

  // fixed T, or chunks of 10 until the norm has dropped by 1e-6
  const double chunk = c.integrator.T.value_or(10.0);
  ic.record_every = c.integrator.record_every.value_or(
      detail::auto_record_every(chunk, ic.h_t));
  const double n0 = closedloop::block_norms(cls, s0).total;
  Trajectory traj;
  std::vector<double> defect_at;
  double max_increase = 0.0;
  Vector s = s0;
  double t_off = 0.0;
  for (int piece = 0;; ++piece) {
    detail::DefectLog defects;
    auto obs = defects.observer(cls.system, u0);
    const StepObserver both = [&](double t, const Vector& a, const Vector& b) {
      obs(t, a, b);
      max_increase = std::max(
          max_increase, cls.system.metric.norm(b) - cls.system.metric.norm(a));
    };
    const Trajectory seg = integrate(cls.system, s, u0, ic, chunk, both);
    for (std::size_t k = (piece == 0 ? 0 : 1); k < seg.size(); ++k) {
      traj.push_back(t_off + seg.times[k], seg.states[k], seg.inputs[k]);
      defect_at.push_back(defects.at(seg.times[k]));
    }
    s = seg.states.back();
    t_off += chunk;
    if (c.integrator.T) break;
    if (n0 == 0.0 || closedloop::block_norms(cls, s).total <= 1e-6 * n0) break;
    if (t_off >= 1000.0) {
      throw NonConvergence("closedloop: norm did not drop by 1e-6 within t = 1000");
    }
  }
  const auto fb = closedloop::feedback_extract(cls, traj);

  csv::Table t;
  t.header.push_back("t");
  for (Eigen::Index j = 1; j <= cls.n_p; ++j) t.header.push_back("xp_" + std::to_string(j));
  for (Eigen::Index j = 1; j <= cls.layout.m; ++j) {
    t.header.push_back("up_" + std::to_string(j));
  }
  for (const char* h : {"norm_total", "norm_plant", "norm_optimizer", "power_residual"}) {
    t.header.push_back(h);
  }
  std::vector<double> tt, nt;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const Vector& x = traj.states[k];
    const auto bn = closedloop::block_norms(cls, x);
    std::vector<double> row{traj.times[k]};
    row.insert(row.end(), x.data(), x.data() + cls.n_p);
    row.insert(row.end(), fb.u_p[k].data(), fb.u_p[k].data() + fb.u_p[k].size());
    row.insert(row.end(), {bn.total, bn.plant, bn.optimizer, defect_at[k]});
    t.rows.push_back(std::move(row));
    if (bn.total > 0.0) {
      tt.push_back(traj.times[k]);
      nt.push_back(bn.total);
    }
  }
  csv::write(ctx.path("closedloop.csv"), t);
  if (c.full_state) detail::write_full_state(ctx, "state.csv", traj);

  Report r;
  r.section("closedloop");
  r.put("gamma", cls.gamma);
  r.put("alpha", cls.alpha);
  r.put("c_p_probe", prep.c_p);
  r.put("plant_probe_violation", prep.probe.violation);
  r.put("hypothesis_c_p_positive", prep.c_p > 0.0);
  bool centered = true;
  if (const auto* qs = std::get_if<ocp::QuadraticStage>(&P.cost.stage)) {
    centered = qs->q.isZero(0.0);
  }
  r.put("hypothesis_cost_centered_at_origin", centered);
  r.put("warnings", static_cast<long>(cls.warnings.size()));
  r.put("T", traj.times.back());
  r.put("initial_norm", n0);
  const auto bn_end = closedloop::block_norms(cls, traj.states.back());
  r.put("final_norm", bn_end.total);
  r.put("final_ratio", n0 > 0.0 ? bn_end.total / n0 : 0.0);
  r.put("final_plant_norm", bn_end.plant);
  r.put("final_optimizer_norm", bn_end.optimizer);
  r.put("max_norm_increase_per_step", max_increase);
  if (tt.size() >= 20) {
    const std::size_t st = tt.size() / 2;
    const auto fit = analysis::decay_fit({tt.begin() + st, tt.end()},
                                         {nt.begin() + st, nt.end()});
    r.put("tail_rate", fit.c_fit);
  } else {
    r.put("tail_rate", "indeterminate");
  }
  write_text(ctx, "report.txt", r.str());
  ctx.note("closed-loop final ratio " +
           csv::format_double(n0 > 0.0 ? bn_end.total / n0 : 0.0));
}

inline void run_audit(const ScenarioConfig& c, const ocp::DiscretizedOCP& P,
                      RunContext& ctx) {
  const ocp::Layout& L = P.layout;
  const Vector zh = ocp::kkt_solve(P, 1e-8);
  const PHSystem sys = optimizer::assemble_optimizer(P);
  const Vector z0 = ocp::default_initial_state(P);
  const Vector u = optimizer::flow_input(P);
  IntegratorConfig ic = detail::integrator_config(c, P);
  const double T = c.integrator.T.value_or(2.0);
  ic.record_every = 1;
  double max_increase = 0.0;
  const Metric W = sys.metric;
  const Trajectory traj = optimizer::integrate_flow(
      sys, z0, u, ic, T, [&](double, const Vector& a, const Vector& b) {
        max_increase = std::max(max_increase, W.norm(b - zh) - W.norm(a - zh));
      });
  const auto pb = power_balance_audit(sys, traj);
  SteadyStatePair ss{zh, u, sys.output(zh), 0.0};
  const auto sp = shifted_passivity_audit(sys, traj, ss);

  Report r;
  r.section("power_balance");
  r.put("scheme", mphs::to_string(ic.scheme));
  r.put("h_t", ic.h_t);
  r.put("T", T);
  r.put("intervals", static_cast<long>(pb.residual.size()));
  r.put("max_residual", pb.max_abs);
  r.put("bound", 1e-10 * (1.0 + W.norm_squared(z0)));
  r.put("linear_operator", sys.M.is_affine());
  r.section("passivity");
  r.put("max_equality_residual", sp.max_equality);
  r.put("max_inequality_violation", sp.max_violation);
  r.put("max_shifted_norm_increase", max_increase);

  r.section("monotonicity");
  int violations = 0;
  double min_gap = std::numeric_limits<double>::infinity();
  for (std::uint64_t s = c.seed; s < c.seed + 10; ++s) {
    PairSampler sampler(s);
    const auto pr = accretivity_probe(sys.M, W, sampler, 100);
    violations += pr.violation ? 1 : 0;
    min_gap = std::min(min_gap, pr.min_gap);
  }
  r.put("probe_seeds", 10);
  r.put("probe_violations", violations);
  r.put("probe_min_gap", min_gap);
  PairSampler sampler(c.seed);
  double alpha_gap = std::numeric_limits<double>::infinity();
  double skew = 0.0, duality = 0.0;
  const Metric Wu = P.primal;
  for (int k = 0; k < 1000; ++k) {
    const Vector a = sampler.sample(L.total());
    const Vector b = sampler.sample(L.total());
    const Vector d = a - b;
    Vector du = Vector::Zero(L.primal());
    du.segment(L.nx(), L.nu()) = d.segment(L.nx(), L.nu());
    alpha_gap = std::min(alpha_gap, W.inner(sys.M(a) - sys.M(b), d) -
                                        P.cost.alpha * Wu.norm_squared(du));
  }
  for (int k = 0; k < 100; ++k) {
    const Vector z = sampler.sample(L.total());
    Vector Kz(L.total());
    Kz.head(L.primal()) = ocp::adjoint_apply(P, Vector(z.tail(L.dual())));
    Kz.tail(L.dual()) = -ocp::constraint_apply(P, Vector(z.head(L.primal())));
    skew = std::max(skew, std::abs(W.inner(Kz, z)) / W.norm_squared(z));
    const Vector zp = z.head(L.primal());
    const Vector w = z.tail(L.dual());
    duality = std::max(duality,
                       std::abs(P.dual.inner(ocp::constraint_apply(P, zp), w) -
                                P.primal.inner(zp, ocp::adjoint_apply(P, w))));
  }
  r.put("alpha_gap_min", alpha_gap);
  r.put("skew_form_max_relative", skew);
  r.put("duality_defect_max", duality);

  if (c.plant) {
    closedloop::PlantReport prep;
    try {
      const PHSystem plant = closedloop::assemble_plant(*c.plant, &prep, c.seed);
      const auto cls = closedloop::couple(sys, plant, P, c.coupling);
      r.section("closedloop");
      r.put("c_p_probe", prep.c_p);
      PairSampler cs(c.seed);
      const auto pr = accretivity_probe(cls.system.M, cls.system.metric, cs, 200);
      r.put("probe_violation", pr.violation);
      r.put("probe_min_gap", pr.min_gap);
      double kskew = 0.0;
      for (int k = 0; k < 100; ++k) {
        const Vector z = cs.sample(cls.system.state_dim());
        kskew = std::max(kskew, std::abs(cls.system.metric.inner(cls.K * z, z)) /
                                    cls.system.metric.norm_squared(z));
      }
      r.put("coupling_skew_max_relative", kskew);
    } catch (const AccretivityViolation& e) {
      throw ConfigError(std::string("plant: ") + e.what());
    }
  }
  write_text(ctx, "report.txt", r.str());
  ctx.note("audit power residual " + csv::format_double(pb.max_abs));
}

inline void run_spectrum(const ScenarioConfig& c, const ocp::DiscretizedOCP& P,
                         RunContext& ctx) {
  const ocp::Layout& L = P.layout;
  const Vector zh = ocp::kkt_solve(P, 1e-8);
  const PHSystem sys = optimizer::assemble_optimizer(P);
  const auto lin = analysis::linearize(sys.M, zh, L.primal(), sys.metric);
  Report r;
  r.section("spectrum");
  r.put("dimension", static_cast<long>(L.total()));
  const double abscissa = analysis::spectral_abscissa(lin.DM);
  r.put("abscissa", abscissa);
  r.put("exponentially_stable", abscissa < 0.0);
  r.put("departure_from_normality",
        analysis::departure_from_normality(-lin.DM, sys.metric));
  r.put("m2_min_singular_value", analysis::min_singular_value(lin.blocks->M2));
  r.put("lower_right_block_max", lin.blocks->lower_right_max);
  r.put("adjoint_mismatch", lin.blocks->adjoint_mismatch);

  r.section("lyapunov");
  if (abscissa < 0.0) {
    const auto cert = analysis::lyapunov_certificate(lin.DM);
    r.put("residual", cert.residual);
    r.put("min_eig_P", cert.min_eig_P);
    r.put("valid", cert.valid);
  } else {
    r.put("valid", false);
    r.put("reason", "generator is not Hurwitz");
  }

  r.section("rates");
  if (abscissa < 0.0) {
    IntegratorConfig ic = detail::integrator_config(c, P);
    const double sigma = -abscissa;
    const double T = c.integrator.T.value_or(std::min(200.0, 20.0 / sigma));
    ic.record_every = detail::auto_record_every(T, ic.h_t);
    const Trajectory traj = optimizer::integrate_flow(
        sys, ocp::default_initial_state(P), optimizer::flow_input(P), ic, T);
    const auto rep = optimizer::convergence_report(traj, zh, P);
    r.put("T", T);
    r.put("sigma", sigma);
    r.put("c_fit", detail::opt_num(rep.rate));
    if (rep.rate) {
      r.put("c_fit_over_sigma", *rep.rate / sigma);
      r.put("within_10_percent",
            *rep.rate >= 0.9 * sigma && *rep.rate <= 1.1 * sigma);
    }
  } else {
    r.put("c_fit", "indeterminate");
  }
  write_text(ctx, "report.txt", r.str());
  ctx.note("spectral abscissa " + csv::format_double(abscissa));
}

/// Exit codes: 0 ok, 2 validation failure, 3 numerical failure.
inline int run(Mode mode, ScenarioConfig c, const std::string& out_dir,
               std::ostream& log, std::optional<std::uint64_t> seed = {},
               std::optional<bool> full_state = {}) {
  const auto start = std::chrono::steady_clock::now();
  if (seed) c.seed = *seed;
  if (full_state) c.full_state = *full_state;
  if (!out_dir.empty()) c.out_dir = out_dir;
  RunContext ctx;
  ctx.log = &log;
  ocp::DiscretizedOCP P;
  try {
    if (c.out_dir.empty()) throw ConfigError("output.dir: no output directory");
    if (c.mode && *c.mode != mode) {
      log << "note: config mode '" << to_string(*c.mode) << "' overridden by '"
          << to_string(mode) << "'\n";
    }
    if (mode == Mode::closedloop && !c.plant) {
      throw ConfigError("plant: required in closedloop mode");
    }
    P = ocp::discretize(c.model, c.grid, c.cost);
    ctx.out = c.out_dir;
    fs::create_directories(ctx.out);
  } catch (const Error& e) {
    log << "validation error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    log << "validation error: output.dir: " << e.what() << '\n';
    return 2;
  }

  try {
    switch (mode) {
      case Mode::solve: run_solve(c, P, ctx); break;
      case Mode::flow: run_flow(c, P, ctx); break;
      case Mode::closedloop: run_closedloop(c, P, ctx); break;
      case Mode::audit: run_audit(c, P, ctx); break;
      case Mode::spectrum: run_spectrum(c, P, ctx); break;
    }
  } catch (const ConfigError& e) {
    log << "validation error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    log << "output error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    log << "numerical failure: " << e.what() << '\n';
    return 3;
  }

  json manifest;
  manifest["tool"] = "mphs_cli";
  manifest["versions"] = {
      {"mphs", kVersion},
      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                    std::to_string(EIGEN_MAJOR_VERSION) + "." +
                    std::to_string(EIGEN_MINOR_VERSION)},
      {"compiler", __VERSION__}};
  manifest["config"] = config_echo(c, mode);
  json files = json::array();
  for (const auto& f : ctx.files) {
    const fs::path p = ctx.out / f;
    files.push_back({{"name", f},
                     {"bytes", fs::file_size(p)},
                     {"sha256", sha256_file(p.string())}});
  }
  manifest["files"] = files;
  manifest["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  std::ofstream mf(ctx.out / "manifest.json", std::ios::binary);
  mf << manifest.dump(2) << '\n';
  return 0;
}

}  // namespace mphs::cli
