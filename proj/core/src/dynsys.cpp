#include "koopman_lab/dynsys.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "koopman_lab/errors.hpp"
#include "koopman_lab/log.hpp"

namespace koopman_lab::dynsys {

namespace {

constexpr double kStandardGravityOverLength = 9.81;

double param(const SystemSpec& s, const char* name) {
  auto it = s.params.find(name);
  if (it == s.params.end()) {
    throw InvalidArgument(std::string(system_name(s.id)) + ": missing parameter '" + name + "'");
  }
  return it->second;
}

InitSampler uniform_box(std::initializer_list<double> lo, std::initializer_list<double> hi) {
  InitSampler s;
  s.kind = InitSampler::Kind::UniformBox;
  s.lower = Eigen::Map<const Vector>(lo.begin(), static_cast<Eigen::Index>(lo.size()));
  s.upper = Eigen::Map<const Vector>(hi.begin(), static_cast<Eigen::Index>(hi.size()));
  return s;
}

bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace

std::string_view system_name(SystemId id) {
  switch (id) {
    case SystemId::Decay: return "decay";
    case SystemId::Parabolic: return "parabolic";
    case SystemId::Duffing: return "duffing";
    case SystemId::ForcedDuffing: return "forced_duffing";
    case SystemId::LotkaVolterra: return "lotka_volterra";
    case SystemId::Pendulum: return "pendulum";
    case SystemId::ForcedPendulum: return "forced_pendulum";
    case SystemId::Lorenz: return "lorenz";
  }
  return "unknown";
}

SystemId parse_system_id(std::string_view name) {
  for (auto id : {SystemId::Decay, SystemId::Parabolic, SystemId::Duffing, SystemId::ForcedDuffing,
                  SystemId::LotkaVolterra, SystemId::Pendulum, SystemId::ForcedPendulum, SystemId::Lorenz}) {
    if (system_name(id) == name) return id;
  }
  if (name == "lotka-volterra") return SystemId::LotkaVolterra;
  if (name == "parabolic_attractor") return SystemId::Parabolic;
  throw InvalidArgument("unknown system '" + std::string(name) + "'");
}

std::vector<std::string> required_params(SystemId id) {
  switch (id) {
    case SystemId::Decay: return {"rate"};
    case SystemId::Parabolic: return {"mu", "lambda"};
    case SystemId::Duffing:
    case SystemId::ForcedDuffing: return {};
    case SystemId::LotkaVolterra: return {"alpha", "beta", "gamma", "delta"};
    case SystemId::Pendulum:
    case SystemId::ForcedPendulum: return {"g_over_l"};
    case SystemId::Lorenz: return {"sigma", "rho", "beta"};
  }
  return {};
}

SystemSpec make_system(SystemId id, const std::map<std::string, double>& overrides) {
  SystemSpec s;
  s.id = id;
  s.dt = 0.01;
  switch (id) {
    case SystemId::Decay:
      s.params = {{"rate", 1.0}};
      s.state_dim = 1;
      s.init = uniform_box({-1.0}, {1.0});
      break;
    case SystemId::Parabolic:
      s.params = {{"mu", -0.1}, {"lambda", -1.0}};
      s.state_dim = 2;
      s.init = uniform_box({-1.0, -1.0}, {1.0, 1.0});
      break;
    case SystemId::Duffing:
    case SystemId::ForcedDuffing:
      s.state_dim = 2;
      s.control_dim = id == SystemId::ForcedDuffing ? 1 : 0;
      s.init = uniform_box({-2.0, -1.0}, {2.0, 1.0});
      break;
    case SystemId::LotkaVolterra:
      s.params = {{"alpha", 0.2}, {"beta", 0.2}, {"gamma", 0.2}, {"delta", 0.2}};
      s.state_dim = 2;
      s.init = uniform_box({0.02, 0.02}, {3.0, 3.0});
      break;
    case SystemId::Pendulum:
    case SystemId::ForcedPendulum: {
      s.params = {{"g_over_l", kStandardGravityOverLength}};
      s.state_dim = 2;
      s.control_dim = id == SystemId::ForcedPendulum ? 1 : 0;
      const double ten_deg = 10.0 * std::numbers::pi / 180.0;
      s.init = uniform_box({-ten_deg, 0.0}, {ten_deg, 0.0});
      break;
    }
    case SystemId::Lorenz:
      s.params = {{"sigma", 10.0}, {"rho", 28.0}, {"beta", 8.0 / 3.0}};
      s.state_dim = 3;
      s.dt = 0.02;
      s.substeps = 4;
      s.init.kind = InitSampler::Kind::GaussianPoint;
      s.init.center = Vector(3);
      s.init.center << 0.0, 1.0, 1.05;
      s.init.stddev = 1.0;
      break;
  }
  for (const auto& [name, value] : overrides) {
    if (!s.params.contains(name)) {
      throw InvalidArgument(std::string(system_name(id)) + ": unknown parameter '" + name + "'");
    }
    s.params[name] = value;
  }
  return s;
}

SystemSpec make_system(std::string_view name, const std::map<std::string, double>& overrides) {
  return make_system(parse_system_id(name), overrides);
}

void validate(const SystemSpec& s) {
  const int expected_dim = s.id == SystemId::Decay ? 1 : (s.id == SystemId::Lorenz ? 3 : 2);
  if (s.state_dim != expected_dim) {
    std::ostringstream os;
    os << system_name(s.id) << ": state_dim " << s.state_dim << " but equations need " << expected_dim;
    throw InvalidArgument(os.str());
  }
  const bool forced = s.id == SystemId::ForcedDuffing || s.id == SystemId::ForcedPendulum;
  if (s.control_dim != (forced ? 1 : 0)) {
    throw InvalidArgument(std::string(system_name(s.id)) + ": control_dim must be " + (forced ? "1" : "0"));
  }
  for (const auto& p : required_params(s.id)) param(s, p.c_str());
  if (!(s.dt > 0.0)) throw InvalidArgument("system dt must be positive");
  if (s.substeps == 0) throw InvalidArgument("system substeps must be at least 1");
}

std::vector<Vector> fixed_points(const SystemSpec& s) {
  auto v2 = [](double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
  };
  switch (s.id) {
    case SystemId::Decay: return {Vector::Zero(1)};
    case SystemId::Parabolic: return {v2(0.0, 0.0)};
    case SystemId::Duffing:
    case SystemId::ForcedDuffing: return {v2(-1.0, 0.0), v2(0.0, 0.0), v2(1.0, 0.0)};
    case SystemId::LotkaVolterra:
      return {v2(0.0, 0.0), v2(param(s, "gamma") / param(s, "delta"), param(s, "alpha") / param(s, "beta"))};
    case SystemId::Pendulum:
    case SystemId::ForcedPendulum: return {v2(0.0, 0.0), v2(std::numbers::pi, 0.0)};
    case SystemId::Lorenz: {
      const double beta = param(s, "beta");
      const double rho = param(s, "rho");
      std::vector<Vector> out{Vector::Zero(3)};
      if (rho > 1.0) {
        const double c = std::sqrt(beta * (rho - 1.0));
        Vector p(3), q(3);
        p << c, c, rho - 1.0;
        q << -c, -c, rho - 1.0;
        out.push_back(p);
        out.push_back(q);
      }
      return out;
    }
  }
  return {};
}

Vector rhs(const SystemSpec& s, const Vector& x, const Vector& u) {
  if (x.size() != s.state_dim) {
    throw InvalidArgument(std::string(system_name(s.id)) + ": state has " + std::to_string(x.size()) +
                          " entries, expected " + std::to_string(s.state_dim));
  }
  if (u.size() != s.control_dim) {
    throw InvalidArgument(std::string(system_name(s.id)) + ": control has " + std::to_string(u.size()) +
                          " entries, expected " + std::to_string(s.control_dim));
  }
  Vector dx(s.state_dim);
  switch (s.id) {
    case SystemId::Decay:
      dx[0] = -param(s, "rate") * x[0];
      break;
    case SystemId::Parabolic: {
      const double mu = param(s, "mu");
      const double lambda = param(s, "lambda");
      dx[0] = mu * x[0];
      dx[1] = lambda * (x[1] - x[0] * x[0]);
      break;
    }
    case SystemId::Duffing:
    case SystemId::ForcedDuffing:
      dx[0] = x[1];
      dx[1] = x[0] - x[0] * x[0] * x[0] + (s.control_dim > 0 ? u[0] : 0.0);
      break;
    case SystemId::LotkaVolterra: {
      const double a = param(s, "alpha"), b = param(s, "beta");
      const double g = param(s, "gamma"), d = param(s, "delta");
      dx[0] = a * x[0] - b * x[0] * x[1];
      dx[1] = d * x[0] * x[1] - g * x[1];
      break;
    }
    case SystemId::Pendulum:
    case SystemId::ForcedPendulum:
      // theta = 0 is the inverted position, so gravity accelerates away from it.
      dx[0] = x[1];
      dx[1] = param(s, "g_over_l") * std::sin(x[0]) + (s.control_dim > 0 ? u[0] : 0.0);
      break;
    case SystemId::Lorenz: {
      const double sigma = param(s, "sigma"), rho = param(s, "rho"), beta = param(s, "beta");
      dx[0] = sigma * (x[1] - x[0]);
      dx[1] = x[0] * (rho - x[2]) - x[1];
      dx[2] = x[0] * x[1] - beta * x[2];
      break;
    }
  }
  return dx;
}

VectorField vector_field(const SystemSpec& system) {
  validate(system);
  return [system](const Vector& x, const Vector& u) { return rhs(system, x, u); };
}

Trajectory integrate_rk4(const VectorField& f, const Vector& x0, double dt, std::size_t n_steps,
                         const Matrix& controls, std::size_t substeps) {
  if (!(dt > 0.0)) throw InvalidArgument("integrate_rk4: dt must be positive");
  if (n_steps < 1) throw InvalidArgument("integrate_rk4: n_steps must be at least 1");
  if (substeps < 1) throw InvalidArgument("integrate_rk4: substeps must be at least 1");
  const bool controlled = controls.size() > 0;
  if (controlled && static_cast<std::size_t>(controls.rows()) != n_steps) {
    throw InvalidArgument("integrate_rk4: controls have " + std::to_string(controls.rows()) + " rows, expected " +
                          std::to_string(n_steps));
  }
  Trajectory traj;
  traj.dt = dt;
  traj.states.resize(static_cast<Eigen::Index>(n_steps) + 1, x0.size());
  traj.states.row(0) = x0.transpose();
  if (controlled) traj.controls = controls;

  const double h = dt / static_cast<double>(substeps);
  Vector x = x0;
  Vector u;
  for (std::size_t step = 0; step < n_steps; ++step) {
    if (controlled) u = controls.row(static_cast<Eigen::Index>(step)).transpose();
    for (std::size_t sub = 0; sub < substeps; ++sub) {
      const Vector k1 = f(x, u);
      const Vector k2 = f(x + 0.5 * h * k1, u);
      const Vector k3 = f(x + 0.5 * h * k2, u);
      const Vector k4 = f(x + h * k3, u);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!all_finite(x)) {
      throw DivergenceError("integrate_rk4: non-finite state at step " + std::to_string(step + 1), step + 1);
    }
    traj.states.row(static_cast<Eigen::Index>(step) + 1) = x.transpose();
  }
  return traj;
}

Trajectory integrate_rk4(const SystemSpec& system, const Vector& x0, double dt, std::size_t n_steps,
                         const Matrix& controls, std::size_t substeps) {
  if (x0.size() != system.state_dim) throw InvalidArgument("integrate_rk4: x0 dimension mismatch");
  if (system.control_dim > 0 && controls.size() == 0) {
    throw InvalidArgument("integrate_rk4: system is forced but no controls were given");
  }
  if (system.control_dim == 0 && controls.size() > 0) {
    throw InvalidArgument("integrate_rk4: system is autonomous but controls were given");
  }
  return integrate_rk4(vector_field(system), x0, dt, n_steps, controls, substeps);
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0, a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0, a64 = 49.0 / 176.0,
                 a65 = -5103.0 / 18656.0;
constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0, a75 = -2187.0 / 6784.0,
                 a76 = 11.0 / 84.0;
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0, e5 = -17253.0 / 339200.0,
                 e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
// Continuous extension (Hairer, Norsett & Wanner).
constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

double error_norm(const Vector& err, const Vector& y0, const Vector& y1, double rtol, double atol) {
  const Vector scale = (atol + rtol * y0.cwiseAbs().cwiseMax(y1.cwiseAbs()).array()).matrix();
  return std::sqrt((err.array() / scale.array()).square().mean());
}

double initial_step(const VectorField& f, const Vector& y0, const Vector& f0, double rtol, double atol,
                    double hmax, std::size_t& evals) {
  const Vector sc = (atol + rtol * y0.cwiseAbs().array()).matrix();
  const double dnf = (f0.array() / sc.array()).square().mean();
  const double dny = (y0.array() / sc.array()).square().mean();
  double h = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : std::sqrt(dny / dnf) * 0.01;
  h = std::min(h, hmax);
  const Vector f1 = f(y0 + h * f0, Vector());
  ++evals;
  const double der2 = std::sqrt(((f1 - f0).array() / sc.array()).square().mean()) / h;
  const double der12 = std::max(der2, std::sqrt(dnf));
  const double h1 = der12 <= 1e-15 ? std::max(1e-6, h * 1e-3) : std::pow(0.01 / der12, 1.0 / 5.0);
  return std::min({100.0 * h, h1, hmax});
}

}  // namespace

Trajectory integrate_dopri5(const VectorField& f, const Vector& x0, double t_span, double rel_tol, double abs_tol,
                            double sample_dt, Dopri5Stats* stats) {
  if (!(t_span > 0.0)) throw InvalidArgument("integrate_dopri5: t_span must be positive");
  if (!(rel_tol > 0.0) || !(abs_tol > 0.0)) throw InvalidArgument("integrate_dopri5: tolerances must be positive");
  if (!(sample_dt > 0.0)) throw InvalidArgument("integrate_dopri5: sample_dt must be positive");

  const double ratio = t_span / sample_dt;
  const auto n_samples = static_cast<std::size_t>(std::floor(ratio + 1e-9));
  Trajectory traj;
  traj.dt = sample_dt;
  traj.states.resize(static_cast<Eigen::Index>(n_samples) + 1, x0.size());
  traj.states.row(0) = x0.transpose();

  Dopri5Stats local;
  const Vector none;
  Vector y = x0;
  Vector k1 = f(y, none);
  ++local.rhs_evaluations;
  double t = 0.0;
  double h = initial_step(f, y, k1, rel_tol, abs_tol, t_span, local.rhs_evaluations);
  std::size_t next_sample = 1;
  constexpr std::size_t kMaxSteps = 50'000'000;

  while (next_sample <= n_samples) {
    if (local.accepted + local.rejected > kMaxSteps) throw StiffnessError("integrate_dopri5: step budget exhausted");
    const double min_step = 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t));
    if (h < min_step) {
      throw StiffnessError("integrate_dopri5: step size underflow at t=" + std::to_string(t));
    }
    h = std::min(h, t_span - t);
    if (h <= 0.0) break;

    const Vector k2 = f(y + h * (a21 * k1), none);
    const Vector k3 = f(y + h * (a31 * k1 + a32 * k2), none);
    const Vector k4 = f(y + h * (a41 * k1 + a42 * k2 + a43 * k3), none);
    const Vector k5 = f(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), none);
    const Vector k6 = f(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), none);
    const Vector y_new = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    const Vector k7 = f(y_new, none);
    local.rhs_evaluations += 6;

    const Vector err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const double err_norm = error_norm(err, y, y_new, rel_tol, abs_tol);
    if (!std::isfinite(err_norm)) {
      if (!y_new.allFinite() && h <= min_step * 2) {
        throw DivergenceError("integrate_dopri5: non-finite state", next_sample);
      }
      h *= 0.2;
      ++local.rejected;
      continue;
    }

    if (err_norm <= 1.0) {
      const double t_new = t + h;
      const bool last = t_new >= t_span * (1.0 - 1e-15);
      // Emit every requested sample inside (t, t_new] with the dense output.
      if (next_sample <= n_samples) {
        const Vector ydiff = y_new - y;
        const Vector bspl = h * k1 - ydiff;
        const Vector r4 = ydiff - h * k7 - bspl;
        const Vector r5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
        while (next_sample <= n_samples) {
          const double ts = static_cast<double>(next_sample) * sample_dt;
          if (ts > t_new && !(last && next_sample == n_samples)) break;
          const double theta = std::clamp((ts - t) / h, 0.0, 1.0);
          const double theta1 = 1.0 - theta;
          const Vector ys = y + theta * (ydiff + theta1 * (bspl + theta * (r4 + theta1 * r5)));
          if (!ys.allFinite()) throw DivergenceError("integrate_dopri5: non-finite state", next_sample);
          traj.states.row(static_cast<Eigen::Index>(next_sample)) = ys.transpose();
          ++next_sample;
        }
      }
      y = y_new;
      k1 = k7;
      t = t_new;
      ++local.accepted;
      const double fac = err_norm == 0.0 ? 10.0 : std::clamp(0.9 * std::pow(err_norm, -0.2), 0.2, 10.0);
      h *= fac;
      if (last) break;
    } else {
      ++local.rejected;
      h *= std::clamp(0.9 * std::pow(err_norm, -0.2), 0.2, 1.0);
    }
  }
  if (stats) *stats = local;
  return traj;
}

Trajectory integrate_dopri5(const SystemSpec& system, const Vector& x0, double t_span, double rel_tol,
                            double abs_tol, double sample_dt, Dopri5Stats* stats) {
  if (system.control_dim > 0) throw InvalidArgument("integrate_dopri5: forced systems are not supported");
  if (x0.size() != system.state_dim) throw InvalidArgument("integrate_dopri5: x0 dimension mismatch");
  return integrate_dopri5(vector_field(system), x0, t_span, rel_tol, abs_tol, sample_dt, stats);
}

Vector parabolic_closed_form(const Vector& x0, double t, double mu, double lambda) {
  if (x0.size() != 2) throw InvalidArgument("parabolic_closed_form: x0 must have 2 entries");
  if (!(lambda < mu && mu < 0.0)) {
    log::warn("parabolic_closed_form: lambda < mu < 0 does not hold; no attracting slow manifold");
  }
  if (t == 0.0) return x0;
  const double b = lambda / (lambda - 2.0 * mu);
  const double x1sq = x0[0] * x0[0];
  Vector x(2);
  x[0] = x0[0] * std::exp(mu * t);
  x[1] = (x0[1] - b * x1sq) * std::exp(lambda * t) + b * x1sq * std::exp(2.0 * mu * t);
  return x;
}

}  // namespace koopman_lab::dynsys
