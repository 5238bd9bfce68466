#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace koopman_lab::dynsys {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class SystemId {
  Decay,           // x' = -rate * x, scalar test problem
  Parabolic,       // slow-manifold attractor with a closed-form Koopman embedding
  Duffing,         // x'' = x - x^3
  ForcedDuffing,   // x'' = x - x^3 + u
  LotkaVolterra,   // predator-prey
  Pendulum,        // angle measured from upright
  ForcedPendulum,  // pendulum with an applied torque u
  Lorenz,
};

/// Initial-condition distribution. A uniform box may have zero-width
/// dimensions (lower == upper) to pin a coordinate.
struct InitSampler {
  enum class Kind { UniformBox, GaussianPoint };
  Kind kind = Kind::UniformBox;
  Vector lower;
  Vector upper;
  Vector center;
  double stddev = 0.0;
};

struct SystemSpec {
  SystemId id = SystemId::Duffing;
  std::map<std::string, double> params;
  int state_dim = 0;
  int control_dim = 0;
  InitSampler init;
  double dt = 0.01;           // default sample interval for datasets
  std::size_t substeps = 1;   // RK4 substeps per sample interval when generating data
};

std::string_view system_name(SystemId id);
SystemId parse_system_id(std::string_view name);

/// Builds the benchmark configuration of a system. `overrides` replaces
/// individual parameters by name; unknown names are rejected.
SystemSpec make_system(std::string_view name, const std::map<std::string, double>& overrides = {});
SystemSpec make_system(SystemId id, const std::map<std::string, double>& overrides = {});

/// Throws InvalidArgument if required parameters are missing or dims disagree
/// with the governing equations.
void validate(const SystemSpec& system);

/// Names of the parameters read by the system's right-hand side.
std::vector<std::string> required_params(SystemId id);

/// Known fixed points of the system for its stored parameters.
std::vector<Vector> fixed_points(const SystemSpec& system);

/// Right-hand side f(x, u). Pass an empty u for uncontrolled systems.
Vector rhs(const SystemSpec& system, const Vector& x, const Vector& u = Vector());

using VectorField = std::function<Vector(const Vector& x, const Vector& u)>;

/// Validated closure over rhs(system, ., .).
VectorField vector_field(const SystemSpec& system);

struct Trajectory {
  Matrix states;    // (T+1) x state_dim, row t is the state at time t*dt
  Matrix controls;  // T x control_dim, empty for autonomous systems
  double dt = 0.0;

  std::size_t steps() const { return states.rows() == 0 ? 0 : static_cast<std::size_t>(states.rows() - 1); }
  bool has_controls() const { return controls.size() > 0; }
};

/// Fixed-step classical RK4 with zero-order hold on controls. Each of the
/// n_steps samples advances `substeps` internal RK4 steps of dt/substeps.
Trajectory integrate_rk4(const VectorField& f, const Vector& x0, double dt, std::size_t n_steps,
                         const Matrix& controls = Matrix(), std::size_t substeps = 1);
Trajectory integrate_rk4(const SystemSpec& system, const Vector& x0, double dt, std::size_t n_steps,
                         const Matrix& controls = Matrix(), std::size_t substeps = 1);

struct Dopri5Stats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t rhs_evaluations = 0;
};

/// Dormand-Prince 5(4) with PI-free standard step control and the 4th-order
/// continuous extension for output at multiples of sample_dt in [0, t_span].
Trajectory integrate_dopri5(const VectorField& f, const Vector& x0, double t_span, double rel_tol,
                            double abs_tol, double sample_dt, Dopri5Stats* stats = nullptr);
Trajectory integrate_dopri5(const SystemSpec& system, const Vector& x0, double t_span, double rel_tol,
                            double abs_tol, double sample_dt, Dopri5Stats* stats = nullptr);

/// Exact flow of the parabolic attractor:
///   x1(t) = x1(0) e^{mu t}
///   x2(t) = (x2(0) - b x1(0)^2) e^{lambda t} + b x1(0)^2 e^{2 mu t},  b = lambda / (lambda - 2 mu).
/// Logs a warning when lambda < mu < 0 does not hold.
Vector parabolic_closed_form(const Vector& x0, double t, double mu, double lambda);

}  // namespace koopman_lab::dynsys
