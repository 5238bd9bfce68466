#include "koopman_lab/rollout.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>

#include "koopman_lab/errors.hpp"
#include "koopman_lab/expm.hpp"
#include "koopman_lab/parallel.hpp"

namespace koopman_lab::rollout {

namespace {

using Stepper = std::function<Vector(const Vector& z, std::size_t i)>;

void check_norm(const Vector& v, std::size_t step, const char* what) {
  const double n = v.norm();
  if (!std::isfinite(n) || n > kExplosionThreshold) {
    throw ExplosionError(std::string("rollout: ") + what + " norm exceeded threshold at step " + std::to_string(step),
                         step);
  }
}

RolloutResult run(const LatentModel& model, const Vector& x0, std::size_t horizon, std::size_t period,
                  const Stepper& step) {
  if (x0.size() != model.state_dim()) throw InvalidArgument("rollout: x0 dimension mismatch");
  const auto H = static_cast<Eigen::Index>(horizon);
  RolloutResult r;
  r.states.resize(H + 1, model.state_dim());
  r.latents.resize(H + 1, model.latent_dim());
  Vector z = model.encode(x0);
  r.encoder_calls = 1;
  check_norm(z, 0, "latent");
  r.latents.row(0) = z;
  r.states.row(0) = model.decode(z);
  for (std::size_t i = 1; i <= horizon; ++i) {
    z = step(z, i);
    check_norm(z, i, "latent");
    const Vector x = model.decode(z);
    check_norm(x, i, "state");
    r.latents.row(static_cast<Eigen::Index>(i)) = z;
    r.states.row(static_cast<Eigen::Index>(i)) = x;
    if (period > 0 && i % period == 0 && i < horizon) {
      z = model.encode(x);
      ++r.encoder_calls;
      r.reencode_indices.push_back(i);
    }
  }
  return r;
}

Stepper discrete_stepper(const LatentModel& model, const RolloutPlan& plan) {
  const bool controlled = model.control_dim() > 0;
  if (controlled) {
    if (plan.controls.rows() < static_cast<Eigen::Index>(plan.horizon) || plan.controls.cols() != model.control_dim()) {
      throw InvalidArgument("rollout: controlled model needs a horizon x control_dim control sequence");
    }
  } else if (plan.controls.size() != 0) {
    throw InvalidArgument("rollout: controls given for an uncontrolled model");
  }
  return [&model, &plan, controlled](const Vector& z, std::size_t i) {
    return model.advance(z, controlled ? Vector(plan.controls.row(static_cast<Eigen::Index>(i - 1)).transpose())
                                       : Vector());
  };
}

struct ContinuousGrid {
  std::size_t horizon = 0;
  std::size_t period = 0;
  Matrix flow;
};

std::size_t as_multiple(double value, double unit, const char* what) {
  const double q = value / unit;
  const double r = std::round(q);
  if (std::abs(q - r) > 1e-9 * std::max(1.0, std::abs(q))) {
    throw InvalidArgument(std::string("rollout: ") + what + " must be a multiple of the sample interval");
  }
  return static_cast<std::size_t>(r);
}

ContinuousGrid continuous_grid(const LatentModel& model, const RolloutPlan& plan) {
  const Matrix K = model.generator();
  if (K.size() == 0) throw InvalidArgument("rollout: model has no continuous generator");
  if (plan.controls.size() != 0) throw InvalidArgument("rollout: continuous mode does not take controls");
  if (!(plan.time_horizon >= 0.0)) throw InvalidArgument("rollout: time_horizon must be non-negative");
  if (plan.reencode_interval < 0.0) throw InvalidArgument("rollout: reencode_interval must be non-negative");
  const double h = plan.sample_dt > 0.0 ? plan.sample_dt : model.step_size();
  ContinuousGrid g;
  g.horizon = as_multiple(plan.time_horizon, h, "time_horizon");
  g.period = plan.reencode_interval > 0.0 ? as_multiple(plan.reencode_interval, h, "reencode_interval") : 0;
  if (plan.reencode_interval > 0.0 && g.period == 0) throw InvalidArgument("rollout: reencode_interval too small");
  g.flow = koopman::expm(K * h);
  return g;
}

void check_period(std::size_t period, std::size_t horizon) {
  if (period > horizon) throw InvalidArgument("rollout: reencode period exceeds the horizon");
}

}  // namespace

std::string RolloutPlan::label() const {
  char buf[96];
  if (mode == Mode::Discrete) {
    std::snprintf(buf, sizeof(buf), "k%zu_h%zu", reencode_period, horizon);
  } else {
    std::snprintf(buf, sizeof(buf), "dt%g_t%g", reencode_interval, time_horizon);
  }
  return buf;
}

RolloutResult rollout_no_reencode(const LatentModel& model, const Vector& x0, const RolloutPlan& plan) {
  if (plan.mode == Mode::Continuous) {
    if (plan.reencode_interval != 0.0) throw InvalidArgument("rollout_no_reencode: plan has a reencode interval");
    const ContinuousGrid g = continuous_grid(model, plan);
    return run(model, x0, g.horizon, 0, [&g](const Vector& z, std::size_t) { return Vector(g.flow * z); });
  }
  if (plan.reencode_period != 0) throw InvalidArgument("rollout_no_reencode: plan has a reencode period");
  return run(model, x0, plan.horizon, 0, discrete_stepper(model, plan));
}

RolloutResult rollout_periodic(const LatentModel& model, const Vector& x0, const RolloutPlan& plan) {
  if (plan.mode == Mode::Continuous) {
    if (!(plan.reencode_interval > 0.0)) throw InvalidArgument("rollout_periodic: reencode interval must be positive");
    const ContinuousGrid g = continuous_grid(model, plan);
    check_period(g.period, g.horizon);
    return run(model, x0, g.horizon, g.period, [&g](const Vector& z, std::size_t) { return Vector(g.flow * z); });
  }
  if (plan.reencode_period < 1) throw InvalidArgument("rollout_periodic: reencode period must be at least 1");
  check_period(plan.reencode_period, plan.horizon);
  return run(model, x0, plan.horizon, plan.reencode_period, discrete_stepper(model, plan));
}

RolloutResult rollout(const LatentModel& model, const Vector& x0, const RolloutPlan& plan) {
  const bool periodic = plan.mode == Mode::Discrete ? plan.reencode_period > 0 : plan.reencode_interval > 0.0;
  return periodic ? rollout_periodic(model, x0, plan) : rollout_no_reencode(model, x0, plan);
}

RolloutResult rollout_every_step(const LatentModel& model, const Vector& x0, std::size_t horizon,
                                 const Matrix& controls) {
  if (x0.size() != model.state_dim()) throw InvalidArgument("rollout_every_step: x0 dimension mismatch");
  const bool controlled = model.control_dim() > 0;
  if (controlled && controls.rows() < static_cast<Eigen::Index>(horizon)) {
    throw InvalidArgument("rollout_every_step: missing controls");
  }
  RolloutResult r;
  r.states.resize(static_cast<Eigen::Index>(horizon) + 1, model.state_dim());
  r.latents.resize(static_cast<Eigen::Index>(horizon) + 1, model.latent_dim());
  Vector z = model.encode(x0);
  r.encoder_calls = 1;
  Vector x = model.decode(z);
  r.latents.row(0) = z;
  r.states.row(0) = x;
  for (std::size_t t = 0; t < horizon; ++t) {
    if (t > 0) {
      z = model.encode(x);
      ++r.encoder_calls;
      r.reencode_indices.push_back(t);
    }
    const Vector u = controls.size() > 0 ? Vector(controls.row(static_cast<Eigen::Index>(t)).transpose()) : Vector();
    z = model.advance(z, u);
    check_norm(z, t + 1, "latent");
    x = model.decode(z);
    check_norm(x, t + 1, "state");
    r.latents.row(static_cast<Eigen::Index>(t) + 1) = z;
    r.states.row(static_cast<Eigen::Index>(t) + 1) = x;
  }
  return r;
}

const PlanMetrics* MetricsTable::find(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return &r;
  }
  return nullptr;
}

const PlanMetrics* MetricsTable::best_periodic(std::size_t horizon) const {
  const PlanMetrics* best = nullptr;
  for (const auto& r : rows) {
    if (r.plan.mode != Mode::Discrete || r.plan.horizon != horizon || r.plan.reencode_period == 0) continue;
    if (r.exploded) continue;
    if (best == nullptr || r.mse < best->mse) best = &r;
  }
  return best;
}

std::vector<RolloutPlan> make_plan_grid(const std::vector<std::size_t>& horizons,
                                        const std::vector<std::size_t>& periods) {
  std::vector<RolloutPlan> grid;
  for (std::size_t h : horizons) {
    for (std::size_t k : periods) {
      RolloutPlan p;
      p.horizon = h;
      p.reencode_period = k;
      grid.push_back(p);
    }
  }
  return grid;
}

MetricsTable evaluate_mse(const LatentModel& model, const std::vector<dynsys::Trajectory>& eval_set,
                          const std::vector<RolloutPlan>& grid) {
  if (eval_set.empty()) throw InvalidArgument("evaluate_mse: empty evaluation set");
  const bool controlled = model.control_dim() > 0;
  MetricsTable table;
  for (const auto& plan : grid) {
    if (plan.mode != Mode::Discrete) throw InvalidArgument("evaluate_mse: only discrete plans are supported");
    const std::size_t H = plan.horizon;
    if (H < 1) throw InvalidArgument("evaluate_mse: horizon must be at least 1");
    check_period(plan.reencode_period, H);
    for (const auto& t : eval_set) {
      if (t.steps() < H) throw InvalidArgument("evaluate_mse: evaluation trajectory shorter than the horizon");
      if (t.states.cols() != model.state_dim()) throw InvalidArgument("evaluate_mse: state dimension mismatch");
    }
    // Per-trajectory squared-error sums per step; combined in index order.
    std::vector<std::vector<double>> per_traj(eval_set.size());
    std::vector<char> exploded(eval_set.size(), 0);
    parallel_for(eval_set.size(), [&](std::size_t j) {
      const auto& traj = eval_set[j];
      RolloutPlan p = plan;
      if (controlled) p.controls = traj.controls.topRows(static_cast<Eigen::Index>(H));
      try {
        const RolloutResult r = rollout(model, traj.states.row(0).transpose(), p);
        std::vector<double> sq(H);
        for (std::size_t i = 1; i <= H; ++i) {
          const auto row = static_cast<Eigen::Index>(i);
          sq[i - 1] = (r.states.row(row) - traj.states.row(row)).squaredNorm();
        }
        per_traj[j] = std::move(sq);
      } catch (const ExplosionError&) {
        exploded[j] = 1;
      }
    });
    PlanMetrics m;
    m.plan = plan;
    m.label = plan.label();
    m.curve.assign(H, 0.0);
    std::size_t survivors = 0;
    for (std::size_t j = 0; j < eval_set.size(); ++j) {
      if (exploded[j]) {
        ++m.exploded_trajectories;
        continue;
      }
      ++survivors;
      for (std::size_t i = 0; i < H; ++i) m.curve[i] += per_traj[j][i];
    }
    const double d = static_cast<double>(model.state_dim());
    double total = 0.0;
    for (auto& c : m.curve) {
      c = survivors > 0 ? c / (static_cast<double>(survivors) * d) : std::numeric_limits<double>::infinity();
      total += c;
    }
    m.exploded = m.exploded_trajectories > 0;
    m.mse = m.exploded ? std::numeric_limits<double>::infinity() : total / static_cast<double>(H);
    table.rows.push_back(std::move(m));
  }
  return table;
}

DmdAdapter::DmdAdapter(dmd::DmdModel model) : model_(std::move(model)) {
  ops_.K = model_.K;
  ops_.delta = 1.0;
}

Vector DmdAdapter::encode(const Vector& x) const {
  if (x.size() != state_dim()) throw InvalidArgument("DmdAdapter: state dimension mismatch");
  return model_.is_extended() ? model_.dictionary.evaluate(x) : x;
}

Vector DmdAdapter::decode(const Vector& z) const {
  Vector x(state_dim());
  for (std::size_t j = 0; j < model_.state_rows.size(); ++j) {
    x[static_cast<Eigen::Index>(j)] = z[static_cast<Eigen::Index>(model_.state_rows[j])];
  }
  return x;
}

Vector DmdAdapter::advance(const Vector& z, const Vector& u) const {
  if (u.size() != 0) throw InvalidArgument("DmdAdapter: DMD models take no controls");
  return model_.K * z;
}

}  // namespace koopman_lab::rollout
