#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "koopman_lab/dmd.hpp"
#include "koopman_lab/dynsys.hpp"
#include "koopman_lab/model.hpp"

namespace koopman_lab::rollout {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using koopman::LatentModel;

/// Latent or state norms above this mark a rollout as exploded.
inline constexpr double kExplosionThreshold = 1e8;

enum class Mode { Discrete, Continuous };

struct RolloutPlan {
  Mode mode = Mode::Discrete;
  std::size_t horizon = 100;         // discrete steps
  std::size_t reencode_period = 0;   // k; 0 = never, 1 = every step
  // Continuous mode: times in model time units. Output is sampled every
  // sample_dt (0 = the model step size); reencode_interval must be a
  // multiple of it (0 = never).
  double time_horizon = 0.0;
  double reencode_interval = 0.0;
  double sample_dt = 0.0;
  Matrix controls;  // horizon x control_dim, discrete mode only

  /// "k{k}_h{horizon}" or "dt{interval}_t{time}" for continuous plans.
  std::string label() const;
};

struct RolloutResult {
  Matrix states;   // (H+1) x d; row 0 is psi(phi(x0))
  Matrix latents;  // (H+1) x n, before any reencoding at that index
  std::vector<std::size_t> reencode_indices;
  std::size_t encoder_calls = 0;
};

/// Encode once and advance the latent linearly for the whole horizon.
/// Throws ExplosionError naming the first step whose norm crosses the threshold.
RolloutResult rollout_no_reencode(const LatentModel& model, const Vector& x0, const RolloutPlan& plan);

/// Reencode zhat <- phi(psi(zhat)) at indices k, 2k, ... < H. The latent
/// stored at index k is the one decoded there; its reencoding produces k+1.
RolloutResult rollout_periodic(const LatentModel& model, const Vector& x0, const RolloutPlan& plan);

/// Dispatches on plan.reencode_period (or reencode_interval).
RolloutResult rollout(const LatentModel& model, const Vector& x0, const RolloutPlan& plan);

/// Independent every-step reencoding loop, x_{t+1} = psi(advance(phi(x_t))).
RolloutResult rollout_every_step(const LatentModel& model, const Vector& x0, std::size_t horizon,
                                 const Matrix& controls = Matrix());

/// z_{t+1} = K z_t + L v_t, one row per z_0..z_N, by a work-efficient prefix
/// scan over affine maps. `v` holds one encoded control per row (empty when
/// uncontrolled). The tree shape depends only on n_steps, so results do not
/// depend on the worker count.
Matrix latent_unroll_scan(const koopman::DiscreteOperators& ops, const Vector& z0, const Matrix& v,
                          std::size_t n_steps);

/// The plain recurrence, for comparison.
Matrix latent_unroll_sequential(const koopman::DiscreteOperators& ops, const Vector& z0, const Matrix& v,
                                std::size_t n_steps);

struct PlanMetrics {
  RolloutPlan plan;
  std::string label;
  double mse = 0.0;  // +inf when any trajectory exploded
  bool exploded = false;
  std::size_t exploded_trajectories = 0;
  std::vector<double> curve;  // per-step MSE for steps 1..H over surviving trajectories
};

struct MetricsTable {
  std::vector<PlanMetrics> rows;

  const PlanMetrics* find(const std::string& label) const;
  /// Smallest finite MSE among plans with k >= 1 at `horizon`; nullptr if none.
  const PlanMetrics* best_periodic(std::size_t horizon) const;
};

/// Discrete plans for every (horizon, k) pair, horizons outermost.
std::vector<RolloutPlan> make_plan_grid(const std::vector<std::size_t>& horizons,
                                        const std::vector<std::size_t>& periods);

/// MSE from step 1 onward averaged over trajectories, steps and state
/// dimensions. Controlled models take their controls from each trajectory.
/// Parallel over trajectories with an ordered reduction.
MetricsTable evaluate_mse(const LatentModel& model, const std::vector<dynsys::Trajectory>& eval_set,
                          const std::vector<RolloutPlan>& grid);

/// Wraps a (e)DMD fit so it can be rolled out and evaluated like any model.
class DmdAdapter : public LatentModel {
 public:
  explicit DmdAdapter(dmd::DmdModel model);

  int state_dim() const override { return model_.state_dim(); }
  int latent_dim() const override { return model_.lifted_dim(); }
  double step_size() const override { return 1.0; }
  Vector encode(const Vector& x) const override;
  Vector decode(const Vector& z) const override;
  Vector advance(const Vector& z, const Vector& u) const override;
  const koopman::DiscreteOperators* linear_operators() const override { return &ops_; }

 private:
  dmd::DmdModel model_;
  koopman::DiscreteOperators ops_;
};

/// Two linear systems on disjoint latent supports:
///   phi(x) = (x1, x2, 0, 0) for x1 < 0, (0, 0, x1, x2) otherwise,
///   psi(z) = [I I] z, K = diag(K1, K2).
/// K1 = [[0, 1], [0, 0]] is nilpotent, so its discrete step is exactly
/// I + delta K1 and a start (x1 < 0, x2 > 0) reaches x1 >= 0 after
/// ceil(-x1 / (delta x2)) steps.
class SwitchingOracle : public LatentModel {
 public:
  explicit SwitchingOracle(double delta = 0.125);

  int state_dim() const override { return 2; }
  int latent_dim() const override { return 4; }
  double step_size() const override { return ops_.delta; }
  Vector encode(const Vector& x) const override;
  Vector decode(const Vector& z) const override;
  Vector advance(const Vector& z, const Vector& u) const override;
  const koopman::DiscreteOperators* linear_operators() const override { return &ops_; }
  Matrix generator() const override { return k_; }

  /// First step at which the R1 flow from x0 enters x1 >= 0.
  std::size_t crossing_step(const Vector& x0) const;

 private:
  Matrix k_;
  koopman::DiscreteOperators ops_;
};

struct SwitchingReport {
  bool no_reencode_confined = false;  // (a) start in R1, k = 0: z3 = z4 = 0 always
  bool reencode_switches = false;     // (b) k = 1: support moves to {3, 4} at the crossing
  bool r2_confined = false;           // start in R2, k = 0: z1 = z2 = 0 always
  double max_leak = 0.0;              // max |z3|, |z4| in (a)
  std::size_t expected_crossing = 0;
  std::size_t observed_switch = 0;    // reencode index whose output changed support
  std::vector<std::string> lines;

  bool passed() const { return no_reencode_confined && reencode_switches && r2_confined; }
};

SwitchingReport switching_oracle_check(std::size_t horizon = 40);

}  // namespace koopman_lab::rollout
