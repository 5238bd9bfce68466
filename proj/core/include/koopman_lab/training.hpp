#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "koopman_lab/dynsys.hpp"
#include "koopman_lab/grad.hpp"
#include "koopman_lab/model.hpp"

namespace koopman_lab::training {

using Matrix = Eigen::MatrixXd;

struct LossWeights {
  double align = 1.0;
  double reconst = 1.0;
  double pred = 0.0;
};

struct TrainConfig {
  std::size_t seq_len = 10;
  std::size_t batch_size = 64;
  std::size_t steps = 50000;
  double lr_main = 1e-4;
  double lr_dynamics = 1e-5;
  double weight_decay = 1e-4;
  double l1_weight = 1e-3;
  LossWeights loss_weights;
  std::size_t train_reencode_period = 0;  // 0 = never
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;       // 0 = only the final checkpoint
  std::filesystem::path checkpoint_dir;   // empty = no checkpoints

  /// Throws ConfigError listing every problem.
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct LossReport {
  std::size_t step = 0;
  double align = 0.0;
  double reconst = 0.0;
  double pred = 0.0;
  double l1 = 0.0;
  double total = 0.0;
};

std::string to_json_line(const LossReport& r);

/// Time-major minibatch: states[i] is B x d for window offset i = 0..T,
/// controls[i] is B x p for i = 0..T-1 (empty for autonomous systems).
struct Batch {
  std::vector<Matrix> states;
  std::vector<Matrix> controls;

  std::size_t seq_len() const { return states.empty() ? 0 : states.size() - 1; }
  Eigen::Index batch_size() const { return states.empty() ? 0 : states.front().rows(); }
};

/// One window [start, start + seq_len] of a trajectory as a batch of one.
Batch window_batch(const dynsys::Trajectory& traj, std::size_t start, std::size_t seq_len);

/// batch_size windows with trajectory and offset drawn uniformly.
Batch sample_batch(const std::vector<dynsys::Trajectory>& trajectories, std::size_t seq_len, std::size_t batch_size,
                   std::mt19937_64& rng);

struct LossGraph {
  LossReport report;
  grad::Tensor total;
};

/// Records the weighted three-term loss plus the L1 penalty on the tape:
///   align   = sum_{i=1..T} ||zhat_i - phi(x_i)||
///   reconst = sum_{i=0..T} ||x_i - psi(phi(x_i))||
///   pred    = sum_{i=1..T} ||x_i - psi(zhat_i)||
///   l1      = sum_{i=0..T} ||phi(x_i)||_1
/// each averaged over the batch. zhat_0 = phi(x_0); with a reencode period
/// p > 0, zhat_i is replaced by phi(psi(zhat_i)) at i = p, 2p, ... < T.
/// Throws TrainingDivergence naming the first non-finite term.
LossGraph sequence_loss(const koopman::TapedModel& model, const Batch& batch, const TrainConfig& config);

/// Forward-only evaluation on a fresh tape.
LossReport evaluate_loss(koopman::KoopmanModel& model, const Batch& batch, const TrainConfig& config);

struct TrainResult {
  std::vector<LossReport> history;  // one entry per optimizer step
};

using StepCallback = std::function<void(const LossReport&)>;

/// Minibatch AdamW. Dynamics parameters use lr_dynamics, everything else
/// lr_main; decoder columns are renormalized after every step when the
/// decoder is linear. On divergence the model is restored to its last
/// finite parameters (and checkpointed when a directory is set) before
/// TrainingDivergence propagates.
TrainResult train(koopman::KoopmanModel& model, const std::vector<dynsys::Trajectory>& trajectories,
                  const TrainConfig& config, const StepCallback& on_step = {});

struct CapacityReport {
  std::size_t reference_encoder = 0;
  std::size_t reference_decoder = 0;
  std::size_t baseline_encoder = 0;
  std::size_t baseline_decoder = 0;
  std::size_t baseline_dynamics = 0;  // K, the layer joining the two halves

  std::size_t reference_total() const { return reference_encoder + reference_decoder; }
  std::size_t baseline_total() const { return baseline_encoder + baseline_dynamics + baseline_decoder; }
};

/// Model config of the single-step MLP baseline matched to `reference`: the
/// reference encoder and decoder joined by a dense, unstructured K. Trained
/// with baseline_train_config the composition is a plain state-to-state MLP.
koopman::ModelConfig baseline_config(const koopman::ModelConfig& reference);

/// Train config of the baseline: prediction loss only, reencoding every step,
/// no L1 penalty.
TrainConfig baseline_train_config(TrainConfig config);

struct BaselineResult {
  koopman::KoopmanModel model;
  TrainResult result;
  CapacityReport capacity;
};

BaselineResult fit_mlp_baseline(const koopman::ModelConfig& reference,
                                const std::vector<dynsys::Trajectory>& trajectories, const TrainConfig& config,
                                const StepCallback& on_step = {});

}  // namespace koopman_lab::training
