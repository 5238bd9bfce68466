#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "koopman_lab/dataset.hpp"
#include "koopman_lab/model.hpp"
#include "koopman_lab/report.hpp"
#include "koopman_lab/rollout.hpp"
#include "koopman_lab/training.hpp"

namespace koopman_lab::experiment {

inline constexpr int kSchemaVersion = 1;

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string name = "experiment";
  std::uint64_t seed = 0;

  std::string system = "pendulum";
  std::map<std::string, double> system_params;

  std::size_t n_train = 50;
  std::size_t n_eval = 100;
  std::size_t train_len = 500;
  std::size_t eval_len = 1000;
  double dt = 0.0;  // 0 = the system's default
  dynsys::ControlSignal control;

  koopman::ModelConfig model;  // dims, dt and seed are filled from the rest
  training::TrainConfig train;

  bool mlp_baseline = true;
  std::size_t mlp_steps = 0;  // 0 = train.steps
  bool dmd_baseline = true;

  std::vector<std::size_t> horizons{100, 1000};
  std::vector<std::size_t> reencode_periods{0, 1, 10, 25, 50, 100};

  std::size_t phase_trajectories = 16;
  std::size_t phase_steps = 0;  // 0 = the longest horizon
};

/// Parses and validates; ConfigError lists every violation found.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::vector<std::string> validate(const ExperimentConfig& config);

/// Applies a seed override (all randomness derives from config.seed).
void override_seed(ExperimentConfig& config, std::uint64_t seed);

dynsys::DatasetRequest dataset_request(const ExperimentConfig& config);
koopman::ModelConfig resolved_model_config(const ExperimentConfig& config);

/// Writes metrics.json and curves/mse_curve_{name_}{label}.csv under out_dir.
void write_metrics(const std::filesystem::path& out_dir, const report::ExperimentMetrics& metrics);

/// Koopman model trained on the dataset's training split. Writes
/// losses.jsonl and checkpoints ({out_dir}/final.*) when out_dir is set.
koopman::KoopmanModel train_stage(const dynsys::Dataset& dataset, const koopman::ModelConfig& model_config,
                                  const training::TrainConfig& train_config, const std::filesystem::path& out_dir,
                                  const std::filesystem::path& losses_path);

/// Initial conditions on a Cartesian grid, "lo:hi:n" per state dimension
/// separated by commas, e.g. "-2:2:5,-1:1:3".
std::vector<Eigen::VectorXd> parse_phase_grid(const std::string& spec);

/// (trajectory_id, step, x1, x2[, x3]) rows. Exploded rollouts are skipped.
std::string phase_csv(const koopman::LatentModel& model, const std::vector<Eigen::VectorXd>& initial_conditions,
                      std::size_t steps, std::size_t reencode_period);
std::string phase_csv(const std::vector<dynsys::Trajectory>& trajectories, std::size_t steps);

/// Comma-separated rows of rollout states with a step column.
std::string rollout_csv(const rollout::RolloutResult& result);

/// Model and training settings for a standalone `train` job: a JSON object
/// with optional "model" and "train" sections ("seed" at top level too).
/// Dimensions and dt come from the dataset manifest.
struct TrainJob {
  koopman::ModelConfig model;
  training::TrainConfig train;
};
TrainJob parse_train_job(const std::string& text, const dynsys::DatasetManifest& manifest);

/// Numbers separated by whitespace or commas.
Eigen::VectorXd read_vector_file(const std::filesystem::path& path);

struct RunSummary {
  report::ExperimentMetrics metrics;
  std::filesystem::path metrics_path;
};

/// Full pipeline: dataset, Koopman training, baselines, evaluation on the
/// plan grid, curves and phase portraits. Output layout:
///   out/{manifest.json, traj_*.f64, ckpt/, losses.jsonl, metrics.json, curves/, phase/}
RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

}  // namespace koopman_lab::experiment
