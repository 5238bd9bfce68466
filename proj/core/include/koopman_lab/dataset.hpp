#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "koopman_lab/dynsys.hpp"

namespace koopman_lab::dynsys {

/// Scripted forcing for the controlled systems.
struct ControlSignal {
  enum class Kind { None, Sinusoid, PiecewiseConstant };
  Kind kind = Kind::None;
  double amplitude = 0.5;
  double frequency = 1.0;     // rad per time unit (Sinusoid)
  std::size_t hold_steps = 50;  // samples per constant segment (PiecewiseConstant)
};

struct DatasetRequest {
  SystemSpec system;
  std::size_t n_train = 50;
  std::size_t n_eval = 100;
  std::size_t train_len = 500;
  std::size_t eval_len = 1000;
  std::uint64_t seed = 0;
  double dt = 0.0;  // 0 selects system.dt
  ControlSignal control;
};

struct BlobRef {
  std::string states;    // relative path, little-endian f64, row-major (time-major)
  std::string controls;  // empty when the system is autonomous
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t control_cols = 0;
};

struct DatasetManifest {
  SystemSpec system;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
  std::size_t train_len = 0;
  std::size_t eval_len = 0;
  std::uint64_t seed = 0;
  double dt = 0.0;
  ControlSignal control;
  std::vector<BlobRef> train;
  std::vector<BlobRef> eval;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trajectory> train;
  std::vector<Trajectory> eval;
};

enum class Split { Train, Eval };

/// Draws one initial condition from the system's sampler using the stream
/// owned by (seed, split, index). Train and eval streams never overlap.
Vector sample_initial_condition(const SystemSpec& system, std::uint64_t seed, Split split, std::size_t index);

/// Control sequence (n_steps x control_dim) for one trajectory.
Matrix sample_controls(const SystemSpec& system, const ControlSignal& signal, double dt, std::size_t n_steps,
                       std::uint64_t seed, Split split, std::size_t index);

/// Integrates every trajectory in memory. Parallel over trajectories.
Dataset generate_dataset(const DatasetRequest& request);

/// generate_dataset + write_dataset.
DatasetManifest generate_dataset(const DatasetRequest& request, const std::filesystem::path& out_dir);

/// Writes manifest.json and traj_{index}.f64 (plus ctrl_{index}.f64 for
/// forced systems). Train trajectories take indices [0, n_train), eval the rest.
DatasetManifest write_dataset(Dataset& dataset, const std::filesystem::path& out_dir);

/// Loads a dataset directory, checking every blob against its declared shape.
Dataset load_dataset(const std::filesystem::path& dir);

DatasetManifest read_manifest(const std::filesystem::path& manifest_path);

// Raw blob I/O: little-endian IEEE-754 binary64, row-major.
void write_f64_blob(const std::filesystem::path& path, const Matrix& m);
Matrix read_f64_blob(const std::filesystem::path& path, std::size_t rows, std::size_t cols);

std::string control_kind_name(ControlSignal::Kind kind);
ControlSignal::Kind parse_control_kind(const std::string& name);

}  // namespace koopman_lab::dynsys
