#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "koopman_lab/rollout.hpp"

namespace koopman_lab::report {

/// Metrics of one model over a plan grid. `koopman` marks Koopman-based
/// models, which compete for the best-per-row mark.
struct ModelMetrics {
  std::string name;
  bool koopman = true;
  rollout::MetricsTable table;
};

struct ExperimentMetrics {
  std::string environment;
  std::vector<ModelMetrics> models;
};

/// Stable serialization: fixed key order, shortest round-trip doubles,
/// exploded MSEs as null.
std::string metrics_to_json(const ExperimentMetrics& metrics);
ExperimentMetrics metrics_from_json(const std::string& text);
ExperimentMetrics read_metrics(const std::filesystem::path& path);

/// "step,mse" rows for steps 1..H.
std::string curve_csv(const rollout::PlanMetrics& plan);

struct Cell {
  std::optional<double> mse;  // empty when the column is absent for this row
  bool exploded = false;
};

struct ComparisonTable {
  std::vector<std::string> columns;  // "model:k"
  struct Row {
    std::string environment;
    std::size_t horizon = 0;
    std::vector<Cell> cells;
    int best = -1;  // column index of the smallest finite Koopman-model MSE
  };
  std::vector<Row> rows;

  /// Fixed-width text; best cell in brackets, explosions as a cross.
  std::string text() const;
  std::string csv() const;
};

/// One row per (input, horizon). Every input must carry the same set of
/// horizons and reencoding periods per model, else InvalidArgument.
ComparisonTable compare_report(const std::vector<ExperimentMetrics>& inputs);
ComparisonTable compare_report(const std::vector<std::filesystem::path>& metrics_paths);

inline constexpr const char* kCross = "✗";

}  // namespace koopman_lab::report
