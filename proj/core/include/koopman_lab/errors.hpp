#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace koopman_lab {

/// Bad shapes, out-of-range arguments, malformed requests.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values appeared while integrating an ODE.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Adaptive step size fell below the representable minimum.
class StiffnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// (I - delta/2 K) was singular to working precision.
class DiscretizationError : public std::runtime_error {
 public:
  DiscretizationError(const std::string& what, double rcond)
      : std::runtime_error(what), rcond_(rcond) {}
  double condition_estimate() const noexcept { return rcond_; }

 private:
  double rcond_;
};

/// A rollout's latent or state norm crossed the explosion threshold.
class ExplosionError : public std::runtime_error {
 public:
  ExplosionError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Loss or gradient became NaN/Inf during optimization.
class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Filesystem or blob format problems.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Aggregates every violation found while validating a config.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

}  // namespace koopman_lab
