#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "koopman_lab/grad.hpp"

namespace koopman_lab::nn {

using grad::Matrix;
using grad::Parameter;
using grad::Tape;
using grad::Tensor;
using Vector = Eigen::VectorXd;

/// Owns every trainable array of a model. Indices are stable for the
/// lifetime of the set and survive copies.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value, std::string group = "main", bool decay = true);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return by_name_.contains(name); }

  void zero_grad();
  std::size_t scalar_count() const;

  /// Registers every parameter as a leaf on `tape`, in index order.
  std::vector<Tensor> bind(Tape& tape);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> by_name_;
};

enum class Activation { ReLU, Tanh };

struct MlpConfig {
  /// Widths including input and output, e.g. {2, 128, 128, 128, 128} is a
  /// 4-layer network. A two-entry list is a single affine map.
  std::vector<int> layer_widths;
  Activation activation = Activation::ReLU;
  bool bias = true;
};

/// Uniform draw in [lo, hi) from the raw engine output (bit-reproducible
/// across standard libraries).
double uniform(std::mt19937_64& rng, double lo, double hi);

/// Feed-forward network: activation after every layer except the last.
class Mlp {
 public:
  Mlp() = default;
  /// Kaiming-uniform (fan-in, ReLU gain) for layers followed by an
  /// activation, uniform +-1/sqrt(fan_in) for the final affine layer.
  Mlp(const std::string& prefix, MlpConfig config, ParameterSet& params, std::mt19937_64& rng,
      const std::string& group = "main");

  const MlpConfig& config() const { return config_; }
  int input_dim() const { return config_.layer_widths.front(); }
  int output_dim() const { return config_.layer_widths.back(); }
  std::size_t layer_count() const { return weights_.size(); }
  bool empty() const { return weights_.empty(); }

  std::size_t weight_index(std::size_t layer) const { return weights_.at(layer); }
  /// Bias parameter index, or npos when the layer has none.
  std::size_t bias_index(std::size_t layer) const { return biases_.at(layer); }
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  /// Rows of x are samples.
  Matrix forward(const ParameterSet& params, const Matrix& x) const;
  Vector forward(const ParameterSet& params, const Vector& x) const;
  Tensor forward(const std::vector<Tensor>& bound, const Tensor& x) const;

  /// Tangent propagation J(x) * dx; ReLU kinks use the one-sided derivative
  /// from the positive side being inactive (d relu(0) = 0).
  Vector jvp(const ParameterSet& params, const Vector& x, const Vector& dx) const;

  std::size_t parameter_count(const ParameterSet& params) const;

 private:
  MlpConfig config_;
  std::vector<std::size_t> weights_;
  std::vector<std::size_t> biases_;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  /// Per-group learning-rate overrides (e.g. {"dynamics", 1e-5}).
  std::map<std::string, double> group_lr;
};

struct AdamWState {
  AdamWConfig config;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;
};

AdamWState make_adamw(const ParameterSet& params, AdamWConfig config);

/// Decoupled-weight-decay Adam: p <- p - lr*wd*p, then the bias-corrected
/// Adam update, using each parameter's group learning rate and p.grad.
/// Throws TrainingDivergence on non-finite gradients, leaving params intact.
void adamw_step(AdamWState& state, ParameterSet& params);

}  // namespace koopman_lab::nn
