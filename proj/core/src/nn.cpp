#include "koopman_lab/nn.hpp"

#include <cmath>

#include "koopman_lab/errors.hpp"

namespace koopman_lab::nn {

std::size_t ParameterSet::add(std::string name, Matrix value, std::string group, bool decay) {
  if (by_name_.contains(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
  Parameter p;
  p.name = name;
  p.grad = Matrix::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  p.group = std::move(group);
  p.decay = decay;
  params_.push_back(std::move(p));
  by_name_[name] = params_.size() - 1;
  return params_.size() - 1;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw InvalidArgument("no parameter named '" + name + "'");
  return it->second;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::vector<Tensor> ParameterSet::bind(Tape& tape) {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(tape.parameter(p));
  return out;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

namespace {

Matrix uniform_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Matrix m(rows, cols);
  // Fill row-major so the draw order does not depend on storage order.
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = uniform(rng, -bound, bound);
  }
  return m;
}

Matrix activate(Activation a, const Matrix& x) {
  switch (a) {
    case Activation::ReLU: return x.cwiseMax(0.0);
    case Activation::Tanh: return x.array().tanh().matrix();
  }
  return x;
}

}  // namespace

Mlp::Mlp(const std::string& prefix, MlpConfig config, ParameterSet& params, std::mt19937_64& rng,
         const std::string& group)
    : config_(std::move(config)) {
  const auto& w = config_.layer_widths;
  if (w.size() < 2) throw InvalidArgument(prefix + ": an MLP needs at least input and output widths");
  for (int width : w) {
    if (width <= 0) throw InvalidArgument(prefix + ": layer widths must be positive");
  }
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const int fan_in = w[l];
    const int fan_out = w[l + 1];
    const bool hidden = l + 2 < w.size();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(fan_in));
    const double wbound = hidden && config_.activation == Activation::ReLU ? std::sqrt(6.0) * inv_sqrt : inv_sqrt;
    const std::string base = prefix + "." + std::to_string(l);
    weights_.push_back(params.add(base + ".weight", uniform_matrix(rng, fan_out, fan_in, wbound), group, true));
    if (config_.bias) {
      biases_.push_back(params.add(base + ".bias", uniform_matrix(rng, fan_out, 1, inv_sqrt), group, false));
    } else {
      biases_.push_back(npos);
    }
  }
}

Matrix Mlp::forward(const ParameterSet& params, const Matrix& x) const {
  if (x.cols() != input_dim()) {
    throw InvalidArgument("mlp forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                          std::to_string(input_dim()));
  }
  Matrix h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Matrix next;
    next.noalias() = h * params[weights_[l]].value.transpose();
    if (biases_[l] != npos) next.rowwise() += params[biases_[l]].value.col(0).transpose();
    h = l + 1 < weights_.size() ? activate(config_.activation, next) : std::move(next);
  }
  return h;
}

Vector Mlp::forward(const ParameterSet& params, const Vector& x) const {
  if (x.size() != input_dim()) {
    throw InvalidArgument("mlp forward: input has " + std::to_string(x.size()) + " entries, expected " +
                          std::to_string(input_dim()));
  }
  Vector h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Vector next;
    next.noalias() = params[weights_[l]].value * h;
    if (biases_[l] != npos) next += params[biases_[l]].value.col(0);
    h = l + 1 < weights_.size() ? Vector(activate(config_.activation, next)) : std::move(next);
  }
  return h;
}

Tensor Mlp::forward(const std::vector<Tensor>& bound, const Tensor& x) const {
  Tensor h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const Tensor bias = biases_[l] != npos ? bound[biases_[l]] : Tensor();
    h = grad::linear(h, bound[weights_[l]], bias);
    if (l + 1 < weights_.size()) {
      if (config_.activation != Activation::ReLU) throw InvalidArgument("taped MLP supports ReLU only");
      h = grad::relu(h);
    }
  }
  return h;
}

Vector Mlp::jvp(const ParameterSet& params, const Vector& x, const Vector& dx) const {
  if (x.size() != input_dim() || dx.size() != input_dim()) throw InvalidArgument("mlp jvp: dimension mismatch");
  Vector h = x;
  Vector t = dx;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const Matrix& w = params[weights_[l]].value;
    Vector pre = w * h;
    if (biases_[l] != npos) pre += params[biases_[l]].value.col(0);
    t = w * t;
    if (l + 1 < weights_.size()) {
      if (config_.activation == Activation::ReLU) {
        t = (pre.array() > 0.0).select(t, 0.0);
      } else {
        t = t.cwiseProduct((1.0 - pre.array().tanh().square()).matrix());
      }
      h = activate(config_.activation, pre);
    } else {
      h = pre;
    }
  }
  return t;
}

std::size_t Mlp::parameter_count(const ParameterSet& params) const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    n += static_cast<std::size_t>(params[weights_[l]].value.size());
    if (biases_[l] != npos) n += static_cast<std::size_t>(params[biases_[l]].value.size());
  }
  return n;
}

AdamWState make_adamw(const ParameterSet& params, AdamWConfig config) {
  AdamWState s;
  s.config = std::move(config);
  for (const auto& p : params) {
    s.first_moment.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    s.second_moment.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
  return s;
}

void adamw_step(AdamWState& state, ParameterSet& params) {
  if (state.first_moment.size() != params.size()) throw InvalidArgument("adamw_step: state/parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
      throw InvalidArgument("adamw_step: gradient shape mismatch for '" + p.name + "'");
    }
    if (state.first_moment[i].rows() != p.value.rows() || state.first_moment[i].cols() != p.value.cols()) {
      throw InvalidArgument("adamw_step: moment shape mismatch for '" + p.name + "'");
    }
    if (!p.grad.allFinite()) {
      throw TrainingDivergence("adamw_step: non-finite gradient for '" + p.name + "'", state.step + 1);
    }
  }
  const auto& cfg = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto it = cfg.group_lr.find(p.group);
    const double lr = it != cfg.group_lr.end() ? it->second : cfg.lr;
    if (p.decay && cfg.weight_decay != 0.0) p.value *= (1.0 - lr * cfg.weight_decay);
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * p.grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  }
}

}  // namespace koopman_lab::nn
