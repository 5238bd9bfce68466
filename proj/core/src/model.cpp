#include "koopman_lab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <json.hpp>

#include "koopman_lab/checkpoint.hpp"
#include "koopman_lab/errors.hpp"
#include "koopman_lab/expm.hpp"
#include "koopman_lab/log.hpp"

namespace koopman_lab::koopman {

using nlohmann::json;
using grad::Tensor;

namespace {

constexpr double kSingularRcond = 1e-14;

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw InvalidArgument(std::string("unknown ") + what + " '" + s + "'");
}

Matrix uniform_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = nn::uniform(rng, -bound, bound);
  }
  return m;
}

std::vector<int> widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

}  // namespace

std::string encoder_kind_name(EncoderKind k) { return k == EncoderKind::Mlp ? "mlp" : "dictionary"; }
std::string decoder_kind_name(DecoderKind k) { return k == DecoderKind::Linear ? "linear" : "mlp"; }
std::string k_structure_name(KStructure k) {
  switch (k) {
    case KStructure::Dense: return "dense";
    case KStructure::Diagonal: return "diagonal";
    case KStructure::SkewSymmetric: return "skew_symmetric";
  }
  return "dense";
}
std::string discretization_name(Discretization d) { return d == Discretization::Bilinear ? "bilinear" : "exact"; }

EncoderKind parse_encoder_kind(const std::string& s) {
  return parse_enum<EncoderKind>(s, {{"mlp", EncoderKind::Mlp}, {"dictionary", EncoderKind::Dictionary}}, "encoder");
}
DecoderKind parse_decoder_kind(const std::string& s) {
  return parse_enum<DecoderKind>(s, {{"linear", DecoderKind::Linear}, {"mlp", DecoderKind::Mlp}}, "decoder");
}
KStructure parse_k_structure(const std::string& s) {
  return parse_enum<KStructure>(s,
                                {{"dense", KStructure::Dense},
                                 {"diagonal", KStructure::Diagonal},
                                 {"skew_symmetric", KStructure::SkewSymmetric}},
                                "k_structure");
}
Discretization parse_discretization(const std::string& s) {
  return parse_enum<Discretization>(s, {{"bilinear", Discretization::Bilinear}, {"exact", Discretization::Exact}},
                                    "discretization");
}

void ModelConfig::validate() const {
  std::vector<std::string> v;
  if (state_dim <= 0) v.push_back("model.state_dim must be positive");
  if (latent_dim < state_dim) v.push_back("model.latent_dim must be at least state_dim");
  if (control_dim < 0) v.push_back("model.control_dim must be non-negative");
  if (control_dim > 0 && control_embed_dim <= 0) v.push_back("model.control_embed_dim must be positive");
  if (!(dt > 0.0) || !std::isfinite(dt)) v.push_back("model.dt must be positive");
  auto check_widths = [&](const std::vector<int>& w, const char* name) {
    for (int x : w) {
      if (x <= 0) {
        v.push_back(std::string("model.") + name + " widths must be positive");
        break;
      }
    }
  };
  check_widths(encoder_hidden, "encoder_hidden");
  check_widths(decoder_hidden, "decoder_hidden");
  check_widths(action_hidden, "action_hidden");
  if (encoder == EncoderKind::Dictionary) {
    try {
      dictionary.validate();
      if (dictionary.input_dim() != state_dim) v.push_back("model.dictionary input dimension must equal state_dim");
      if (static_cast<int>(dictionary.size()) != latent_dim) v.push_back("model.latent_dim must equal dictionary size");
    } catch (const InvalidArgument& e) {
      v.push_back(std::string("model.dictionary: ") + e.what());
    }
  }
  if (!v.empty()) throw ConfigError(std::move(v));
}

std::string ModelConfig::to_json() const {
  json j = {{"state_dim", state_dim},
            {"latent_dim", latent_dim},
            {"control_dim", control_dim},
            {"control_embed_dim", control_embed_dim},
            {"encoder", encoder_kind_name(encoder)},
            {"encoder_hidden", encoder_hidden},
            {"decoder", decoder_kind_name(decoder)},
            {"decoder_hidden", decoder_hidden},
            {"decoder_bias", decoder_bias},
            {"action_hidden", action_hidden},
            {"k_structure", k_structure_name(k_structure)},
            {"nonlinear_latent", nonlinear_latent},
            {"discretization", discretization_name(discretization)},
            {"dt", dt},
            {"seed", seed}};
  if (encoder == EncoderKind::Dictionary) j["dictionary"] = dictionary.exponents;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed model config: ") + e.what());
  }
  ModelConfig c;
  try {
    c.state_dim = j.value("state_dim", c.state_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.control_dim = j.value("control_dim", c.control_dim);
    c.control_embed_dim = j.value("control_embed_dim", c.control_embed_dim);
    c.encoder = parse_encoder_kind(j.value("encoder", std::string("mlp")));
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.decoder = parse_decoder_kind(j.value("decoder", std::string("linear")));
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.decoder_bias = j.value("decoder_bias", c.decoder_bias);
    c.action_hidden = j.value("action_hidden", c.action_hidden);
    c.k_structure = parse_k_structure(j.value("k_structure", std::string("dense")));
    c.nonlinear_latent = j.value("nonlinear_latent", c.nonlinear_latent);
    c.discretization = parse_discretization(j.value("discretization", std::string("bilinear")));
    c.dt = j.value("dt", c.dt);
    c.seed = j.value("seed", c.seed);
    if (j.contains("dictionary")) c.dictionary.exponents = j.at("dictionary").get<std::vector<std::vector<int>>>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("model config: ") + e.what());
  }
  return c;
}

DiscreteOperators discretize_bilinear(const Matrix& K, const Matrix& L, double delta) {
  if (!(delta > 0.0)) throw InvalidArgument("discretize_bilinear: delta must be positive");
  if (K.rows() != K.cols()) throw InvalidArgument("discretize_bilinear: K must be square");
  if (L.size() > 0 && L.rows() != K.rows()) throw InvalidArgument("discretize_bilinear: L rows must match K");
  const auto n = K.rows();
  const Matrix I = Matrix::Identity(n, n);
  const Matrix A = I - 0.5 * delta * K;
  Eigen::PartialPivLU<Matrix> lu(A);
  // 1 / ||A^-1|| relative to the size of I and delta/2 K; plain rcond misses a tiny but well-conditioned A.
  const double scale = std::max(1.0, 0.5 * delta * K.cwiseAbs().colwise().sum().maxCoeff());
  const double rcond = lu.rcond() * A.cwiseAbs().colwise().sum().maxCoeff() / scale;
  if (!(rcond > kSingularRcond)) {
    throw DiscretizationError("discretize_bilinear: (I - delta/2 K) is singular, rcond " + std::to_string(rcond),
                              rcond);
  }
  DiscreteOperators ops;
  ops.delta = delta;
  ops.K = lu.solve(I + 0.5 * delta * K);
  if (L.size() > 0) ops.L = lu.solve(delta * L);
  return ops;
}

DiscreteOperators discretize_exact(const Matrix& K, const Matrix& L, double delta) {
  if (!(delta > 0.0)) throw InvalidArgument("discretize_exact: delta must be positive");
  if (K.rows() != K.cols()) throw InvalidArgument("discretize_exact: K must be square");
  DiscreteOperators ops;
  ops.delta = delta;
  if (L.size() == 0) {
    ops.K = expm(delta * K);
    return ops;
  }
  if (L.rows() != K.rows()) throw InvalidArgument("discretize_exact: L rows must match K");
  const auto n = K.rows();
  const auto m = L.cols();
  Matrix aug = Matrix::Zero(n + m, n + m);
  aug.topLeftCorner(n, n) = K;
  aug.topRightCorner(n, m) = L;
  const Matrix e = expm(delta * aug);
  ops.K = e.topLeftCorner(n, n);
  ops.L = e.topRightCorner(n, m);
  return ops;
}

Vector latent_step(const DiscreteOperators& ops, const Vector& z, const Vector& v) {
  if (z.size() != ops.K.cols()) throw InvalidArgument("latent_step: latent dimension mismatch");
  Vector next = ops.K * z;
  if (ops.has_control()) {
    if (v.size() == 0) throw InvalidArgument("latent_step: control required when L is present");
    if (v.size() != ops.L.cols()) throw InvalidArgument("latent_step: control dimension mismatch");
    next.noalias() += ops.L * v;
  } else if (v.size() != 0) {
    throw InvalidArgument("latent_step: control given but the operators have no L");
  }
  return next;
}

Vector latent_flow_exact(const Matrix& K, const Vector& z0, double t) {
  if (t < 0.0) throw InvalidArgument("latent_flow_exact: t must be non-negative");
  if (z0.size() != K.cols()) throw InvalidArgument("latent_flow_exact: dimension mismatch");
  if (t == 0.0) return z0;
  return expm(K * t) * z0;
}

KoopmanModel::KoopmanModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  build();
  sync();
}

KoopmanModel::KoopmanModel(ModelConfig config, const nn::ParameterSet& values) : config_(std::move(config)) {
  config_.validate();
  build();
  nn::assign_parameters(params_, values);
  sync();
}

void KoopmanModel::build() {
  std::mt19937_64 rng(config_.seed);
  const int d = config_.state_dim;
  const int n = config_.latent_dim;
  if (config_.encoder == EncoderKind::Mlp) {
    encoder_ = nn::Mlp("encoder", {widths(d, config_.encoder_hidden, n)}, params_, rng);
  }
  if (config_.decoder == DecoderKind::Linear) {
    nn::MlpConfig dc{{n, d}};
    dc.bias = config_.decoder_bias;
    decoder_ = nn::Mlp("decoder", dc, params_, rng);
  } else {
    decoder_ = nn::Mlp("decoder", {widths(n, config_.decoder_hidden, d)}, params_, rng);
  }
  const int e = config_.control_dim > 0 ? config_.control_embed_dim : 0;
  if (config_.control_dim > 0) {
    action_ = nn::Mlp("action", {widths(config_.control_dim, config_.action_hidden, e)}, params_, rng);
  }
  if (config_.nonlinear_latent) {
    latent_mlp_ = nn::Mlp("latent_mlp", {{n + e, n, n, n}}, params_, rng, kDynamicsGroup);
  } else {
    const double kb = 1.0 / std::sqrt(static_cast<double>(n));
    switch (config_.k_structure) {
      case KStructure::Dense:
      case KStructure::SkewSymmetric:
        k_index_ = params_.add("dynamics.K", uniform_matrix(rng, n, n, kb), kDynamicsGroup, true);
        break;
      case KStructure::Diagonal:
        k_index_ = params_.add("dynamics.K", uniform_matrix(rng, n, 1, kb), kDynamicsGroup, true);
        break;
    }
    if (e > 0) {
      l_index_ = params_.add("dynamics.L", uniform_matrix(rng, n, e, 1.0 / std::sqrt(static_cast<double>(e))),
                             kDynamicsGroup, true);
    }
  }
  log_delta_index_ = params_.add("dynamics.log_delta", Matrix::Constant(1, 1, std::log(config_.dt)),
                                 kDynamicsGroup, false);
}

void KoopmanModel::sync() {
  const double d = delta();
  if (!std::isfinite(d) || !(d > 0.0)) throw InvalidArgument("model step size is not a positive finite number");
  if (config_.nonlinear_latent) {
    ops_ = DiscreteOperators{};
    ops_.delta = d;
    return;
  }
  const Matrix K = continuous_K();
  const Matrix L = continuous_L();
  ops_ = config_.discretization == Discretization::Bilinear ? discretize_bilinear(K, L, d) : discretize_exact(K, L, d);
}

double KoopmanModel::delta() const { return std::exp(params_[log_delta_index_].value(0, 0)); }

Matrix KoopmanModel::continuous_K() const {
  if (k_index_ == nn::Mlp::npos) return Matrix();
  const Matrix& p = params_[k_index_].value;
  switch (config_.k_structure) {
    case KStructure::Dense: return p;
    case KStructure::Diagonal: return p.col(0).asDiagonal();
    case KStructure::SkewSymmetric: return p - p.transpose();
  }
  return p;
}

Matrix KoopmanModel::continuous_L() const {
  if (l_index_ == nn::Mlp::npos) return Matrix();
  return params_[l_index_].value;
}

Matrix KoopmanModel::generator() const {
  if (config_.nonlinear_latent || config_.control_dim > 0) return Matrix();
  return continuous_K();
}

const DiscreteOperators* KoopmanModel::linear_operators() const {
  return config_.nonlinear_latent ? nullptr : &ops_;
}

Vector KoopmanModel::encode(const Vector& x) const {
  if (x.size() != config_.state_dim) {
    throw InvalidArgument("encode: state has " + std::to_string(x.size()) + " entries, expected " +
                          std::to_string(config_.state_dim));
  }
  if (config_.encoder == EncoderKind::Dictionary) return config_.dictionary.evaluate(x);
  return encoder_.forward(params_, x);
}

Matrix KoopmanModel::encode_rows(const Matrix& x) const {
  if (x.cols() != config_.state_dim) throw InvalidArgument("encode: state dimension mismatch");
  if (config_.encoder == EncoderKind::Dictionary) return config_.dictionary.evaluate(x);
  return encoder_.forward(params_, x);
}

Vector KoopmanModel::decode(const Vector& z) const {
  if (z.size() != config_.latent_dim) {
    throw InvalidArgument("decode: latent has " + std::to_string(z.size()) + " entries, expected " +
                          std::to_string(config_.latent_dim));
  }
  return decoder_.forward(params_, z);
}

Matrix KoopmanModel::decode_rows(const Matrix& z) const {
  if (z.cols() != config_.latent_dim) throw InvalidArgument("decode: latent dimension mismatch");
  return decoder_.forward(params_, z);
}

Vector KoopmanModel::encode_control(const Vector& u) const {
  if (config_.control_dim == 0) {
    if (u.size() != 0) throw InvalidArgument("encode_control: model has no control input");
    return Vector();
  }
  if (u.size() != config_.control_dim) throw InvalidArgument("encode_control: control dimension mismatch");
  return action_.forward(params_, u);
}

Vector KoopmanModel::advance(const Vector& z, const Vector& u) const {
  if (config_.control_dim > 0 && u.size() == 0) throw InvalidArgument("advance: control required");
  const Vector v = encode_control(u);
  if (!config_.nonlinear_latent) return latent_step(ops_, z, v);
  if (z.size() != config_.latent_dim) throw InvalidArgument("advance: latent dimension mismatch");
  Vector in(z.size() + v.size());
  in << z, v;
  return latent_mlp_.forward(params_, in);
}

Vector KoopmanModel::decoder_jvp(const Vector& z, const Vector& dz) const {
  if (z.size() != config_.latent_dim || dz.size() != config_.latent_dim) {
    throw InvalidArgument("decoder_jvp: latent dimension mismatch");
  }
  return decoder_.jvp(params_, z, dz);
}

NormalizeReport KoopmanModel::normalize_decoder_columns() {
  NormalizeReport report;
  if (config_.decoder != DecoderKind::Linear) {
    log::warn("normalize_decoder_columns: decoder is an MLP, nothing to do");
    return report;
  }
  Matrix& w = params_[decoder_.weight_index(0)].value;
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    const double norm = w.col(c).norm();
    if (norm == 0.0) {
      report.zero_columns.push_back(static_cast<int>(c));
      log::warn("normalize_decoder_columns: column " + std::to_string(c) + " is zero, left unchanged");
      continue;
    }
    w.col(c) /= norm;
  }
  report.applied = true;
  return report;
}

std::size_t KoopmanModel::encoder_parameter_count() const {
  return encoder_.empty() ? 0 : encoder_.parameter_count(params_);
}

std::size_t KoopmanModel::decoder_parameter_count() const { return decoder_.parameter_count(params_); }

std::size_t KoopmanModel::dynamics_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.group == kDynamicsGroup) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

TapedModel::TapedModel(const KoopmanModel& model, grad::Tape& tape, nn::ParameterSet& params)
    : model_(&model), tape_(&tape), bound_(params.bind(tape)) {
  const auto& cfg = model.config_;
  if (cfg.nonlinear_latent) return;
  const auto n = static_cast<Eigen::Index>(cfg.latent_dim);
  const Tensor p = bound_[model.k_index_];
  Tensor K;
  switch (cfg.k_structure) {
    case KStructure::Dense: K = p; break;
    case KStructure::Diagonal: K = grad::diag(p); break;
    case KStructure::SkewSymmetric: K = grad::sub(p, grad::transpose(p)); break;
  }
  const bool control = model.l_index_ != nn::Mlp::npos;
  const Tensor delta = grad::exp(bound_[model.log_delta_index_]);
  Tensor Kd, Ld;
  if (cfg.discretization == Discretization::Bilinear) {
    const Tensor I = tape.constant(Matrix::Identity(n, n));
    const Tensor half = grad::mul_scalar(delta, grad::scale(K, 0.5));
    const Tensor A = grad::sub(I, half);
    Kd = grad::solve(A, grad::add(I, half));
    if (control) Ld = grad::solve(A, grad::mul_scalar(delta, bound_[model.l_index_]));
  } else if (!control) {
    Kd = expm(grad::mul_scalar(delta, K));
  } else {
    const Tensor L = bound_[model.l_index_];
    const auto m = L.cols();
    const Tensor top = grad::concat({K, L}, 1);
    const Tensor bottom = tape.constant(Matrix::Zero(m, n + m));
    const Tensor e = expm(grad::mul_scalar(delta, grad::concat({top, bottom}, 0)));
    const Tensor upper = grad::slice_rows(e, 0, n);
    Kd = grad::slice_cols(upper, 0, n);
    Ld = grad::slice_cols(upper, n, m);
  }
  kd_t_ = grad::transpose(Kd);
  if (control) ld_t_ = grad::transpose(Ld);
}

Tensor TapedModel::encode(const Tensor& x) const {
  const auto& cfg = model_->config_;
  if (x.cols() != cfg.state_dim) throw InvalidArgument("encode: state dimension mismatch");
  if (cfg.encoder == EncoderKind::Dictionary) return cfg.dictionary.evaluate(x);
  return model_->encoder_.forward(bound_, x);
}

Tensor TapedModel::decode(const Tensor& z) const {
  if (z.cols() != model_->config_.latent_dim) throw InvalidArgument("decode: latent dimension mismatch");
  return model_->decoder_.forward(bound_, z);
}

Tensor TapedModel::encode_control(const Tensor& u) const {
  if (model_->config_.control_dim == 0) throw InvalidArgument("encode_control: model has no control input");
  return model_->action_.forward(bound_, u);
}

Tensor TapedModel::advance(const Tensor& z, const Tensor& v) const {
  const bool control = model_->config_.control_dim > 0;
  if (control != v.valid()) throw InvalidArgument("advance: control must be given iff the model is controlled");
  if (model_->config_.nonlinear_latent) {
    return model_->latent_mlp_.forward(bound_, control ? grad::concat({z, v}, 1) : z);
  }
  Tensor next = grad::matmul(z, kd_t_);
  if (control) next = grad::add(next, grad::matmul(v, ld_t_));
  return next;
}

KoopmanModel make_parabolic_oracle(double mu, double lambda, double dt) {
  ModelConfig c;
  c.state_dim = 2;
  c.encoder = EncoderKind::Dictionary;
  c.dictionary = dmd::MonomialDictionary::identity_plus(2, {{2, 0}});
  c.latent_dim = 3;
  c.decoder = DecoderKind::Linear;
  c.decoder_bias = false;
  c.discretization = Discretization::Exact;
  c.dt = dt;
  KoopmanModel m(c);
  auto& p = m.params();
  Matrix w = Matrix::Zero(2, 3);
  w(0, 0) = 1.0;
  w(1, 1) = 1.0;
  p[p.index_of("decoder.0.weight")].value = w;
  Matrix K(3, 3);
  K << mu, 0.0, 0.0, 0.0, lambda, -lambda, 0.0, 0.0, 2.0 * mu;
  p[p.index_of("dynamics.K")].value = K;
  m.sync();
  return m;
}

void randomize_parameters(KoopmanModel& model, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  for (auto& p : model.params()) {
    if (p.name == "dynamics.log_delta") continue;
    p.value = uniform_matrix(rng, p.value.rows(), p.value.cols(), scale);
  }
  model.sync();
}

}  // namespace koopman_lab::koopman

namespace koopman_lab::koopman {

void save_model(const std::filesystem::path& stem, const KoopmanModel& model) {
  const json block = {{"model", json::parse(model.config().to_json())}};
  nn::save_checkpoint(stem, model.params(), block.dump());
}

KoopmanModel load_model(const std::filesystem::path& stem) {
  auto loaded = nn::load_checkpoint(stem);
  json block;
  try {
    block = json::parse(loaded.config_json);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint config block is malformed: ") + e.what());
  }
  if (!block.contains("model")) throw IoError("checkpoint lacks a model config block");
  return KoopmanModel(ModelConfig::from_json(block.at("model").dump()), loaded.params);
}

}  // namespace koopman_lab::koopman
