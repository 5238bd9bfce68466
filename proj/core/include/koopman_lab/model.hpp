#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "koopman_lab/dmd.hpp"
#include "koopman_lab/grad.hpp"
#include "koopman_lab/nn.hpp"

namespace koopman_lab::koopman {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class EncoderKind { Mlp, Dictionary };
enum class DecoderKind { Linear, Mlp };
enum class KStructure { Dense, Diagonal, SkewSymmetric };
enum class Discretization { Bilinear, Exact };

std::string encoder_kind_name(EncoderKind k);
std::string decoder_kind_name(DecoderKind k);
std::string k_structure_name(KStructure k);
std::string discretization_name(Discretization d);
EncoderKind parse_encoder_kind(const std::string& s);
DecoderKind parse_decoder_kind(const std::string& s);
KStructure parse_k_structure(const std::string& s);
Discretization parse_discretization(const std::string& s);

struct ModelConfig {
  int state_dim = 2;
  int latent_dim = 128;
  int control_dim = 0;
  int control_embed_dim = 128;

  EncoderKind encoder = EncoderKind::Mlp;
  std::vector<int> encoder_hidden{128, 128, 128};
  dmd::MonomialDictionary dictionary;  // EncoderKind::Dictionary; latent_dim = dictionary.size()

  DecoderKind decoder = DecoderKind::Linear;
  std::vector<int> decoder_hidden{128, 128, 128};
  bool decoder_bias = true;

  std::vector<int> action_hidden{128};

  KStructure k_structure = KStructure::Dense;
  bool nonlinear_latent = false;  // 3-layer MLP of width latent_dim replaces K, L
  Discretization discretization = Discretization::Bilinear;
  double dt = 0.01;               // initial delta
  std::uint64_t seed = 0;

  /// Throws ConfigError listing every problem.
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct DiscreteOperators {
  Matrix K;  // n x n
  Matrix L;  // n x m, empty without controls
  double delta = 0.0;

  bool has_control() const { return L.size() > 0; }
};

/// K_d = (I - delta/2 K)^{-1}(I + delta/2 K), L_d = (I - delta/2 K)^{-1} delta L.
/// Throws DiscretizationError when the left factor is singular.
DiscreteOperators discretize_bilinear(const Matrix& K, const Matrix& L, double delta);

/// K_d = expm(delta K); with controls, the zero-order-hold block
/// expm(delta [[K, L], [0, 0]]).
DiscreteOperators discretize_exact(const Matrix& K, const Matrix& L, double delta);

/// K_d z + L_d v. `v` must be given iff the operators carry L.
Vector latent_step(const DiscreteOperators& ops, const Vector& z, const Vector& v = Vector());

/// expm(K t) z0.
Vector latent_flow_exact(const Matrix& K, const Vector& z0, double t);

/// What rollouts need from any encode/advance/decode model.
class LatentModel {
 public:
  virtual ~LatentModel() = default;

  virtual int state_dim() const = 0;
  virtual int latent_dim() const = 0;
  virtual int control_dim() const { return 0; }
  virtual double step_size() const = 0;

  virtual Vector encode(const Vector& x) const = 0;
  virtual Vector decode(const Vector& z) const = 0;
  /// One discrete latent step; `u` is the raw control (empty if none).
  virtual Vector advance(const Vector& z, const Vector& u) const = 0;

  /// Discrete linear operators in control-embedding space, when the latent
  /// dynamics are linear. Enables the parallel scan.
  virtual const DiscreteOperators* linear_operators() const { return nullptr; }
  virtual Vector encode_control(const Vector& u) const { return u; }
  /// Continuous generator for exact flows; empty if unsupported.
  virtual Matrix generator() const { return Matrix(); }
};

struct NormalizeReport {
  bool applied = false;
  std::vector<int> zero_columns;
};

class KoopmanModel;

/// Model bound to one tape for a training step: every parameter is a leaf
/// and the discrete operators are recorded once.
class TapedModel {
 public:
  TapedModel(const KoopmanModel& model, grad::Tape& tape, nn::ParameterSet& params);

  /// Rows are samples.
  grad::Tensor encode(const grad::Tensor& x) const;
  grad::Tensor decode(const grad::Tensor& z) const;
  grad::Tensor encode_control(const grad::Tensor& u) const;
  /// `v` is the encoded control (invalid when uncontrolled).
  grad::Tensor advance(const grad::Tensor& z, const grad::Tensor& v) const;
  grad::Tape& tape() const { return *tape_; }

 private:
  const KoopmanModel* model_;
  grad::Tape* tape_;
  std::vector<grad::Tensor> bound_;
  grad::Tensor kd_t_;  // K_d^T
  grad::Tensor ld_t_;  // L_d^T
};

class KoopmanModel : public LatentModel {
 public:
  explicit KoopmanModel(ModelConfig config);
  /// Rebuilds the network skeleton and copies values by name.
  KoopmanModel(ModelConfig config, const nn::ParameterSet& values);

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  /// Recomputes cached discrete operators after a parameter change.
  void sync();

  int state_dim() const override { return config_.state_dim; }
  int latent_dim() const override { return config_.latent_dim; }
  int control_dim() const override { return config_.control_dim; }
  double step_size() const override { return ops_.delta; }

  Vector encode(const Vector& x) const override;
  Vector decode(const Vector& z) const override;
  Vector advance(const Vector& z, const Vector& u) const override;
  Vector encode_control(const Vector& u) const override;
  const DiscreteOperators* linear_operators() const override;
  Matrix generator() const override;

  /// Batched forms; rows are samples.
  Matrix encode_rows(const Matrix& x) const;
  Matrix decode_rows(const Matrix& z) const;

  Matrix continuous_K() const;
  Matrix continuous_L() const;
  double delta() const;
  const DiscreteOperators& operators() const { return ops_; }

  /// J_psi(z) dz.
  Vector decoder_jvp(const Vector& z, const Vector& dz) const;

  /// Rescales decoder weight columns to unit norm (linear decoder only).
  NormalizeReport normalize_decoder_columns();

  std::size_t encoder_parameter_count() const;
  std::size_t decoder_parameter_count() const;
  std::size_t dynamics_parameter_count() const;

  TapedModel bind(grad::Tape& tape) { return TapedModel(*this, tape, params_); }

  static constexpr const char* kDynamicsGroup = "dynamics";

 private:
  friend class TapedModel;
  void build();

  ModelConfig config_;
  nn::ParameterSet params_;
  nn::Mlp encoder_;
  nn::Mlp decoder_;  // a single affine layer for DecoderKind::Linear
  nn::Mlp action_;
  nn::Mlp latent_mlp_;
  std::size_t k_index_ = nn::Mlp::npos;
  std::size_t l_index_ = nn::Mlp::npos;
  std::size_t log_delta_index_ = nn::Mlp::npos;
  DiscreteOperators ops_;
};

/// Checkpoint = parameter blob + {"model": config} block.
void save_model(const std::filesystem::path& stem, const KoopmanModel& model);
KoopmanModel load_model(const std::filesystem::path& stem);

/// Hand-built exact embedding of the parabolic attractor:
/// phi(x) = (x1, x2, x1^2), psi selects the first two coordinates,
/// K = [[mu, 0, 0], [0, lambda, -lambda], [0, 0, 2 mu]], exact discretization.
KoopmanModel make_parabolic_oracle(double mu, double lambda, double dt);

/// Fills every parameter with draws from U(-scale, scale); for randomized
/// property tests.
void randomize_parameters(KoopmanModel& model, std::uint64_t seed, double scale);

}  // namespace koopman_lab::koopman
