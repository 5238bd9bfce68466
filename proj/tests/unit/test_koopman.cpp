#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "gradcheck.hpp"
#include "koopman_lab/dynsys.hpp"
#include "koopman_lab/errors.hpp"
#include "koopman_lab/expm.hpp"
#include "koopman_lab/log.hpp"
#include "koopman_lab/model.hpp"
#include "test_util.hpp"

using namespace koopman_lab;
using namespace koopman_lab::koopman;
using koopman_lab::testing::random_matrix;
using koopman_lab::testing::random_stable;

namespace {

ModelConfig small_config(int d = 2, int n = 8) {
  ModelConfig c;
  c.state_dim = d;
  c.latent_dim = n;
  c.encoder_hidden = {16, 16};
  c.decoder_hidden = {16};
  c.seed = 3;
  return c;
}

void set_delta(KoopmanModel& m, double delta) {
  auto& p = m.params();
  p[p.index_of("dynamics.log_delta")].value(0, 0) = std::log(delta);
  m.sync();
}

Vector v2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

/// Records warnings while alive.
class WarningCapture {
 public:
  WarningCapture() {
    previous_ = log::set_sink([this](log::Level level, std::string_view m) {
      if (level == log::Level::Warning) messages.emplace_back(m);
    });
  }
  ~WarningCapture() { log::set_sink(previous_); }
  std::vector<std::string> messages;

 private:
  log::Sink previous_;
};

}  // namespace

TEST(Encode, Deterministic) {
  KoopmanModel m(small_config());
  const Vector x = v2(0.3, -0.2);
  EXPECT_EQ(m.encode(x), m.encode(x));
  KoopmanModel again(small_config());
  EXPECT_EQ(m.encode(x), again.encode(x));
}

TEST(Encode, ParabolicOracleEmbedding) {
  const auto m = make_parabolic_oracle(-0.1, -1.0, 0.01);
  const Vector z = m.encode(v2(0.5, -0.25));
  ASSERT_EQ(z.size(), 3);
  EXPECT_EQ(z[0], 0.5);
  EXPECT_EQ(z[1], -0.25);
  EXPECT_EQ(z[2], 0.25);
}

TEST(Encode, ZeroWeightsGiveZero) {
  KoopmanModel m(small_config());
  for (auto& p : m.params()) {
    if (p.name.rfind("encoder.", 0) == 0) p.value.setZero();
  }
  EXPECT_EQ(m.encode(v2(1.0, 2.0)), Vector::Zero(8));
}

TEST(Encode, DimensionMismatch) {
  KoopmanModel m(small_config());
  EXPECT_THROW(m.encode(Vector::Zero(3)), InvalidArgument);
  EXPECT_THROW(m.decode(Vector::Zero(3)), InvalidArgument);
}

TEST(Decode, OracleSelectsFirstTwo) {
  const auto m = make_parabolic_oracle(-0.1, -1.0, 0.01);
  for (double a : {-0.9, 0.0, 0.4}) {
    const Vector x = v2(a, 0.7 * a - 0.1);
    EXPECT_EQ(m.decode(m.encode(x)), x);
  }
  EXPECT_EQ(m.decode(Vector::Zero(3)), Vector::Zero(2));
}

TEST(Decode, ZeroLatentZeroBias) {
  auto c = small_config();
  c.decoder_bias = false;
  KoopmanModel m(c);
  EXPECT_EQ(m.decode(Vector::Zero(8)), Vector::Zero(2));
}

TEST(Config, RejectsUndercompleteLatentAndListsEverything) {
  auto c = small_config(3, 2);
  c.dt = -1.0;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_GE(e.violations().size(), 2u);
  }
}

TEST(Config, JsonRoundTrip) {
  auto c = small_config();
  c.k_structure = KStructure::SkewSymmetric;
  c.decoder = DecoderKind::Mlp;
  c.discretization = Discretization::Exact;
  const auto back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(ModelConfig::from_json(R"({"k_structure": "banded"})"), InvalidArgument);
}

TEST(Model, LogDeltaStartsAtEnvironmentStep) {
  auto c = small_config();
  c.dt = 0.02;
  KoopmanModel m(c);
  EXPECT_NEAR(m.delta(), 0.02, 1e-15);
  EXPECT_NEAR(m.step_size(), 0.02, 1e-15);
  const auto& p = m.params()[m.params().index_of("dynamics.log_delta")];
  EXPECT_EQ(p.group, KoopmanModel::kDynamicsGroup);
}

TEST(Model, StructuredK) {
  auto c = small_config();
  c.k_structure = KStructure::SkewSymmetric;
  KoopmanModel skew(c);
  randomize_parameters(skew, 4, 1.0);
  const Matrix K = skew.continuous_K();
  EXPECT_EQ(K, Matrix(-K.transpose()));

  c.k_structure = KStructure::Diagonal;
  KoopmanModel diag(c);
  randomize_parameters(diag, 5, 1.0);
  const Matrix D = diag.continuous_K();
  for (int i = 0; i < D.rows(); ++i) {
    for (int j = 0; j < D.cols(); ++j) {
      if (i != j) EXPECT_EQ(D(i, j), 0.0);
    }
  }
  EXPECT_NE(D.diagonal().norm(), 0.0);
}

TEST(Model, OperatorsRecomputedOnSync) {
  KoopmanModel m(small_config());
  const Matrix before = m.operators().K;
  set_delta(m, 0.05);
  EXPECT_NE(m.operators().K, before);
  EXPECT_TRUE(m.operators().K.isApprox(discretize_bilinear(m.continuous_K(), Matrix(), 0.05).K));
}

TEST(Model, NonlinearLatent) {
  auto c = small_config();
  c.nonlinear_latent = true;
  KoopmanModel m(c);
  EXPECT_EQ(m.linear_operators(), nullptr);
  EXPECT_EQ(m.generator().size(), 0);
  const Vector z = m.advance(m.encode(v2(0.1, 0.2)), Vector());
  EXPECT_EQ(z.size(), 8);
  EXPECT_TRUE(m.params().contains("latent_mlp.2.weight"));
}

TEST(Model, ControlledAdvance) {
  auto c = small_config();
  c.control_dim = 1;
  c.control_embed_dim = 4;
  c.action_hidden = {8};
  KoopmanModel m(c);
  EXPECT_EQ(m.continuous_L().rows(), 8);
  EXPECT_EQ(m.continuous_L().cols(), 4);
  const Vector z = m.encode(v2(0.1, 0.2));
  const Vector u = Vector::Constant(1, 0.3);
  const Vector expected = latent_step(m.operators(), z, m.encode_control(u));
  EXPECT_EQ(m.advance(z, u), expected);
  EXPECT_THROW(m.advance(z, Vector()), InvalidArgument);
  EXPECT_EQ(m.generator().size(), 0);
}

TEST(Model, TapedForwardMatchesPlain) {
  for (bool control : {false, true}) {
    auto c = small_config();
    c.decoder = DecoderKind::Mlp;
    if (control) {
      c.control_dim = 2;
      c.control_embed_dim = 3;
      c.action_hidden = {5};
    }
    KoopmanModel m(c);
    std::mt19937_64 rng(1);
    const Matrix x = random_matrix(rng, 4, 2);
    const Matrix u = random_matrix(rng, 4, c.control_dim);
    grad::Tape tape;
    const auto tm = m.bind(tape);
    const auto z = tm.encode(tape.constant(x));
    EXPECT_TRUE(z.value().isApprox(m.encode_rows(x), 1e-14));
    EXPECT_TRUE(tm.decode(z).value().isApprox(m.decode_rows(z.value()), 1e-14));
    const auto v = control ? tm.encode_control(tape.constant(u)) : grad::Tensor();
    const auto next = tm.advance(z, v);
    for (int r = 0; r < 4; ++r) {
      const Vector ur = control ? Vector(u.row(r).transpose()) : Vector();
      const Vector expected = m.advance(m.encode_rows(x).row(r).transpose(), ur);
      EXPECT_LT((next.value().row(r).transpose() - expected).norm(), 1e-12);
    }
  }
}

TEST(Model, TapedExactDiscretizationMatches) {
  auto c = small_config();
  c.discretization = Discretization::Exact;
  c.control_dim = 1;
  c.control_embed_dim = 2;
  c.action_hidden = {4};
  KoopmanModel m(c);
  grad::Tape tape;
  const auto tm = m.bind(tape);
  const Matrix z = Matrix::Identity(8, 8);
  const auto next = tm.advance(tape.constant(z), tape.constant(Matrix::Zero(8, 2)));
  EXPECT_LT((next.value().transpose() - m.operators().K).norm(), 1e-12);
}

TEST(Model, SaveLoadRoundTrip) {
  koopman_lab::testing::TempDir dir;
  auto c = small_config();
  c.decoder = DecoderKind::Mlp;
  KoopmanModel m(c);
  randomize_parameters(m, 8, 0.3);
  save_model(dir / "m", m);
  const auto back = load_model(dir / "m");
  const Vector x = v2(0.2, 0.9);
  EXPECT_EQ(back.encode(x), m.encode(x));
  EXPECT_EQ(back.decode(m.encode(x)), m.decode(m.encode(x)));
  EXPECT_EQ(back.operators().K, m.operators().K);
  EXPECT_EQ(back.config().to_json(), m.config().to_json());
}

TEST(Bilinear, ZeroGenerator) {
  Matrix L(3, 2);
  L << 1, 2, 3, 4, 5, 6;
  const auto ops = discretize_bilinear(Matrix::Zero(3, 3), L, 0.1);
  EXPECT_EQ(ops.K, Matrix(Matrix::Identity(3, 3)));
  EXPECT_TRUE(ops.L.isApprox(0.1 * L, 1e-15));
  EXPECT_DOUBLE_EQ(ops.delta, 0.1);
}

TEST(Bilinear, ScalarRational) {
  const auto ops = discretize_bilinear(Matrix::Constant(1, 1, -1.0), Matrix(), 0.01);
  EXPECT_NEAR(ops.K(0, 0), 0.995 / 1.005, 1e-15);
  EXPECT_NEAR(ops.K(0, 0), 0.9900497512437811, 1e-15);
  EXPECT_LT(std::abs(ops.K(0, 0) - std::exp(-0.01)), 1e-7);
  EXPECT_FALSE(ops.has_control());
}

TEST(Bilinear, SingularFactorReported) {
  // I - delta/2 K = 0 for K = (2/delta) I.
  try {
    discretize_bilinear(Matrix::Identity(2, 2) * 20.0, Matrix(), 0.1);
    FAIL() << "expected DiscretizationError";
  } catch (const DiscretizationError& e) {
    EXPECT_LE(e.condition_estimate(), 1e-14);
  }
  EXPECT_THROW(discretize_bilinear(Matrix::Zero(2, 2), Matrix(), 0.0), InvalidArgument);
}

TEST(Bilinear, SecondOrderConvergence) {
  std::mt19937_64 rng(11);
  const Matrix K = random_stable(rng, 6, 0.2);
  const Vector z0 = Vector::Random(6);
  const double t = 1.0;
  const Vector exact = latent_flow_exact(K, z0, t);
  auto err = [&](int steps) {
    const auto ops = discretize_bilinear(K, Matrix(), t / steps);
    Vector z = z0;
    for (int i = 0; i < steps; ++i) z = latent_step(ops, z);
    return (z - exact).norm();
  };
  for (int steps : {8, 16, 32}) {
    const double ratio = err(steps) / err(2 * steps);
    EXPECT_GE(ratio, 3.0) << steps;
    EXPECT_LE(ratio, 5.0) << steps;
  }
}

TEST(LatentStep, IdentityAndControl) {
  DiscreteOperators id{Matrix::Identity(3, 3), Matrix(), 0.1};
  const Vector z = Vector::Random(3);
  EXPECT_EQ(latent_step(id, z), z);
  DiscreteOperators ctl{Matrix::Identity(3, 3), Matrix::Ones(3, 2), 0.1};
  EXPECT_EQ(latent_step(ctl, z, Vector::Zero(2)), z);
  EXPECT_THROW(latent_step(ctl, z), InvalidArgument);
  EXPECT_THROW(latent_step(id, z, Vector::Zero(2)), InvalidArgument);
}

TEST(LatentStep, OracleExactStepMatchesClosedForm) {
  const double mu = -0.1, lambda = -1.0, delta = 0.01;
  const auto m = make_parabolic_oracle(mu, lambda, delta);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Vector x0 = v2(u(rng), u(rng));
    const Vector z1 = latent_step(m.operators(), m.encode(x0));
    const Vector x1 = dynsys::parabolic_closed_form(x0, delta, mu, lambda);
    EXPECT_LT((m.decode(z1) - x1).norm(), 1e-9);
    EXPECT_NEAR(z1[2], x1[0] * x1[0], 1e-9);
  }
}

TEST(ExactFlow, Identities) {
  std::mt19937_64 rng(13);
  const Matrix K = random_matrix(rng, 4, 4);
  const Vector z0 = Vector::Random(4);
  EXPECT_EQ(latent_flow_exact(K, z0, 0.0), z0);
  EXPECT_THROW(latent_flow_exact(K, z0, -1.0), InvalidArgument);
}

TEST(ExactFlow, QuarterRotation) {
  const double theta = std::numbers::pi / 2.0;
  Matrix K(2, 2);
  K << 0.0, theta, -theta, 0.0;
  const Vector z = latent_flow_exact(K, v2(1.0, 0.0), 1.0);
  EXPECT_NEAR(z[0], 0.0, 1e-12);
  EXPECT_NEAR(z[1], -1.0, 1e-12);
}

TEST(ExactFlow, Diagonal) {
  Matrix K = Matrix::Zero(2, 2);
  K(0, 0) = -1.0;
  K(1, 1) = -2.0;
  const Vector z = latent_flow_exact(K, v2(3.0, -1.0), 1.0);
  EXPECT_NEAR(z[0], 3.0 * std::exp(-1.0), 1e-15);
  EXPECT_NEAR(z[1], -std::exp(-2.0), 1e-15);
}

TEST(ExactFlow, SkewSymmetricPreservesNorm) {
  std::mt19937_64 rng(14);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix P = random_matrix(rng, 8, 8);
    const Matrix K = P - P.transpose();
    const Vector z0 = Vector::Random(8);
    for (double t : {0.1, 1.0, 10.0, 100.0}) {
      worst = std::max(worst, std::abs(latent_flow_exact(K, z0, t).norm() - z0.norm()));
    }
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(Expm, MatchesEigenAcrossPadeDegrees) {
  std::mt19937_64 rng(15);
  // 1-norms spanning every degree threshold plus scaling.
  for (double scale : {1e-3, 0.02, 0.2, 0.8, 2.0, 5.0, 40.0}) {
    for (int n : {1, 3, 8}) {
      Matrix a = random_matrix(rng, n, n);
      a *= scale / a.cwiseAbs().colwise().sum().maxCoeff();
      const Matrix ours = expm(a);
      const Matrix ref = a.exp();
      EXPECT_LT((ours - ref).norm() / ref.norm(), 1e-12) << "scale " << scale << " n " << n;
    }
  }
}

TEST(Expm, ZeroAndDiagonal) {
  EXPECT_EQ(expm(Matrix::Zero(3, 3)), Matrix(Matrix::Identity(3, 3)));
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 1.0;
  d(1, 1) = -3.0;
  const Matrix e = expm(d);
  EXPECT_NEAR(e(0, 0), std::exp(1.0), 1e-14);
  EXPECT_NEAR(e(1, 1), std::exp(-3.0), 1e-15);
  EXPECT_EQ(e(0, 1), 0.0);
}

TEST(Expm, Semigroup) {
  std::mt19937_64 rng(16);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 7;
    const Matrix K = random_stable(rng, n);
    const double s = 0.3 + 0.1 * trial, t = 1.7;
    worst = std::max(worst, (expm(K * (s + t)) - expm(K * s) * expm(K * t)).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(Expm, TapedGradient) {
  std::mt19937_64 rng(17);
  for (double scale : {0.05, 1.0, 6.0}) {
    Matrix a = random_matrix(rng, 4, 4) * scale;
    const Matrix w = random_matrix(rng, 4, 4);
    auto graph = [&](grad::Tape& t, const std::vector<grad::Tensor>& x) {
      return grad::sum(grad::hadamard(expm(x[0]), t.constant(w)));
    };
    EXPECT_LT(koopman_lab::testing::check_gradients(graph, {a}).max_rel_error, 1e-6) << scale;
    grad::Tape t;
    EXPECT_TRUE(expm(t.constant(a)).value().isApprox(expm(a), 1e-13));
  }
}

TEST(ExactDiscretization, ZeroOrderHold) {
  // Scalar z' = k z + l u with constant u: z(d) = e^{kd} z0 + (e^{kd} - 1)/k l u.
  const double k = -0.7, l = 2.0, d = 0.3;
  const auto ops = discretize_exact(Matrix::Constant(1, 1, k), Matrix::Constant(1, 1, l), d);
  EXPECT_NEAR(ops.K(0, 0), std::exp(k * d), 1e-15);
  EXPECT_NEAR(ops.L(0, 0), (std::exp(k * d) - 1.0) / k * l, 1e-14);
}

TEST(DecoderJvp, LinearDecoderIsItsWeight) {
  KoopmanModel m(small_config());
  const Matrix& W = m.params()[m.params().index_of("decoder.0.weight")].value;
  const Vector z = Vector::Random(8), dz = Vector::Random(8);
  EXPECT_TRUE(m.decoder_jvp(z, dz).isApprox(W * dz, 1e-15));
  EXPECT_EQ(m.decoder_jvp(z, Vector::Zero(8)), Vector::Zero(2));
}

TEST(DecoderJvp, MlpDecoderFiniteDifference) {
  auto c = small_config();
  c.decoder = DecoderKind::Mlp;
  KoopmanModel m(c);
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector z = random_matrix(rng, 8, 1), dz = random_matrix(rng, 8, 1);
    const double h = 1e-6;
    const Vector fd = (m.decode(z + h * dz) - m.decode(z - h * dz)) / (2.0 * h);
    EXPECT_LT((m.decoder_jvp(z, dz) - fd).norm() / fd.norm(), 1e-5);
  }
}

TEST(DecoderJvp, EulerConsistencyRatio) {
  // psi(K_d phi(x)) - psi(phi(x)) - delta J_psi K phi(x) shrinks as delta^2.
  auto c = small_config();
  c.decoder = DecoderKind::Mlp;
  KoopmanModel m(c);
  const Vector x = v2(0.4, -0.3);
  auto residual = [&](double delta) {
    set_delta(m, delta);
    const Vector z = m.encode(x);
    const Vector lhs = m.decode(latent_step(m.operators(), z)) - m.decode(z);
    return (lhs - delta * m.decoder_jvp(z, m.continuous_K() * z)).norm();
  };
  for (double delta : {1e-2, 5e-3, 2.5e-3}) {
    const double ratio = residual(delta) / residual(delta / 2.0);
    EXPECT_GE(ratio, 3.0) << delta;
    EXPECT_LE(ratio, 5.0) << delta;
  }
}

TEST(Normalize, UnitColumns) {
  auto c = small_config(2, 3);
  KoopmanModel m(c);
  auto& W = m.params()[m.params().index_of("decoder.0.weight")].value;
  W << 3, 0.6, 0, 4, 0.8, 0;
  WarningCapture warnings;
  const auto rep = m.normalize_decoder_columns();
  EXPECT_TRUE(rep.applied);
  EXPECT_NEAR(W(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(W(1, 0), 0.8, 1e-15);
  EXPECT_EQ(W(0, 1), 0.6);
  EXPECT_EQ(W(1, 1), 0.8);
  EXPECT_EQ(W.col(2), Vector::Zero(2));
  ASSERT_EQ(rep.zero_columns, std::vector<int>{2});
  EXPECT_EQ(warnings.messages.size(), 1u);
}

TEST(Normalize, MlpDecoderIsNoop) {
  auto c = small_config();
  c.decoder = DecoderKind::Mlp;
  KoopmanModel m(c);
  const std::string before = m.config().to_json();
  WarningCapture warnings;
  EXPECT_FALSE(m.normalize_decoder_columns().applied);
  EXPECT_EQ(warnings.messages.size(), 1u);
}

TEST(Model, ParameterCounts) {
  auto c = small_config();
  KoopmanModel m(c);
  EXPECT_EQ(m.encoder_parameter_count(), (2u * 16 + 16) + (16u * 16 + 16) + (16u * 8 + 8));
  EXPECT_EQ(m.decoder_parameter_count(), 8u * 2 + 2);
  EXPECT_EQ(m.dynamics_parameter_count(), 8u * 8 + 1);
  EXPECT_EQ(m.params().scalar_count(),
            m.encoder_parameter_count() + m.decoder_parameter_count() + m.dynamics_parameter_count());
}
