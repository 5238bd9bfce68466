#include <cmath>
#include <cstring>
#include <numbers>

#include <gtest/gtest.h>

#include "koopman_lab/dataset.hpp"
#include "koopman_lab/dynsys.hpp"
#include "koopman_lab/errors.hpp"
#include "koopman_lab/parallel.hpp"
#include "test_util.hpp"

using namespace koopman_lab;
using namespace koopman_lab::dynsys;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

double duffing_energy(const Vector& s) { return 0.5 * s[1] * s[1] - 0.5 * s[0] * s[0] + 0.25 * std::pow(s[0], 4); }

}  // namespace

TEST(Rhs, ParabolicOriginIsFixed) {
  EXPECT_EQ(rhs(make_system("parabolic"), vec({0, 0})), vec({0, 0}));
}

TEST(Rhs, DuffingStableFixedPoint) {
  EXPECT_EQ(rhs(make_system("duffing"), vec({1, 0})), vec({0, 0}));
  EXPECT_EQ(rhs(make_system("duffing"), vec({-1, 0})), vec({0, 0}));
}

TEST(Rhs, LotkaVolterraCenter) {
  EXPECT_EQ(rhs(make_system("lotka_volterra"), vec({1, 1})), vec({0, 0}));
}

TEST(Rhs, LorenzByHand) {
  const Vector d = rhs(make_system("lorenz"), vec({1, 1, 1}));
  EXPECT_DOUBLE_EQ(d[0], 0.0);
  EXPECT_DOUBLE_EQ(d[1], 26.0);
  EXPECT_DOUBLE_EQ(d[2], 1.0 - 8.0 / 3.0);
}

TEST(Rhs, PendulumFallsAwayFromUpright) {
  const auto s = make_system("pendulum");
  EXPECT_GT(rhs(s, vec({0.1, 0.0}))[1], 0.0);
  EXPECT_LT(rhs(s, vec({-0.1, 0.0}))[1], 0.0);
}

TEST(Rhs, ForcedVariantsAddControl) {
  const auto s = make_system("forced_duffing");
  EXPECT_DOUBLE_EQ(rhs(s, vec({1, 0}), vec({0.5}))[1], 0.5);
  const auto p = make_system("forced_pendulum");
  EXPECT_DOUBLE_EQ(rhs(p, vec({0, 0}), vec({-0.25}))[1], -0.25);
}

TEST(Rhs, DimensionMismatchThrows) {
  EXPECT_THROW(rhs(make_system("duffing"), vec({1, 0, 0})), InvalidArgument);
  EXPECT_THROW(rhs(make_system("duffing"), vec({1, 0}), vec({1})), InvalidArgument);
  EXPECT_THROW(rhs(make_system("forced_duffing"), vec({1, 0})), InvalidArgument);
}

TEST(Systems, UnknownNamesAndParametersRejected) {
  EXPECT_THROW(make_system("van_der_pol"), InvalidArgument);
  EXPECT_THROW(make_system("lorenz", {{"omega", 1.0}}), InvalidArgument);
  auto s = make_system("lorenz");
  s.params.erase("rho");
  EXPECT_THROW(validate(s), InvalidArgument);
  s = make_system("lorenz");
  s.state_dim = 2;
  EXPECT_THROW(validate(s), InvalidArgument);
}

TEST(Systems, StateDims) {
  for (const char* name : {"parabolic", "duffing", "lotka_volterra", "pendulum"}) {
    EXPECT_EQ(make_system(name).state_dim, 2) << name;
  }
  EXPECT_EQ(make_system("lorenz").state_dim, 3);
}

TEST(Systems, ListedFixedPointsAreExact) {
  for (const char* name : {"parabolic", "duffing", "lotka_volterra"}) {
    const auto s = make_system(name);
    for (const auto& x : fixed_points(s)) EXPECT_EQ(rhs(s, x).norm(), 0.0) << name << " at " << x.transpose();
  }
  // Pendulum and Lorenz equilibria involve pi or square roots.
  for (const char* name : {"pendulum", "lorenz"}) {
    const auto s = make_system(name);
    for (const auto& x : fixed_points(s)) EXPECT_LT(rhs(s, x).norm(), 1e-12) << name;
  }
}

TEST(Rk4, ScalarDecayOneStep) {
  const auto t = integrate_rk4(make_system("decay"), vec({1.0}), 0.01, 1);
  ASSERT_EQ(t.states.rows(), 2);
  EXPECT_NEAR(t.states(1, 0), 0.9900498337, 1e-10);
  EXPECT_NEAR(t.states(1, 0), std::exp(-0.01), 1e-11);
}

TEST(Rk4, RejectsBadRequests) {
  EXPECT_THROW(integrate_rk4(make_system("decay"), vec({1.0}), 0.01, 0), InvalidArgument);
  EXPECT_THROW(integrate_rk4(make_system("decay"), vec({1.0}), 0.0, 5), InvalidArgument);
  EXPECT_THROW(integrate_rk4(make_system("decay"), vec({1.0, 2.0}), 0.01, 5), InvalidArgument);
}

TEST(Rk4, DuffingEnergyDrift) {
  const auto t = integrate_rk4(make_system("duffing"), vec({1.5, 0.3}), 0.01, 1000);
  const double h0 = duffing_energy(t.states.row(0).transpose());
  double worst = 0.0;
  for (Eigen::Index i = 0; i < t.states.rows(); ++i) {
    worst = std::max(worst, std::abs(duffing_energy(t.states.row(i).transpose()) - h0));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Rk4, FourthOrderConvergence) {
  // Endpoint error at t = 1 against the closed form of the parabolic flow.
  const auto s = make_system("parabolic");
  const Vector x0 = vec({0.8, -0.6});
  const Vector exact = parabolic_closed_form(x0, 1.0, -0.1, -1.0);
  auto err = [&](std::size_t n) {
    const auto t = integrate_rk4(s, x0, 1.0 / static_cast<double>(n), n);
    return (t.states.row(static_cast<Eigen::Index>(n)).transpose() - exact).norm();
  };
  for (std::size_t n : {10, 20, 40}) {
    const double ratio = err(n) / err(2 * n);
    EXPECT_GE(ratio, 8.0) << n;
    EXPECT_LE(ratio, 32.0) << n;
  }
}

TEST(Rk4, SubstepsMatchFinerGrid) {
  const auto s = make_system("duffing");
  const auto coarse = integrate_rk4(s, vec({0.5, 0.5}), 0.02, 50, Matrix(), 2);
  const auto fine = integrate_rk4(s, vec({0.5, 0.5}), 0.01, 100);
  for (Eigen::Index i = 0; i <= 50; ++i) {
    EXPECT_LT((coarse.states.row(i) - fine.states.row(2 * i)).norm(), 1e-13);
  }
}

TEST(Rk4, NonFiniteNamesStep) {
  // x' = x^3 blows up in finite time (t = 1/(2 x0^2) = 0.5 for x0 = 1).
  VectorField f = [](const Vector& x, const Vector&) -> Vector { return x.array().cube().matrix(); };
  try {
    integrate_rk4(f, vec({1.0}), 0.05, 100);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.step(), 5u);
    EXPECT_LT(e.step(), 100u);
  }
}

TEST(Dopri5, ScalarDecay) {
  const auto t = integrate_dopri5(make_system("decay"), vec({1.0}), 1.0, 1e-9, 1e-9, 0.1);
  ASSERT_EQ(t.states.rows(), 11);
  EXPECT_NEAR(t.states(10, 0), 0.3678794412, 1e-8);
  for (Eigen::Index i = 0; i <= 10; ++i) EXPECT_NEAR(t.states(i, 0), std::exp(-0.1 * i), 1e-8);
}

TEST(Dopri5, LorenzSelfConsistency) {
  const auto s = make_system("lorenz");
  const auto loose = integrate_dopri5(s, vec({0, 1, 1.05}), 2.0, 1e-9, 1e-9, 0.02);
  const auto tight = integrate_dopri5(s, vec({0, 1, 1.05}), 2.0, 1e-12, 1e-12, 0.02);
  ASSERT_EQ(loose.states.rows(), tight.states.rows());
  EXPECT_LT((loose.states - tight.states).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Dopri5, AgreesWithRk4AtSmallStep) {
  const auto s = make_system("duffing");
  const auto a = integrate_dopri5(s, vec({1.2, -0.4}), 5.0, 1e-11, 1e-11, 0.01);
  const auto b = integrate_rk4(s, vec({1.2, -0.4}), 0.01, 500);
  EXPECT_LT((a.states - b.states).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Dopri5, RejectsBadRequests) {
  const auto s = make_system("decay");
  EXPECT_THROW(integrate_dopri5(s, vec({1.0}), 0.0, 1e-9, 1e-9, 0.1), InvalidArgument);
  EXPECT_THROW(integrate_dopri5(s, vec({1.0}), 1.0, 0.0, 1e-9, 0.1), InvalidArgument);
  EXPECT_THROW(integrate_dopri5(s, vec({1.0}), 1.0, 1e-9, -1.0, 0.1), InvalidArgument);
}

TEST(Dopri5, StiffnessErrorOnStepUnderflow) {
  // x' = x^2 + 1 has a pole at pi/2: the adaptive step collapses there.
  VectorField f = [](const Vector& x, const Vector&) -> Vector { return (x.array().square() + 1.0).matrix(); };
  EXPECT_THROW(integrate_dopri5(f, vec({0.0}), 3.0, 1e-10, 1e-10, 0.1), std::runtime_error);
}

TEST(Dopri5, MatchesParabolicClosedForm) {
  const auto s = make_system("parabolic");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Vector x0 = vec({u(rng), u(rng)});
    const auto t = integrate_dopri5(s, x0, 10.0, 1e-10, 1e-10, 0.5);
    for (Eigen::Index i = 0; i < t.states.rows(); ++i) {
      const Vector exact = parabolic_closed_form(x0, 0.5 * static_cast<double>(i), -0.1, -1.0);
      worst = std::max(worst, (t.states.row(i).transpose() - exact).cwiseAbs().maxCoeff());
    }
  }
  EXPECT_LT(worst, 1e-7);
}

TEST(ParabolicClosedForm, DecoupledDecay) {
  const Vector x = parabolic_closed_form(vec({0, 1}), 1.0, -0.1, -1.0);
  EXPECT_EQ(x[0], 0.0);
  EXPECT_NEAR(x[1], 0.3678794412, 1e-10);
}

TEST(ParabolicClosedForm, IdentityAtZero) {
  const Vector x0 = vec({0.3, -0.7});
  EXPECT_EQ(parabolic_closed_form(x0, 0.0, -0.1, -1.0), x0);
}

TEST(ParabolicClosedForm, InvariantManifold) {
  const double mu = -0.1, lambda = -1.0, b = lambda / (lambda - 2.0 * mu);
  const Vector x0 = vec({0.9, b * 0.81});
  const auto traj = integrate_dopri5(make_system("parabolic"), x0, 5.0, 1e-12, 1e-12, 0.25);
  for (Eigen::Index i = 0; i < traj.states.rows(); ++i) {
    const double t = 0.25 * static_cast<double>(i);
    const Vector x = parabolic_closed_form(x0, t, mu, lambda);
    EXPECT_NEAR(x[1], b * x[0] * x[0], 1e-12) << t;
    EXPECT_LT((traj.states.row(i).transpose() - x).norm(), 1e-10) << t;
  }
}

TEST(Dataset, PendulumCountsAndShapes) {
  koopman_lab::testing::TempDir dir;
  DatasetRequest req;
  req.system = make_system("pendulum");
  req.n_train = 50;
  req.n_eval = 3;
  req.train_len = 500;
  req.eval_len = 20;
  req.seed = 7;
  const auto m = generate_dataset(req, dir.path());
  EXPECT_EQ(m.n_train, 50u);
  EXPECT_EQ(m.train.size(), 50u);
  EXPECT_EQ(m.train_len, 500u);
  EXPECT_EQ(m.train.front().rows, 501u);
  EXPECT_EQ(m.train.front().cols, 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "traj_0.f64"));
  EXPECT_TRUE(std::filesystem::exists(dir / "traj_52.f64"));

  const auto loaded = load_dataset(dir.path());
  ASSERT_EQ(loaded.train.size(), 50u);
  const double ten_deg = 10.0 * std::numbers::pi / 180.0;
  for (const auto& t : loaded.train) {
    EXPECT_EQ(t.states.rows(), 501);
    EXPECT_LE(std::abs(t.states(0, 0)), ten_deg);
    EXPECT_EQ(t.states(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(t.dt, 0.01);
  }
}

TEST(Dataset, LorenzUsesCoarserStep) {
  DatasetRequest req;
  req.system = make_system("lorenz");
  req.n_train = 100;
  req.n_eval = 1;
  req.train_len = 10;
  req.eval_len = 10;
  const auto ds = generate_dataset(req);
  EXPECT_EQ(ds.train.size(), 100u);
  EXPECT_DOUBLE_EQ(ds.train.front().dt, 0.02);
}

TEST(Dataset, InitialConditionBoxes) {
  struct Box {
    const char* name;
    double lo0, hi0, lo1, hi1;
  };
  for (const Box& b : {Box{"parabolic", -1, 1, -1, 1}, Box{"duffing", -2, 2, -1, 1},
                       Box{"lotka_volterra", 0.02, 3.0, 0.02, 3.0}}) {
    const auto s = make_system(b.name);
    for (std::size_t i = 0; i < 200; ++i) {
      const Vector x = sample_initial_condition(s, 1, Split::Train, i);
      EXPECT_GE(x[0], b.lo0);
      EXPECT_LE(x[0], b.hi0);
      EXPECT_GE(x[1], b.lo1);
      EXPECT_LE(x[1], b.hi1);
    }
  }
}

TEST(Dataset, LorenzInitialSpread) {
  const auto s = make_system("lorenz");
  Vector mean = Vector::Zero(3);
  double var = 0.0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const Vector x = sample_initial_condition(s, 5, Split::Eval, static_cast<std::size_t>(i)) - s.init.center;
    mean += x;
    var += x.squaredNorm();
  }
  mean /= n;
  EXPECT_LT(mean.norm(), 0.1);
  EXPECT_NEAR(var / (3.0 * n), 1.0, 0.1);
}

TEST(Dataset, TrainAndEvalStreamsDiffer) {
  const auto s = make_system("duffing");
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_NE(sample_initial_condition(s, 9, Split::Train, i), sample_initial_condition(s, 9, Split::Eval, i));
  }
  EXPECT_EQ(sample_initial_condition(s, 9, Split::Train, 3), sample_initial_condition(s, 9, Split::Train, 3));
}

TEST(Dataset, BitIdenticalRegeneration) {
  koopman_lab::testing::TempDir dir;
  DatasetRequest req;
  req.system = make_system("duffing");
  req.n_train = 4;
  req.n_eval = 2;
  req.train_len = 50;
  req.eval_len = 60;
  req.seed = 42;
  generate_dataset(req, dir / "a");
  generate_dataset(req, dir / "b");
  for (const char* f : {"manifest.json", "traj_0.f64", "traj_3.f64", "traj_5.f64"}) {
    EXPECT_EQ(koopman_lab::testing::slurp(dir / (std::string("a/") + f)), koopman_lab::testing::slurp(dir / (std::string("b/") + f))) << f;
  }
  req.seed = 43;
  generate_dataset(req, dir / "c");
  EXPECT_NE(koopman_lab::testing::slurp(dir / "a/traj_0.f64"), koopman_lab::testing::slurp(dir / "c/traj_0.f64"));
}

TEST(Dataset, ParallelGenerationMatchesSerial) {
  DatasetRequest req;
  req.system = make_system("lotka_volterra");
  req.n_train = 6;
  req.n_eval = 2;
  req.train_len = 30;
  req.eval_len = 30;
  const std::size_t saved = worker_count();
  set_worker_count(1);
  const auto a = generate_dataset(req);
  set_worker_count(3);
  const auto b = generate_dataset(req);
  set_worker_count(saved);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].states, b.train[i].states);
}

TEST(Dataset, ForcedSystemsStoreControls) {
  koopman_lab::testing::TempDir dir;
  DatasetRequest req;
  req.system = make_system("forced_duffing");
  req.n_train = 2;
  req.n_eval = 1;
  req.train_len = 40;
  req.eval_len = 40;
  req.control.kind = ControlSignal::Kind::PiecewiseConstant;
  req.control.hold_steps = 10;
  generate_dataset(req, dir.path());
  const auto ds = load_dataset(dir.path());
  ASSERT_TRUE(ds.train[0].has_controls());
  EXPECT_EQ(ds.train[0].controls.rows(), 40);
  EXPECT_EQ(ds.train[0].controls.cols(), 1);
  EXPECT_EQ(ds.train[0].controls(0, 0), ds.train[0].controls(9, 0));
  EXPECT_TRUE(std::filesystem::exists(dir / "ctrl_0.f64"));
}

TEST(Dataset, AutonomousSystemsRejectControlSignals) {
  DatasetRequest req;
  req.system = make_system("duffing");
  req.n_train = 1;
  req.n_eval = 1;
  req.train_len = 5;
  req.eval_len = 5;
  req.control.kind = ControlSignal::Kind::Sinusoid;
  EXPECT_THROW(generate_dataset(req), InvalidArgument);
}

TEST(Dataset, TruncatedBlobDetected) {
  koopman_lab::testing::TempDir dir;
  DatasetRequest req;
  req.system = make_system("duffing");
  req.n_train = 2;
  req.n_eval = 1;
  req.train_len = 10;
  req.eval_len = 10;
  generate_dataset(req, dir.path());
  std::filesystem::resize_file(dir / "traj_1.f64", 8 * 5);
  EXPECT_THROW(load_dataset(dir.path()), IoError);
  std::filesystem::remove(dir / "traj_1.f64");
  EXPECT_THROW(load_dataset(dir.path()), IoError);
}

TEST(Dataset, UnwritableOutputRejected) {
  koopman_lab::testing::TempDir dir;
  std::ofstream(dir / "file") << "x";
  DatasetRequest req;
  req.system = make_system("duffing");
  req.n_train = 1;
  req.n_eval = 1;
  req.train_len = 5;
  req.eval_len = 5;
  EXPECT_THROW(generate_dataset(req, dir / "file" / "sub"), std::exception);
}

TEST(Blob, LittleEndianRowMajor) {
  koopman_lab::testing::TempDir dir;
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  write_f64_blob(dir / "m.f64", m);
  const std::string bytes = koopman_lab::testing::slurp(dir / "m.f64");
  ASSERT_EQ(bytes.size(), 48u);
  double second = 0.0;
  std::memcpy(&second, bytes.data() + 8, 8);
  EXPECT_EQ(second, 2.0);
  EXPECT_EQ(read_f64_blob(dir / "m.f64", 2, 3), m);
}
