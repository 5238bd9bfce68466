#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "koopman_lab/dataset.hpp"
#include "koopman_lab/dynsys.hpp"
#include "koopman_lab/errors.hpp"
#include "koopman_lab/model.hpp"
#include "koopman_lab/training.hpp"
#include "test_util.hpp"

using namespace koopman_lab;
using namespace koopman_lab::training;
using koopman_lab::testing::loss_gradient_error;
using koopman_lab::testing::parabolic_set;
using koopman::KoopmanModel;
using koopman::ModelConfig;

namespace {

std::vector<dynsys::Trajectory> generated(const char* system, std::size_t n, std::size_t len, std::uint64_t seed,
                                          dynsys::ControlSignal control = {}) {
  dynsys::DatasetRequest req;
  req.system = dynsys::make_system(system);
  req.n_train = n;
  req.n_eval = 1;
  req.train_len = len;
  req.eval_len = 1;
  req.seed = seed;
  req.control = control;
  return dynsys::generate_dataset(req).train;
}

ModelConfig small_model(int d = 2, int n = 12) {
  ModelConfig c;
  c.state_dim = d;
  c.latent_dim = n;
  c.encoder_hidden = {24, 24};
  c.decoder_hidden = {16};
  c.seed = 1;
  return c;
}

TrainConfig quick_train(std::size_t steps) {
  TrainConfig t;
  t.seq_len = 5;
  t.batch_size = 8;
  t.steps = steps;
  t.seed = 2;
  return t;
}

}  // namespace

TEST(SequenceLoss, OracleIsExact) {
  auto oracle = koopman::make_parabolic_oracle(-0.1, -1.0, 0.01);
  const auto data = parabolic_set(5, 60, 0.01, 3);
  TrainConfig cfg;
  cfg.loss_weights = {1.0, 1.0, 1.0};
  for (std::size_t start : {0u, 17u, 50u}) {
    const auto r = evaluate_loss(oracle, window_batch(data[1], start, 10), cfg);
    EXPECT_LT(r.align, 1e-8) << start;
    EXPECT_LT(r.reconst, 1e-8) << start;
    EXPECT_LT(r.pred, 1e-8) << start;
  }
  std::mt19937_64 rng(4);
  const auto r = evaluate_loss(oracle, sample_batch(data, 10, 16, rng), cfg);
  EXPECT_LT(r.align + r.reconst + r.pred, 1e-8);
}

TEST(SequenceLoss, OracleAlignmentShiftInvariant) {
  auto oracle = koopman::make_parabolic_oracle(-0.1, -1.0, 0.01);
  const auto data = parabolic_set(1, 200, 0.01, 5);
  TrainConfig cfg;
  for (std::size_t start = 0; start + 10 <= 200; start += 7) {
    EXPECT_LT(evaluate_loss(oracle, window_batch(data[0], start, 10), cfg).align, 1e-8) << start;
  }
}

TEST(SequenceLoss, DegenerateWindowRejected) {
  const auto data = parabolic_set(1, 20, 0.01, 5);
  EXPECT_THROW(window_batch(data[0], 0, 0), InvalidArgument);
  EXPECT_THROW(window_batch(data[0], 15, 10), InvalidArgument);
  TrainConfig cfg;
  cfg.seq_len = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  KoopmanModel m(small_model());
  Batch b;
  b.states = {Eigen::MatrixXd::Zero(3, 2)};
  EXPECT_THROW(evaluate_loss(m, b, cfg), InvalidArgument);
}

TEST(SequenceLoss, ReconstructionOnlyWeighting) {
  KoopmanModel m(small_model());
  const auto data = generated("duffing", 2, 40, 6);
  const Batch b = window_batch(data[0], 3, 10);
  TrainConfig cfg;
  cfg.loss_weights = {0.0, 1.0, 0.0};
  cfg.l1_weight = 0.0;
  const auto r = evaluate_loss(m, b, cfg);
  EXPECT_EQ(r.total, r.reconst);
  EXPECT_GT(r.align, 0.0);

  // Direct evaluation of the reconstruction term on the same window.
  double expected = 0.0;
  for (Eigen::Index i = 0; i <= 10; ++i) {
    const Eigen::VectorXd x = data[0].states.row(3 + i).transpose();
    expected += (x - m.decode(m.encode(x))).norm();
  }
  EXPECT_NEAR(r.reconst, expected, 1e-12);
}

TEST(SequenceLoss, TermsMatchHandUnroll) {
  KoopmanModel m(small_model());
  const auto data = generated("duffing", 1, 30, 7);
  const std::size_t T = 6;
  TrainConfig cfg;
  cfg.loss_weights = {0.5, 2.0, 3.0};
  cfg.l1_weight = 0.25;
  for (std::size_t period : {0u, 1u, 2u, 4u}) {
    cfg.train_reencode_period = period;
    const auto r = evaluate_loss(m, window_batch(data[0], 2, T), cfg);
    double align = 0.0, pred = 0.0, reconst = 0.0, l1 = 0.0;
    Eigen::VectorXd z = m.encode(data[0].states.row(2).transpose());
    for (std::size_t i = 0; i <= T; ++i) {
      const Eigen::VectorXd x = data[0].states.row(static_cast<Eigen::Index>(2 + i)).transpose();
      reconst += (x - m.decode(m.encode(x))).norm();
      l1 += m.encode(x).lpNorm<1>();
      if (i == 0) continue;
      z = m.advance(z, Eigen::VectorXd());
      align += (z - m.encode(x)).norm();
      pred += (x - m.decode(z)).norm();
      if (period > 0 && i % period == 0 && i < T) z = m.encode(m.decode(z));
    }
    EXPECT_NEAR(r.align, align, 1e-10) << period;
    EXPECT_NEAR(r.pred, pred, 1e-10) << period;
    EXPECT_NEAR(r.reconst, reconst, 1e-10);
    EXPECT_NEAR(r.l1, l1, 1e-9);
    EXPECT_NEAR(r.total, 0.5 * align + 2.0 * reconst + 3.0 * pred + 0.25 * l1, 1e-9);
  }
}

TEST(SequenceLoss, BatchMean) {
  KoopmanModel m(small_model());
  const auto data = generated("duffing", 3, 30, 8);
  TrainConfig cfg;
  std::mt19937_64 rng(1);
  const Batch b = sample_batch(data, 4, 5, rng);
  double sum = 0.0;
  for (Eigen::Index r = 0; r < 5; ++r) {
    Batch one;
    for (const auto& s : b.states) one.states.push_back(s.row(r));
    sum += evaluate_loss(m, one, cfg).total;
  }
  EXPECT_NEAR(evaluate_loss(m, b, cfg).total, sum / 5.0, 1e-10);
}

TEST(SequenceLoss, NonFiniteTermNamed) {
  KoopmanModel m(small_model());
  auto data = generated("duffing", 1, 20, 9);
  data[0].states(4, 0) = std::numeric_limits<double>::infinity();
  try {
    evaluate_loss(m, window_batch(data[0], 0, 10), TrainConfig{});
    FAIL() << "expected TrainingDivergence";
  } catch (const TrainingDivergence& e) {
    EXPECT_NE(std::string(e.what()).find("align"), std::string::npos) << e.what();
  }
}

namespace {

}  // namespace

TEST(GradCheck, TrainingGraphs) {
  const auto data = generated("duffing", 2, 20, 10);
  std::mt19937_64 rng(3);
  const Batch batch = sample_batch(data, 4, 3, rng);

  struct Case {
    const char* name;
    ModelConfig model;
    TrainConfig train;
  };
  std::vector<Case> cases;
  ModelConfig base = small_model(2, 6);
  base.encoder_hidden = {8};
  base.decoder_hidden = {8};
  TrainConfig plain;
  plain.l1_weight = 0.0;
  cases.push_back({"align+reconst", base, plain});
  TrainConfig all = plain;
  all.loss_weights = {1.0, 1.0, 1.0};
  all.l1_weight = 1e-3;
  all.train_reencode_period = 2;
  cases.push_back({"all terms, reencoding", base, all});
  ModelConfig mlp_dec = base;
  mlp_dec.decoder = koopman::DecoderKind::Mlp;
  cases.push_back({"mlp decoder", mlp_dec, all});
  ModelConfig exact = base;
  exact.discretization = koopman::Discretization::Exact;
  cases.push_back({"exact discretization", exact, all});
  ModelConfig skew = base;
  skew.k_structure = koopman::KStructure::SkewSymmetric;
  cases.push_back({"skew K", skew, all});
  ModelConfig diag = base;
  diag.k_structure = koopman::KStructure::Diagonal;
  cases.push_back({"diagonal K", diag, all});
  ModelConfig nonlin = base;
  nonlin.nonlinear_latent = true;
  cases.push_back({"nonlinear latent", nonlin, all});
  TrainConfig baseline = baseline_train_config(plain);
  cases.push_back({"baseline recipe", base, baseline});

  for (const auto& c : cases) EXPECT_LT(loss_gradient_error(c.model, batch, c.train), 1e-5) << c.name;
}

TEST(GradCheck, ControlledTrainingGraph) {
  dynsys::ControlSignal sig;
  sig.kind = dynsys::ControlSignal::Kind::PiecewiseConstant;
  sig.hold_steps = 3;
  const auto data = generated("forced_duffing", 2, 20, 11, sig);
  std::mt19937_64 rng(3);
  const Batch batch = sample_batch(data, 4, 3, rng);
  ASSERT_EQ(batch.controls.size(), 4u);
  for (auto disc : {koopman::Discretization::Bilinear, koopman::Discretization::Exact}) {
    ModelConfig mc = small_model(2, 6);
    mc.encoder_hidden = {8};
    mc.control_dim = 1;
    mc.control_embed_dim = 3;
    mc.action_hidden = {4};
    mc.discretization = disc;
    TrainConfig tc;
    tc.loss_weights = {1.0, 1.0, 1.0};
    tc.train_reencode_period = 3;
    EXPECT_LT(loss_gradient_error(mc, batch, tc), 1e-5);
  }
}

TEST(Train, DeterministicHistory) {
  const auto data = generated("duffing", 4, 40, 12);
  KoopmanModel a(small_model()), b(small_model());
  const auto ra = train(a, data, quick_train(30));
  const auto rb = train(b, data, quick_train(30));
  ASSERT_EQ(ra.history.size(), 30u);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_EQ(ra.history[i].total, rb.history[i].total);
    EXPECT_EQ(ra.history[i].step, i + 1);
  }
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
  auto other = quick_train(30);
  other.seed = 99;
  KoopmanModel c(small_model());
  EXPECT_NE(train(c, data, other).history.back().total, ra.history.back().total);
}

TEST(Train, UnitDecoderColumnsAfterEachStep) {
  const auto data = generated("duffing", 3, 40, 13);
  KoopmanModel m(small_model());
  const auto idx = m.params().index_of("decoder.0.weight");
  train(m, data, quick_train(5), [&](const LossReport&) {
    const Eigen::VectorXd norms = m.params()[idx].value.colwise().norm();
    EXPECT_LT((norms.array() - 1.0).abs().maxCoeff(), 1e-12);
  });
}

TEST(Train, DynamicsUseTheirOwnLearningRate) {
  const auto data = generated("duffing", 3, 40, 14);
  KoopmanModel m(small_model());
  auto cfg = quick_train(1);
  cfg.weight_decay = 0.0;
  const auto before = m.params();
  train(m, data, cfg);
  auto max_change = [&](const std::string& name) {
    const auto i = m.params().index_of(name);
    return (m.params()[i].value - before[i].value).cwiseAbs().maxCoeff();
  };
  // A first Adam step moves each entry by at most its learning rate.
  EXPECT_LE(max_change("dynamics.K"), 1e-5 * (1 + 1e-9));
  EXPECT_GT(max_change("dynamics.K"), 0.5e-5);
  EXPECT_LE(max_change("dynamics.log_delta"), 1e-5 * (1 + 1e-9));
  EXPECT_GT(max_change("encoder.0.weight"), 0.5e-4);
  EXPECT_LE(max_change("encoder.0.weight"), 1e-4 * (1 + 1e-9));
}

TEST(Train, LossDropsTenfold) {
  const auto data = generated("pendulum", 50, 500, 15);
  ModelConfig mc;
  mc.latent_dim = 32;
  mc.encoder_hidden = {64, 64, 64};
  mc.seed = 4;
  KoopmanModel m(mc);
  TrainConfig tc;
  tc.steps = 1500;
  tc.lr_main = 1e-3;
  tc.seed = 5;
  const auto r = train(m, data, tc);
  auto window_mean = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += r.history[i].total;
    return s / static_cast<double>(to - from);
  };
  EXPECT_GT(window_mean(0, 10) / window_mean(r.history.size() - 50, r.history.size()), 10.0);
}

TEST(Train, RejectsMismatchedData) {
  const auto data = generated("duffing", 2, 8, 16);
  KoopmanModel m(small_model());
  auto cfg = quick_train(1);
  cfg.seq_len = 9;
  EXPECT_THROW(train(m, data, cfg), InvalidArgument);
  KoopmanModel three(small_model(3, 12));
  EXPECT_THROW(train(three, data, quick_train(1)), InvalidArgument);
  EXPECT_THROW(train(m, {}, quick_train(1)), InvalidArgument);
}

TEST(Train, DivergenceRestoresLastGood) {
  koopman_lab::testing::TempDir dir;
  auto data = generated("duffing", 2, 30, 17);
  for (auto& t : data) t.states *= 1e300;
  KoopmanModel m(small_model());
  const auto before = m.params();
  auto cfg = quick_train(3);
  cfg.checkpoint_dir = dir.path();
  try {
    train(m, data, cfg);
    FAIL() << "expected TrainingDivergence";
  } catch (const TrainingDivergence& e) {
    EXPECT_EQ(e.step(), 1u);
  }
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(m.params()[i].value, before[i].value);
  EXPECT_TRUE(std::filesystem::exists(dir / "last_good.json"));
}

TEST(Train, CheckpointCadence) {
  koopman_lab::testing::TempDir dir;
  const auto data = generated("duffing", 2, 30, 18);
  KoopmanModel m(small_model());
  auto cfg = quick_train(6);
  cfg.checkpoint_every = 2;
  cfg.checkpoint_dir = dir.path();
  train(m, data, cfg);
  for (const char* f : {"step_00000002", "step_00000004", "step_00000006", "final"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / (std::string(f) + ".f64"))) << f;
  }
  const auto back = koopman::load_model(dir / "final");
  EXPECT_EQ(back.operators().K, m.operators().K);
}

TEST(Train, ControlledSystem) {
  dynsys::ControlSignal sig;
  sig.kind = dynsys::ControlSignal::Kind::Sinusoid;
  const auto data = generated("forced_pendulum", 3, 40, 19, sig);
  ModelConfig mc = small_model();
  mc.control_dim = 1;
  mc.control_embed_dim = 4;
  mc.action_hidden = {8};
  KoopmanModel m(mc);
  auto cfg = quick_train(5);
  cfg.train_reencode_period = 2;
  EXPECT_EQ(train(m, data, cfg).history.size(), 5u);
  KoopmanModel autonomous(small_model());
  EXPECT_THROW(train(autonomous, data, cfg), InvalidArgument);
}

TEST(TrainConfigJson, RoundTripAndAggregatedErrors) {
  TrainConfig c;
  c.steps = 17;
  c.loss_weights.pred = 0.5;
  c.train_reencode_period = 3;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  try {
    TrainConfig::from_json(R"({"seq_len": 0, "batch_size": 0, "lr_main": -1})").validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_GE(e.violations().size(), 3u);
  }
}

TEST(LossReportJson, OneLine) {
  LossReport r{3, 1.0, 2.0, 0.5, 4.0, 7.5};
  const std::string line = to_json_line(r);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_NE(line.find("\"step\":3"), std::string::npos);
}

TEST(SampleBatch, WindowsComeFromSingleTrajectories) {
  const auto data = generated("duffing", 3, 20, 20);
  std::mt19937_64 rng(1);
  const Batch b = sample_batch(data, 5, 50, rng);
  ASSERT_EQ(b.seq_len(), 5u);
  ASSERT_EQ(b.batch_size(), 50);
  for (Eigen::Index r = 0; r < 50; ++r) {
    bool found = false;
    for (const auto& t : data) {
      for (Eigen::Index s = 0; s + 5 <= 20 && !found; ++s) {
        bool all = true;
        for (Eigen::Index i = 0; i <= 5 && all; ++i) all = t.states.row(s + i) == b.states[i].row(r);
        found = all;
      }
    }
    EXPECT_TRUE(found) << r;
  }
}

TEST(Baseline, RecipeAndCapacity) {
  ModelConfig ref;  // 2 -> 128 x3 -> 128 latent, linear decoder
  ref.k_structure = koopman::KStructure::SkewSymmetric;
  const auto cap_cfg = baseline_config(ref);
  EXPECT_EQ(cap_cfg.k_structure, koopman::KStructure::Dense);
  EXPECT_FALSE(cap_cfg.nonlinear_latent);
  const KoopmanModel r(ref), b(cap_cfg);
  EXPECT_EQ(b.encoder_parameter_count(), r.encoder_parameter_count());
  EXPECT_EQ(b.decoder_parameter_count(), r.decoder_parameter_count());

  const auto tc = baseline_train_config(TrainConfig{});
  EXPECT_EQ(tc.loss_weights.align, 0.0);
  EXPECT_EQ(tc.loss_weights.reconst, 0.0);
  EXPECT_EQ(tc.loss_weights.pred, 1.0);
  EXPECT_EQ(tc.train_reencode_period, 1u);
}

TEST(Baseline, ZeroStepsLeavesInitialization) {
  const auto data = generated("duffing", 2, 20, 21);
  ModelConfig ref = small_model();
  auto cfg = quick_train(0);
  const auto res = fit_mlp_baseline(ref, data, cfg);
  EXPECT_TRUE(res.result.history.empty());
  const KoopmanModel fresh(baseline_config(ref));
  for (std::size_t i = 0; i < fresh.params().size(); ++i) {
    EXPECT_EQ(res.model.params()[i].value, fresh.params()[i].value);
  }
  EXPECT_EQ(res.capacity.reference_encoder, KoopmanModel(ref).encoder_parameter_count());
}
