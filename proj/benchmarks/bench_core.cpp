#include <random>

#include <benchmark/benchmark.h>

#include "koopman_lab/dataset.hpp"
#include "koopman_lab/expm.hpp"
#include "koopman_lab/model.hpp"
#include "koopman_lab/rollout.hpp"
#include "koopman_lab/training.hpp"

using namespace koopman_lab;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace {

Matrix random_matrix(std::uint64_t seed, Eigen::Index r, Eigen::Index c) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

koopman::DiscreteOperators stable_ops(Eigen::Index n) {
  koopman::DiscreteOperators ops;
  ops.K = random_matrix(1, n, n);
  ops.K *= 0.95 / ops.K.eigenvalues().cwiseAbs().maxCoeff();
  ops.delta = 1.0;
  return ops;
}

std::vector<dynsys::Trajectory> pendulum_data(std::size_t n, std::size_t len) {
  dynsys::DatasetRequest req;
  req.system = dynsys::make_system("pendulum");
  req.n_train = n;
  req.n_eval = 1;
  req.train_len = len;
  req.eval_len = 1;
  req.seed = 1;
  return dynsys::generate_dataset(req).train;
}

}  // namespace

static void BM_Expm(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  const Matrix K = random_matrix(2, n, n) * 0.5;
  for (auto _ : state) benchmark::DoNotOptimize(koopman::expm(K).data());
}
BENCHMARK(BM_Expm)->Arg(8)->Arg(32)->Arg(128);

static void BM_UnrollSequential(benchmark::State& state) {
  const auto ops = stable_ops(32);
  const Vector z0 = random_matrix(3, 32, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rollout::latent_unroll_sequential(ops, z0, Matrix(), state.range(0)).data());
  }
}
BENCHMARK(BM_UnrollSequential)->Arg(128)->Arg(1024);

static void BM_UnrollScan(benchmark::State& state) {
  const auto ops = stable_ops(32);
  const Vector z0 = random_matrix(3, 32, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rollout::latent_unroll_scan(ops, z0, Matrix(), state.range(0)).data());
  }
}
BENCHMARK(BM_UnrollScan)->Arg(128)->Arg(1024);

static void BM_Rk4PendulumDataset(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(pendulum_data(50, 500).size());
}
BENCHMARK(BM_Rk4PendulumDataset)->Unit(benchmark::kMillisecond);

// One forward/backward pass of the training loss at the default sizes
// (latent 128, encoder 2 -> 128 x3, batch 64, window 10).
static void BM_TrainingLossGradient(benchmark::State& state) {
  const auto data = pendulum_data(8, 100);
  koopman::ModelConfig mc;
  koopman::KoopmanModel model(mc);
  training::TrainConfig tc;
  tc.train_reencode_period = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(4);
  const auto batch = training::sample_batch(data, tc.seq_len, tc.batch_size, rng);
  for (auto _ : state) {
    model.params().zero_grad();
    grad::Tape tape;
    auto g = training::sequence_loss(model.bind(tape), batch, tc);
    tape.backward(g.total);
    benchmark::DoNotOptimize(g.report.total);
  }
}
BENCHMARK(BM_TrainingLossGradient)->Arg(0)->Arg(5)->Unit(benchmark::kMillisecond);

// 1000-step rollout of a default-size model; the argument is k.
static void BM_Rollout1000(benchmark::State& state) {
  koopman::ModelConfig mc;
  koopman::KoopmanModel model(mc);
  Vector x0(2);
  x0 << 0.5, -0.2;
  rollout::RolloutPlan p;
  p.horizon = 1000;
  p.reencode_period = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(rollout::rollout(model, x0, p).states.data());
}
BENCHMARK(BM_Rollout1000)->Arg(0)->Arg(25)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
