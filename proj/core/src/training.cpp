#include "koopman_lab/training.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "koopman_lab/errors.hpp"
#include "koopman_lab/log.hpp"

namespace koopman_lab::training {

using grad::Tensor;
using koopman::KoopmanModel;
using nlohmann::json;

namespace {

constexpr std::uint32_t kBatchStream = 0xBA7C;

__extension__ using u128 = unsigned __int128;

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>((static_cast<u128>(rng()) * n) >> 64);
}

Matrix stack(const std::vector<Matrix>& blocks) {
  Eigen::Index rows = 0;
  for (const auto& b : blocks) rows += b.rows();
  Matrix out(rows, blocks.front().cols());
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    out.middleRows(r, b.rows()) = b;
    r += b.rows();
  }
  return out;
}

Tensor sum_of_row_norms(const Tensor& a, const Tensor& b, double inv_batch) {
  return grad::scale(grad::sum(grad::row_norms(grad::sub(a, b))), inv_batch);
}

void check_finite(double value, const char* term) {
  if (!std::isfinite(value)) {
    throw TrainingDivergence(std::string("sequence_loss: non-finite ") + term + " term", 0);
  }
}

std::vector<Matrix> snapshot(const nn::ParameterSet& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

void restore(nn::ParameterSet& params, const std::vector<Matrix>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

void check_dataset(const KoopmanModel& model, const std::vector<dynsys::Trajectory>& trajectories,
                   const TrainConfig& config) {
  if (trajectories.empty()) throw InvalidArgument("train: no training trajectories");
  for (const auto& t : trajectories) {
    if (t.states.cols() != model.state_dim()) throw InvalidArgument("train: dataset and model state dims differ");
    if (t.steps() < config.seq_len) throw InvalidArgument("train: seq_len exceeds the shortest training trajectory");
    const bool controlled = model.control_dim() > 0;
    if (controlled != t.has_controls()) throw InvalidArgument("train: controls must be present iff the model has L");
    if (controlled && t.controls.cols() != model.control_dim()) {
      throw InvalidArgument("train: dataset and model control dims differ");
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  std::vector<std::string> v;
  if (seq_len < 1) v.push_back("train.seq_len must be at least 1");
  if (batch_size < 1) v.push_back("train.batch_size must be at least 1");
  if (!(lr_main > 0.0)) v.push_back("train.lr_main must be positive");
  if (!(lr_dynamics > 0.0)) v.push_back("train.lr_dynamics must be positive");
  if (weight_decay < 0.0) v.push_back("train.weight_decay must be non-negative");
  if (l1_weight < 0.0) v.push_back("train.l1_weight must be non-negative");
  if (loss_weights.align < 0.0 || loss_weights.reconst < 0.0 || loss_weights.pred < 0.0) {
    v.push_back("train.loss_weights must be non-negative");
  }
  if (!v.empty()) throw ConfigError(std::move(v));
}

std::string TrainConfig::to_json() const {
  json j = {{"seq_len", seq_len},
            {"batch_size", batch_size},
            {"steps", steps},
            {"lr_main", lr_main},
            {"lr_dynamics", lr_dynamics},
            {"weight_decay", weight_decay},
            {"l1_weight", l1_weight},
            {"loss_weights", {{"align", loss_weights.align}, {"reconst", loss_weights.reconst}, {"pred", loss_weights.pred}}},
            {"train_reencode_period", train_reencode_period},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed train config: ") + e.what());
  }
  TrainConfig c;
  std::vector<std::string> v;
  auto count = [&](const char* key, std::size_t& out) {
    if (!j.contains(key)) return;
    const auto& x = j.at(key);
    if (!x.is_number_integer() || x.get<long long>() < 0) {
      v.push_back(std::string("train.") + key + " must be a non-negative integer");
      return;
    }
    out = x.get<std::size_t>();
  };
  auto real = [&](const json& obj, const char* key, double& out, const char* prefix) {
    if (!obj.contains(key)) return;
    if (!obj.at(key).is_number()) {
      v.push_back(std::string(prefix) + key + " must be a number");
      return;
    }
    out = obj.at(key).get<double>();
  };
  count("seq_len", c.seq_len);
  count("batch_size", c.batch_size);
  count("steps", c.steps);
  count("train_reencode_period", c.train_reencode_period);
  count("checkpoint_every", c.checkpoint_every);
  real(j, "lr_main", c.lr_main, "train.");
  real(j, "lr_dynamics", c.lr_dynamics, "train.");
  real(j, "weight_decay", c.weight_decay, "train.");
  real(j, "l1_weight", c.l1_weight, "train.");
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    real(w, "align", c.loss_weights.align, "train.loss_weights.");
    real(w, "reconst", c.loss_weights.reconst, "train.loss_weights.");
    real(w, "pred", c.loss_weights.pred, "train.loss_weights.");
  }
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) {
      v.push_back("train.seed must be a non-negative integer");
    } else {
      c.seed = j.at("seed").get<std::uint64_t>();
    }
  }
  if (!v.empty()) throw ConfigError(std::move(v));
  return c;
}

std::string to_json_line(const LossReport& r) {
  json j = {{"step", r.step}, {"align", r.align}, {"reconst", r.reconst},
            {"pred", r.pred}, {"l1", r.l1},       {"total", r.total}};
  return j.dump();
}

Batch window_batch(const dynsys::Trajectory& traj, std::size_t start, std::size_t seq_len) {
  if (seq_len < 1) throw InvalidArgument("window_batch: seq_len must be at least 1");
  if (start + seq_len > traj.steps()) throw InvalidArgument("window_batch: window exceeds the trajectory");
  Batch b;
  for (std::size_t i = 0; i <= seq_len; ++i) b.states.push_back(traj.states.row(static_cast<Eigen::Index>(start + i)));
  if (traj.has_controls()) {
    for (std::size_t i = 0; i < seq_len; ++i) {
      b.controls.push_back(traj.controls.row(static_cast<Eigen::Index>(start + i)));
    }
  }
  return b;
}

Batch sample_batch(const std::vector<dynsys::Trajectory>& trajectories, std::size_t seq_len, std::size_t batch_size,
                   std::mt19937_64& rng) {
  if (trajectories.empty()) throw InvalidArgument("sample_batch: no trajectories");
  if (seq_len < 1 || batch_size < 1) throw InvalidArgument("sample_batch: seq_len and batch_size must be positive");
  const auto B = static_cast<Eigen::Index>(batch_size);
  const auto d = trajectories.front().states.cols();
  const bool controlled = trajectories.front().has_controls();
  const auto p = trajectories.front().controls.cols();
  Batch b;
  b.states.assign(seq_len + 1, Matrix(B, d));
  if (controlled) b.controls.assign(seq_len, Matrix(B, p));
  for (Eigen::Index r = 0; r < B; ++r) {
    const auto& traj = trajectories[uniform_index(rng, trajectories.size())];
    if (traj.steps() < seq_len) throw InvalidArgument("sample_batch: trajectory shorter than seq_len");
    const std::size_t start = uniform_index(rng, traj.steps() - seq_len + 1);
    for (std::size_t i = 0; i <= seq_len; ++i) b.states[i].row(r) = traj.states.row(static_cast<Eigen::Index>(start + i));
    if (controlled) {
      for (std::size_t i = 0; i < seq_len; ++i) {
        b.controls[i].row(r) = traj.controls.row(static_cast<Eigen::Index>(start + i));
      }
    }
  }
  return b;
}

LossGraph sequence_loss(const koopman::TapedModel& model, const Batch& batch, const TrainConfig& config) {
  const std::size_t T = batch.seq_len();
  if (T < 1) throw InvalidArgument("sequence_loss: window needs at least one transition");
  const Eigen::Index B = batch.batch_size();
  if (!batch.controls.empty() && batch.controls.size() != T) {
    throw InvalidArgument("sequence_loss: window needs one control per transition");
  }
  grad::Tape& tape = model.tape();
  const double inv_b = 1.0 / static_cast<double>(B);
  const auto TB = static_cast<Eigen::Index>(T) * B;

  const Tensor x_all = tape.constant(stack(batch.states));
  const Tensor z_all = model.encode(x_all);
  Tensor v_all;
  if (!batch.controls.empty()) v_all = model.encode_control(tape.constant(stack(batch.controls)));

  const Tensor reconst = sum_of_row_norms(x_all, model.decode(z_all), inv_b);
  const Tensor l1 = grad::scale(grad::l1_norm(z_all), inv_b);

  const std::size_t period = config.train_reencode_period;
  std::vector<Tensor> predicted;
  predicted.reserve(T);
  Tensor z = grad::slice_rows(z_all, 0, B);
  for (std::size_t i = 1; i <= T; ++i) {
    const Tensor v = v_all.valid() ? grad::slice_rows(v_all, static_cast<Eigen::Index>(i - 1) * B, B) : Tensor();
    z = model.advance(z, v);
    predicted.push_back(z);
    if (period > 0 && i % period == 0 && i < T) z = model.encode(model.decode(z));
  }
  const Tensor z_hat = grad::concat(predicted, 0);
  const Tensor align = sum_of_row_norms(z_hat, grad::slice_rows(z_all, B, TB), inv_b);
  const Tensor pred = sum_of_row_norms(grad::slice_rows(x_all, B, TB), model.decode(z_hat), inv_b);

  LossGraph g;
  g.report.align = align.value()(0, 0);
  g.report.reconst = reconst.value()(0, 0);
  g.report.pred = pred.value()(0, 0);
  g.report.l1 = l1.value()(0, 0);
  check_finite(g.report.align, "align");
  check_finite(g.report.reconst, "reconst");
  check_finite(g.report.pred, "pred");
  check_finite(g.report.l1, "l1");

  const auto& w = config.loss_weights;
  const std::pair<const Tensor*, double> terms[] = {
      {&align, w.align}, {&reconst, w.reconst}, {&pred, w.pred}, {&l1, config.l1_weight}};
  for (const auto& [t, weight] : terms) {
    if (weight == 0.0) continue;
    const Tensor scaled = grad::scale(*t, weight);
    g.total = g.total.valid() ? grad::add(g.total, scaled) : scaled;
  }
  if (!g.total.valid()) g.total = grad::scale(reconst, 0.0);
  g.report.total = g.total.value()(0, 0);
  check_finite(g.report.total, "total");
  return g;
}

LossReport evaluate_loss(KoopmanModel& model, const Batch& batch, const TrainConfig& config) {
  grad::Tape tape;
  return sequence_loss(model.bind(tape), batch, config).report;
}

TrainResult train(KoopmanModel& model, const std::vector<dynsys::Trajectory>& trajectories, const TrainConfig& config,
                  const StepCallback& on_step) {
  config.validate();
  check_dataset(model, trajectories, config);
  nn::AdamWConfig opt;
  opt.lr = config.lr_main;
  opt.weight_decay = config.weight_decay;
  opt.group_lr[KoopmanModel::kDynamicsGroup] = config.lr_dynamics;
  auto state = nn::make_adamw(model.params(), opt);
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    kBatchStream};
  std::mt19937_64 rng(seq);
  const bool linear_decoder = model.config().decoder == koopman::DecoderKind::Linear;

  TrainResult result;
  result.history.reserve(config.steps);
  std::vector<Matrix> last_good = snapshot(model.params());
  auto save = [&](const std::string& name) {
    if (!config.checkpoint_dir.empty()) koopman::save_model(config.checkpoint_dir / name, model);
  };
  for (std::size_t step = 1; step <= config.steps; ++step) {
    try {
      const Batch batch = sample_batch(trajectories, config.seq_len, config.batch_size, rng);
      model.params().zero_grad();
      grad::Tape tape;
      LossGraph g = sequence_loss(model.bind(tape), batch, config);
      g.report.step = step;
      tape.backward(g.total);
      last_good = snapshot(model.params());
      nn::adamw_step(state, model.params());
      if (linear_decoder) model.normalize_decoder_columns();
      model.sync();
      result.history.push_back(g.report);
      if (on_step) on_step(g.report);
    } catch (const TrainingDivergence& e) {
      restore(model.params(), last_good);
      model.sync();
      save("last_good");
      throw TrainingDivergence(std::string(e.what()) + " at step " + std::to_string(step), step);
    } catch (const DiscretizationError& e) {
      restore(model.params(), last_good);
      model.sync();
      save("last_good");
      throw TrainingDivergence(std::string("discretization failed at step ") + std::to_string(step) + ": " + e.what(),
                               step);
    }
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "step_%08zu", step);
      save(name);
    }
  }
  save("final");
  return result;
}

koopman::ModelConfig baseline_config(const koopman::ModelConfig& reference) {
  // Same encoder and decoder as the reference; a dense linear K joins them.
  koopman::ModelConfig c = reference;
  c.k_structure = koopman::KStructure::Dense;
  c.nonlinear_latent = false;
  return c;
}

TrainConfig baseline_train_config(TrainConfig config) {
  config.loss_weights = {0.0, 0.0, 1.0};
  config.train_reencode_period = 1;
  config.l1_weight = 0.0;
  return config;
}

BaselineResult fit_mlp_baseline(const koopman::ModelConfig& reference,
                                const std::vector<dynsys::Trajectory>& trajectories, const TrainConfig& config,
                                const StepCallback& on_step) {
  KoopmanModel ref(reference);
  BaselineResult out{KoopmanModel(baseline_config(reference)), {}, {}};
  out.capacity.reference_encoder = ref.encoder_parameter_count();
  out.capacity.reference_decoder = ref.decoder_parameter_count();
  out.capacity.baseline_encoder = out.model.encoder_parameter_count();
  out.capacity.baseline_decoder = out.model.decoder_parameter_count();
  const auto& p = out.model.params();
  out.capacity.baseline_dynamics = static_cast<std::size_t>(p[p.index_of("dynamics.K")].value.size());
  out.result = train(out.model, trajectories, baseline_train_config(config), on_step);
  return out;
}

}  // namespace koopman_lab::training
