#include "koopman_lab/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "koopman_lab/dmd.hpp"
#include "koopman_lab/errors.hpp"
#include "koopman_lab/log.hpp"

namespace koopman_lab::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "'");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Field readers that record violations instead of throwing.
struct Reader {
  std::vector<std::string>& violations;

  const json* section(const json& j, const char* key) {
    if (!j.contains(key)) return nullptr;
    if (!j.at(key).is_object()) {
      violations.push_back(std::string(key) + " must be an object");
      return nullptr;
    }
    return &j.at(key);
  }

  void count(const json* obj, const char* key, std::size_t& out, const std::string& path, bool positive) {
    if (obj == nullptr || !obj->contains(key)) return;
    const auto& v = obj->at(key);
    if (!v.is_number_integer() || v.get<long long>() < (positive ? 1 : 0)) {
      violations.push_back(path + key + (positive ? " must be a positive integer" : " must be a non-negative integer"));
      return;
    }
    out = v.get<std::size_t>();
  }

  void real(const json* obj, const char* key, double& out, const std::string& path) {
    if (obj == nullptr || !obj->contains(key)) return;
    if (!obj->at(key).is_number()) {
      violations.push_back(path + key + " must be a number");
      return;
    }
    out = obj->at(key).get<double>();
  }

  void flag(const json* obj, const char* key, bool& out, const std::string& path) {
    if (obj == nullptr || !obj->contains(key)) return;
    if (!obj->at(key).is_boolean()) {
      violations.push_back(path + key + " must be true or false");
      return;
    }
    out = obj->at(key).get<bool>();
  }

  void counts(const json* obj, const char* key, std::vector<std::size_t>& out, const std::string& path,
              bool positive) {
    if (obj == nullptr || !obj->contains(key)) return;
    const auto& v = obj->at(key);
    if (!v.is_array()) {
      violations.push_back(path + key + " must be an array");
      return;
    }
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto& e = v[i];
      if (!e.is_number_integer() || e.get<long long>() < (positive ? 1 : 0)) {
        violations.push_back(path + key + "[" + std::to_string(i) + "] must be a " +
                             (positive ? "positive" : "non-negative") + " integer");
        continue;
      }
      out.push_back(e.get<std::size_t>());
    }
  }
};

void absorb(std::vector<std::string>& violations, const ConfigError& e) {
  violations.insert(violations.end(), e.violations().begin(), e.violations().end());
}

std::string curve_prefix(const report::ModelMetrics& m) { return m.name == "koopman" ? "" : m.name + "_"; }

void write_losses(const fs::path& path, const training::TrainResult& r) {
  std::string text;
  for (const auto& rep : r.history) text += training::to_json_line(rep) + "\n";
  write_text(path, text);
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  if (!j.is_object()) throw ConfigError({"config must be a JSON object"});
  std::vector<std::string> v;
  Reader rd{v};
  ExperimentConfig c;

  if (!j.contains("schema_version")) {
    v.push_back("schema_version is required");
  } else if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kSchemaVersion) {
    v.push_back("schema_version must be " + std::to_string(kSchemaVersion));
  }
  if (j.contains("name")) {
    if (j.at("name").is_string()) {
      c.name = j.at("name").get<std::string>();
    } else {
      v.push_back("name must be a string");
    }
  }
  if (j.contains("seed")) {
    if (j.at("seed").is_number_unsigned()) {
      c.seed = j.at("seed").get<std::uint64_t>();
    } else {
      v.push_back("seed must be a non-negative integer");
    }
  }

  if (const json* s = rd.section(j, "system")) {
    if (s->contains("name") && s->at("name").is_string()) {
      c.system = s->at("name").get<std::string>();
    } else {
      v.push_back("system.name must be a string");
    }
    if (s->contains("params")) {
      if (!s->at("params").is_object()) {
        v.push_back("system.params must be an object");
      } else {
        for (const auto& [k, val] : s->at("params").items()) {
          if (!val.is_number()) {
            v.push_back("system.params." + k + " must be a number");
            continue;
          }
          c.system_params[k] = val.get<double>();
        }
      }
    }
  } else {
    v.push_back("system section is required");
  }

  if (const json* d = rd.section(j, "dataset")) {
    rd.count(d, "n_train", c.n_train, "dataset.", true);
    rd.count(d, "n_eval", c.n_eval, "dataset.", true);
    rd.count(d, "train_len", c.train_len, "dataset.", true);
    rd.count(d, "eval_len", c.eval_len, "dataset.", true);
    rd.real(d, "dt", c.dt, "dataset.");
    if (const json* ctl = rd.section(*d, "control")) {
      if (ctl->contains("kind")) {
        try {
          c.control.kind = dynsys::parse_control_kind(ctl->at("kind").get<std::string>());
        } catch (const std::exception& e) {
          v.push_back(std::string("dataset.control.kind: ") + e.what());
        }
      }
      rd.real(ctl, "amplitude", c.control.amplitude, "dataset.control.");
      rd.real(ctl, "frequency", c.control.frequency, "dataset.control.");
      rd.count(ctl, "hold_steps", c.control.hold_steps, "dataset.control.", true);
    }
  }

  if (j.contains("model")) {
    try {
      c.model = koopman::ModelConfig::from_json(j.at("model").dump());
    } catch (const std::exception& e) {
      v.push_back(std::string("model: ") + e.what());
    }
  }
  if (j.contains("train")) {
    try {
      c.train = training::TrainConfig::from_json(j.at("train").dump());
    } catch (const ConfigError& e) {
      absorb(v, e);
    } catch (const std::exception& e) {
      v.push_back(std::string("train: ") + e.what());
    }
  }
  if (const json* b = rd.section(j, "baselines")) {
    rd.flag(b, "mlp", c.mlp_baseline, "baselines.");
    rd.count(b, "mlp_steps", c.mlp_steps, "baselines.", false);
    rd.flag(b, "dmd", c.dmd_baseline, "baselines.");
  }
  if (const json* e = rd.section(j, "eval")) {
    rd.counts(e, "horizons", c.horizons, "eval.", true);
    rd.counts(e, "reencode_periods", c.reencode_periods, "eval.", false);
  }
  if (const json* p = rd.section(j, "phase")) {
    rd.count(p, "trajectories", c.phase_trajectories, "phase.", false);
    rd.count(p, "steps", c.phase_steps, "phase.", false);
  }

  auto more = validate(c);
  v.insert(v.end(), more.begin(), more.end());
  if (!v.empty()) throw ConfigError(std::move(v));
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) { return parse_experiment_config(read_text(path)); }

std::vector<std::string> validate(const ExperimentConfig& c) {
  std::vector<std::string> v;
  if (c.schema_version != kSchemaVersion) v.push_back("schema_version must be " + std::to_string(kSchemaVersion));
  bool system_ok = true;
  try {
    dynsys::make_system(c.system, c.system_params);
  } catch (const std::exception& e) {
    v.push_back(std::string("system: ") + e.what());
    system_ok = false;
  }
  if (c.n_train < 1) v.push_back("dataset.n_train must be a positive integer");
  if (c.n_eval < 1) v.push_back("dataset.n_eval must be a positive integer");
  if (c.train_len < 1) v.push_back("dataset.train_len must be a positive integer");
  if (c.eval_len < 1) v.push_back("dataset.eval_len must be a positive integer");
  if (c.dt < 0.0) v.push_back("dataset.dt must be non-negative");
  if (c.horizons.empty()) v.push_back("eval.horizons must not be empty");
  if (c.reencode_periods.empty()) v.push_back("eval.reencode_periods must not be empty");
  for (std::size_t h : c.horizons) {
    if (h < 1) v.push_back("eval.horizons entries must be positive");
    if (h > c.eval_len) v.push_back("eval horizon " + std::to_string(h) + " exceeds dataset.eval_len");
    for (std::size_t k : c.reencode_periods) {
      if (k > h) {
        v.push_back("reencode period " + std::to_string(k) + " exceeds horizon " + std::to_string(h));
      }
    }
  }
  if (c.train.seq_len > c.train_len) v.push_back("train.seq_len exceeds dataset.train_len");
  try {
    c.train.validate();
  } catch (const ConfigError& e) {
    absorb(v, e);
  }
  if (system_ok) {
    try {
      resolved_model_config(c).validate();
    } catch (const ConfigError& e) {
      absorb(v, e);
    }
  }
  return v;
}

void override_seed(ExperimentConfig& config, std::uint64_t seed) { config.seed = seed; }

dynsys::DatasetRequest dataset_request(const ExperimentConfig& c) {
  dynsys::DatasetRequest r;
  r.system = dynsys::make_system(c.system, c.system_params);
  r.n_train = c.n_train;
  r.n_eval = c.n_eval;
  r.train_len = c.train_len;
  r.eval_len = c.eval_len;
  r.seed = c.seed;
  r.dt = c.dt;
  r.control = c.control;
  if (r.system.control_dim > 0 && r.control.kind == dynsys::ControlSignal::Kind::None) {
    r.control.kind = dynsys::ControlSignal::Kind::Sinusoid;
  }
  return r;
}

koopman::ModelConfig resolved_model_config(const ExperimentConfig& c) {
  const auto system = dynsys::make_system(c.system, c.system_params);
  koopman::ModelConfig m = c.model;
  m.state_dim = system.state_dim;
  m.control_dim = system.control_dim;
  m.dt = c.dt > 0.0 ? c.dt : system.dt;
  m.seed = c.seed;
  return m;
}

void write_metrics(const fs::path& out_dir, const report::ExperimentMetrics& metrics) {
  write_text(out_dir / "metrics.json", report::metrics_to_json(metrics));
  for (const auto& m : metrics.models) {
    for (const auto& p : m.table.rows) {
      write_text(out_dir / "curves" / ("mse_curve_" + curve_prefix(m) + p.label + ".csv"), report::curve_csv(p));
    }
  }
}

koopman::KoopmanModel train_stage(const dynsys::Dataset& dataset, const koopman::ModelConfig& model_config,
                                  const training::TrainConfig& train_config, const fs::path& out_dir,
                                  const fs::path& losses_path) {
  koopman::KoopmanModel model(model_config);
  training::TrainConfig tc = train_config;
  tc.checkpoint_dir = out_dir;
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 10);
  const auto result = training::train(model, dataset.train, tc, [every](const training::LossReport& r) {
    if (r.step % every == 0) log::info("train step " + std::to_string(r.step) + " total " + std::to_string(r.total));
  });
  if (!losses_path.empty()) write_losses(losses_path, result);
  return model;
}

std::vector<Eigen::VectorXd> parse_phase_grid(const std::string& spec) {
  std::vector<std::vector<double>> axes;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    double lo = 0, hi = 0;
    int n = 0;
    char extra = 0;
    if (std::sscanf(part.c_str(), "%lf:%lf:%d%c", &lo, &hi, &n, &extra) != 3 || n < 1) {
      throw InvalidArgument("phase grid: expected lo:hi:n, got '" + part + "'");
    }
    std::vector<double> axis;
    for (int i = 0; i < n; ++i) axis.push_back(n == 1 ? lo : lo + (hi - lo) * i / (n - 1));
    axes.push_back(std::move(axis));
  }
  if (axes.empty()) throw InvalidArgument("phase grid: empty specification");
  std::vector<Eigen::VectorXd> points{Eigen::VectorXd(0)};
  for (const auto& axis : axes) {
    std::vector<Eigen::VectorXd> next;
    for (const auto& p : points) {
      for (double x : axis) {
        Eigen::VectorXd q(p.size() + 1);
        q << p, x;
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  return points;
}

namespace {

void append_rows(std::string& out, std::size_t id, const Eigen::MatrixXd& states, std::size_t steps) {
  char buf[64];
  for (Eigen::Index t = 0; t <= static_cast<Eigen::Index>(steps) && t < states.rows(); ++t) {
    std::snprintf(buf, sizeof(buf), "%zu,%ld", id, static_cast<long>(t));
    out += buf;
    for (Eigen::Index c = 0; c < states.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", states(t, c));
      out += buf;
    }
    out += "\n";
  }
}

std::string phase_header(Eigen::Index dims) {
  std::string h = "trajectory_id,step";
  for (Eigen::Index c = 0; c < dims; ++c) h += ",x" + std::to_string(c + 1);
  return h + "\n";
}

}  // namespace

std::string phase_csv(const koopman::LatentModel& model, const std::vector<Eigen::VectorXd>& ics, std::size_t steps,
                      std::size_t reencode_period) {
  std::string out = phase_header(model.state_dim());
  rollout::RolloutPlan plan;
  plan.horizon = steps;
  plan.reencode_period = reencode_period;
  for (std::size_t i = 0; i < ics.size(); ++i) {
    try {
      append_rows(out, i, rollout::rollout(model, ics[i], plan).states, steps);
    } catch (const ExplosionError& e) {
      log::warn("phase export: trajectory " + std::to_string(i) + " skipped, " + e.what());
    }
  }
  return out;
}

std::string phase_csv(const std::vector<dynsys::Trajectory>& trajectories, std::size_t steps) {
  std::string out = phase_header(trajectories.empty() ? 0 : trajectories.front().states.cols());
  for (std::size_t i = 0; i < trajectories.size(); ++i) append_rows(out, i, trajectories[i].states, steps);
  return out;
}

std::string rollout_csv(const rollout::RolloutResult& result) {
  std::string out = "step";
  for (Eigen::Index c = 0; c < result.states.cols(); ++c) out += ",x" + std::to_string(c + 1);
  out += "\n";
  char buf[64];
  for (Eigen::Index t = 0; t < result.states.rows(); ++t) {
    out += std::to_string(t);
    for (Eigen::Index c = 0; c < result.states.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", result.states(t, c));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

TrainJob parse_train_job(const std::string& text, const dynsys::DatasetManifest& manifest) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError({std::string("train job is not valid JSON: ") + e.what()});
  }
  std::vector<std::string> v;
  TrainJob job;
  try {
    if (j.contains("model")) job.model = koopman::ModelConfig::from_json(j.at("model").dump());
  } catch (const std::exception& e) {
    v.push_back(std::string("model: ") + e.what());
  }
  try {
    if (j.contains("train")) job.train = training::TrainConfig::from_json(j.at("train").dump());
  } catch (const ConfigError& e) {
    absorb(v, e);
  }
  if (j.contains("seed")) {
    if (j.at("seed").is_number_unsigned()) {
      job.train.seed = j.at("seed").get<std::uint64_t>();
    } else {
      v.push_back("seed must be a non-negative integer");
    }
  }
  job.model.state_dim = manifest.system.state_dim;
  job.model.control_dim = manifest.system.control_dim;
  job.model.dt = manifest.dt;
  job.model.seed = job.train.seed;
  try {
    job.model.validate();
  } catch (const ConfigError& e) {
    absorb(v, e);
  }
  try {
    job.train.validate();
  } catch (const ConfigError& e) {
    absorb(v, e);
  }
  if (job.train.seq_len > manifest.train_len) v.push_back("train.seq_len exceeds the dataset train_len");
  if (!v.empty()) throw ConfigError(std::move(v));
  return job;
}

Eigen::VectorXd read_vector_file(const fs::path& path) {
  std::string text = read_text(path);
  std::replace(text.begin(), text.end(), ',', ' ');
  std::stringstream ss(text);
  std::vector<double> values;
  std::string token;
  while (ss >> token) {
    std::size_t used = 0;
    double x = 0;
    try {
      x = std::stod(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size()) throw InvalidArgument("'" + path.string() + "': not a number: '" + token + "'");
    values.push_back(x);
  }
  if (values.empty()) throw InvalidArgument("'" + path.string() + "' holds no numbers");
  return Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

RunSummary run_experiment(const ExperimentConfig& config, const fs::path& out_dir) {
  if (auto v = validate(config); !v.empty()) throw ConfigError(std::move(v));
  const auto request = dataset_request(config);
  const auto model_config = resolved_model_config(config);

  log::info("generating " + std::string(dynsys::system_name(request.system.id)) + " dataset");
  dynsys::Dataset dataset = dynsys::generate_dataset(request);
  dynsys::write_dataset(dataset, out_dir);

  training::TrainConfig tc = config.train;
  tc.seed = config.seed;
  log::info("training Koopman model for " + std::to_string(tc.steps) + " steps");
  const auto model = train_stage(dataset, model_config, tc, out_dir / "ckpt" / "koopman", out_dir / "losses.jsonl");

  report::ExperimentMetrics metrics;
  metrics.environment = std::string(dynsys::system_name(request.system.id));
  const auto grid = rollout::make_plan_grid(config.horizons, config.reencode_periods);
  log::info("evaluating " + std::to_string(grid.size()) + " plans");
  metrics.models.push_back({"koopman", true, rollout::evaluate_mse(model, dataset.eval, grid)});

  std::optional<koopman::KoopmanModel> baseline;
  if (config.mlp_baseline) {
    training::TrainConfig btc = tc;
    btc.steps = config.mlp_steps > 0 ? config.mlp_steps : tc.steps;
    btc.checkpoint_dir = out_dir / "ckpt" / "mlp_baseline";
    log::info("training MLP baseline for " + std::to_string(btc.steps) + " steps");
    auto fitted = training::fit_mlp_baseline(model_config, dataset.train, btc);
    write_losses(out_dir / "losses_mlp_baseline.jsonl", fitted.result);
    metrics.models.push_back(
        {"mlp_baseline", false, rollout::evaluate_mse(fitted.model, dataset.eval, rollout::make_plan_grid(config.horizons, {1}))});
    baseline.emplace(std::move(fitted.model));
  }

  if (config.dmd_baseline && request.system.control_dim == 0) {
    std::vector<Eigen::MatrixXd> states;
    for (const auto& t : dataset.train) states.push_back(t.states);
    const auto fit = dmd::fit_dmd(dmd::pairs_from_trajectories(states));
    write_text(out_dir / "ckpt" / "dmd.json", dmd::dmd_to_json(fit));
    metrics.models.push_back(
        {"dmd", false, rollout::evaluate_mse(rollout::DmdAdapter(fit), dataset.eval, rollout::make_plan_grid(config.horizons, {0}))});
  }

  write_metrics(out_dir, metrics);

  const std::size_t steps = config.phase_steps > 0 ? config.phase_steps
                                                  : *std::max_element(config.horizons.begin(), config.horizons.end());
  const std::size_t n_phase = std::min(config.phase_trajectories, dataset.eval.size());
  if (n_phase > 0 && request.system.control_dim == 0) {
    std::vector<dynsys::Trajectory> truth(dataset.eval.begin(), dataset.eval.begin() + static_cast<std::ptrdiff_t>(n_phase));
    std::vector<Eigen::VectorXd> ics;
    for (const auto& t : truth) ics.push_back(t.states.row(0).transpose());
    const std::size_t phase_len = std::min(steps, config.eval_len);
    write_text(out_dir / "phase" / "truth.csv", phase_csv(truth, phase_len));
    write_text(out_dir / "phase" / "koopman_k0.csv", phase_csv(model, ics, phase_len, 0));
    const std::size_t h = *std::max_element(config.horizons.begin(), config.horizons.end());
    if (const auto* best = metrics.models.front().table.best_periodic(h)) {
      const std::size_t k = std::min(best->plan.reencode_period, phase_len);
      write_text(out_dir / "phase" / ("koopman_k" + std::to_string(k) + ".csv"), phase_csv(model, ics, phase_len, k));
    }
    if (baseline) write_text(out_dir / "phase" / "mlp_baseline_k1.csv", phase_csv(*baseline, ics, phase_len, 1));
  }

  return {metrics, out_dir / "metrics.json"};
}

}  // namespace koopman_lab::experiment
