// Command-line front end. Each subcommand parses flags and calls into the
// core library; no pipeline logic lives here.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "koopman_lab/dataset.hpp"
#include "koopman_lab/dmd.hpp"
#include "koopman_lab/errors.hpp"
#include "koopman_lab/experiment.hpp"
#include "koopman_lab/log.hpp"
#include "koopman_lab/parallel.hpp"
#include "koopman_lab/report.hpp"
#include "koopman_lab/rollout.hpp"

namespace fs = std::filesystem;
namespace kl = koopman_lab;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw kl::IoError("cannot open '" + path.string() + "' for writing");
  out << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw kl::IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, double> parse_params(const std::vector<std::string>& items) {
  std::map<std::string, double> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw kl::InvalidArgument("--param expects name=value, got '" + item + "'");
    out[item.substr(0, eq)] = std::stod(item.substr(eq + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Koopman autoencoder toolkit"};
  app.require_subcommand(1);
  std::size_t jobs = 0;
  bool quiet = false;
  app.add_option("--jobs,-j", jobs, "Worker threads (default: KOOPMAN_LAB_JOBS or 1)");
  app.add_flag("--quiet,-q", quiet, "Only report warnings and errors");

  // generate
  auto* gen = app.add_subcommand("generate", "Integrate a benchmark system into a dataset directory");
  std::string g_system = "pendulum", g_control = "none";
  std::size_t g_n = 50, g_n_eval = 100, g_len = 500, g_eval_len = 1000;
  std::uint64_t g_seed = 0;
  double g_dt = 0.0;
  std::vector<std::string> g_params;
  fs::path g_out;
  gen->add_option("--system", g_system, "System name")->capture_default_str();
  gen->add_option("--n", g_n, "Training trajectories")->capture_default_str();
  gen->add_option("--n-eval", g_n_eval, "Evaluation trajectories")->capture_default_str();
  gen->add_option("--len", g_len, "Training trajectory length (steps)")->capture_default_str();
  gen->add_option("--eval-len", g_eval_len, "Evaluation trajectory length (steps)")->capture_default_str();
  gen->add_option("--seed", g_seed, "Seed")->capture_default_str();
  gen->add_option("--dt", g_dt, "Sample interval (0 = system default)");
  gen->add_option("--param", g_params, "Parameter override name=value");
  gen->add_option("--control", g_control, "none, sinusoid or piecewise_constant")->capture_default_str();
  gen->add_option("--out", g_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a Koopman model on a dataset");
  fs::path t_dataset, t_config, t_out;
  std::optional<std::uint64_t> t_seed;
  std::optional<std::size_t> t_steps;
  tr->add_option("--dataset", t_dataset, "Dataset directory")->required();
  tr->add_option("--config", t_config, "JSON with \"model\" and \"train\" sections");
  tr->add_option("--out", t_out, "Checkpoint directory")->required();
  tr->add_option("--seed", t_seed, "Seed override");
  tr->add_option("--steps", t_steps, "Step-count override");

  // rollout
  auto* ro = app.add_subcommand("rollout", "Roll a checkpoint out from one initial state");
  fs::path r_ckpt, r_x0, r_out;
  std::size_t r_horizon = 1000, r_reencode = 0;
  ro->add_option("--ckpt", r_ckpt, "Checkpoint stem (without extension)")->required();
  ro->add_option("--x0", r_x0, "File with the initial state")->required();
  ro->add_option("--horizon", r_horizon, "Steps")->capture_default_str();
  ro->add_option("--reencode", r_reencode, "Reencoding period k (0 = never)")->capture_default_str();
  ro->add_option("--out", r_out, "CSV output")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "MSE over a plan grid on a dataset's evaluation split");
  fs::path e_ckpt, e_dataset, e_out;
  std::vector<std::size_t> e_horizons{100, 1000}, e_periods{0, 1, 10, 25, 50, 100};
  std::string e_name = "koopman";
  ev->add_option("--ckpt", e_ckpt, "Checkpoint stem")->required();
  ev->add_option("--dataset", e_dataset, "Dataset directory")->required();
  ev->add_option("--horizons", e_horizons, "Horizons")->delimiter(',')->capture_default_str();
  ev->add_option("--periods", e_periods, "Reencoding periods")->delimiter(',')->capture_default_str();
  ev->add_option("--name", e_name, "Model name in metrics.json")->capture_default_str();
  ev->add_option("--out", e_out, "Output directory for metrics.json and curves/")->required();

  // export
  auto* ex = app.add_subcommand("export", "Phase-portrait CSV from a grid of initial states");
  fs::path x_ckpt, x_out;
  std::string x_grid;
  std::size_t x_steps = 1000, x_reencode = 0;
  ex->add_option("--ckpt", x_ckpt, "Checkpoint stem")->required();
  ex->add_option("--grid", x_grid, "lo:hi:n per dimension, comma separated")->required();
  ex->add_option("--steps", x_steps, "Steps per trajectory")->capture_default_str();
  ex->add_option("--reencode", x_reencode, "Reencoding period k")->capture_default_str();
  ex->add_option("--out", x_out, "CSV output")->required();

  // dmd-fit
  auto* dm = app.add_subcommand("dmd-fit", "Least-squares DMD on a dataset's training split");
  fs::path d_dataset, d_out;
  dm->add_option("--dataset", d_dataset, "Dataset directory")->required();
  dm->add_option("--out", d_out, "JSON output")->required();

  // run
  auto* rn = app.add_subcommand("run", "Full pipeline from one experiment config");
  fs::path n_config, n_out;
  std::optional<std::uint64_t> n_seed;
  rn->add_option("--config", n_config, "Experiment config")->required();
  rn->add_option("--out", n_out, "Output directory")->required();
  rn->add_option("--seed", n_seed, "Seed override");

  // report
  auto* rp = app.add_subcommand("report", "Consolidated table from metrics files");
  std::vector<fs::path> p_inputs;
  fs::path p_csv;
  rp->add_option("metrics", p_inputs, "metrics.json files")->required();
  rp->add_option("--csv", p_csv, "Also write the table as CSV");

  CLI11_PARSE(app, argc, argv);

  if (jobs > 0) kl::set_worker_count(jobs);
  if (quiet) kl::log::set_min_level(kl::log::Level::Warning);

  try {
    if (*gen) {
      kl::dynsys::DatasetRequest req;
      req.system = kl::dynsys::make_system(g_system, parse_params(g_params));
      req.n_train = g_n;
      req.n_eval = g_n_eval;
      req.train_len = g_len;
      req.eval_len = g_eval_len;
      req.seed = g_seed;
      req.dt = g_dt;
      req.control.kind = kl::dynsys::parse_control_kind(g_control);
      const auto m = kl::dynsys::generate_dataset(req, g_out);
      std::cout << "wrote " << m.train.size() << " train and " << m.eval.size() << " eval trajectories to " << g_out.string()
                << "\n";
    } else if (*tr) {
      const auto dataset = kl::dynsys::load_dataset(t_dataset);
      auto job = kl::experiment::parse_train_job(t_config.empty() ? "{}" : read_file(t_config), dataset.manifest);
      if (t_seed) job.train.seed = job.model.seed = *t_seed;
      if (t_steps) job.train.steps = *t_steps;
      kl::experiment::train_stage(dataset, job.model, job.train, t_out, t_out / "losses.jsonl");
      std::cout << "checkpoint " << (t_out / "final").string() << "\n";
    } else if (*ro) {
      const auto model = kl::koopman::load_model(r_ckpt);
      kl::rollout::RolloutPlan plan;
      plan.horizon = r_horizon;
      plan.reencode_period = r_reencode;
      const auto result = kl::rollout::rollout(model, kl::experiment::read_vector_file(r_x0), plan);
      write_file(r_out, kl::experiment::rollout_csv(result));
    } else if (*ev) {
      const auto model = kl::koopman::load_model(e_ckpt);
      const auto dataset = kl::dynsys::load_dataset(e_dataset);
      kl::report::ExperimentMetrics metrics;
      metrics.environment = std::string(kl::dynsys::system_name(dataset.manifest.system.id));
      metrics.models.push_back({e_name, true,
                                kl::rollout::evaluate_mse(model, dataset.eval,
                                                          kl::rollout::make_plan_grid(e_horizons, e_periods))});
      kl::experiment::write_metrics(e_out, metrics);
      std::cout << kl::report::compare_report(std::vector{metrics}).text();
    } else if (*ex) {
      const auto model = kl::koopman::load_model(x_ckpt);
      write_file(x_out, kl::experiment::phase_csv(model, kl::experiment::parse_phase_grid(x_grid), x_steps, x_reencode));
    } else if (*dm) {
      const auto dataset = kl::dynsys::load_dataset(d_dataset);
      std::vector<Eigen::MatrixXd> states;
      for (const auto& t : dataset.train) states.push_back(t.states);
      const auto fit = kl::dmd::fit_dmd(kl::dmd::pairs_from_trajectories(states));
      write_file(d_out, kl::dmd::dmd_to_json(fit));
      std::cout << "fit residual " << fit.fit_residual << " over " << fit.n_pairs << " pairs\n";
    } else if (*rn) {
      auto config = kl::experiment::load_experiment_config(n_config);
      if (n_seed) kl::experiment::override_seed(config, *n_seed);
      const auto summary = kl::experiment::run_experiment(config, n_out);
      std::cout << kl::report::compare_report(std::vector{summary.metrics}).text();
    } else if (*rp) {
      const auto table = kl::report::compare_report(p_inputs);
      std::cout << table.text();
      if (!p_csv.empty()) write_file(p_csv, table.csv());
    }
  } catch (const kl::ConfigError& e) {
    std::cerr << "invalid configuration:\n";
    for (const auto& v : e.violations()) std::cerr << "  - " << v << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
