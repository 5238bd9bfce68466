#include "koopman_lab/dataset.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "koopman_lab/errors.hpp"
#include "koopman_lab/parallel.hpp"

namespace koopman_lab::dynsys {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kInitStream = 0x1C;
constexpr std::uint64_t kControlStream = 0xC7;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t purpose, Split split, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(split == Split::Train ? 0 : 1),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// std::uniform_real_distribution is not specified bit-for-bit across
// standard libraries; draw from the raw 64-bit engine instead.
double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double standard_normal(std::mt19937_64& rng) {
  double u1 = unit_uniform(rng);
  while (u1 <= 0.0) u1 = unit_uniform(rng);
  const double u2 = unit_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

json system_to_json(const SystemSpec& s) {
  json params = json::object();
  for (const auto& [k, v] : s.params) params[k] = v;
  return {{"name", std::string(system_name(s.id))},
          {"params", params},
          {"state_dim", s.state_dim},
          {"control_dim", s.control_dim},
          {"substeps", s.substeps}};
}

SystemSpec system_from_json(const json& j) {
  std::map<std::string, double> params;
  if (j.contains("params")) {
    for (const auto& [k, v] : j.at("params").items()) params[k] = v.get<double>();
  }
  SystemSpec s = make_system(j.at("name").get<std::string>(), params);
  if (j.contains("substeps")) s.substeps = j.at("substeps").get<std::size_t>();
  if (j.contains("state_dim") && j.at("state_dim").get<int>() != s.state_dim) {
    throw IoError("manifest state_dim disagrees with system");
  }
  return s;
}

json blob_to_json(const BlobRef& b) {
  json j = {{"states", b.states}, {"rows", b.rows}, {"cols", b.cols}};
  if (!b.controls.empty()) {
    j["controls"] = b.controls;
    j["control_cols"] = b.control_cols;
  }
  return j;
}

BlobRef blob_from_json(const json& j) {
  BlobRef b;
  b.states = j.at("states").get<std::string>();
  b.rows = j.at("rows").get<std::size_t>();
  b.cols = j.at("cols").get<std::size_t>();
  if (j.contains("controls")) {
    b.controls = j.at("controls").get<std::string>();
    b.control_cols = j.at("control_cols").get<std::size_t>();
  }
  return b;
}

Trajectory make_trajectory(const DatasetRequest& req, double dt, Split split, std::size_t index) {
  const std::size_t len = split == Split::Train ? req.train_len : req.eval_len;
  const Vector x0 = sample_initial_condition(req.system, req.seed, split, index);
  Matrix controls;
  if (req.system.control_dim > 0) {
    controls = sample_controls(req.system, req.control, dt, len, req.seed, split, index);
  }
  return integrate_rk4(req.system, x0, dt, len, controls, req.system.substeps);
}

}  // namespace

std::string control_kind_name(ControlSignal::Kind kind) {
  switch (kind) {
    case ControlSignal::Kind::None: return "none";
    case ControlSignal::Kind::Sinusoid: return "sinusoid";
    case ControlSignal::Kind::PiecewiseConstant: return "piecewise_constant";
  }
  return "none";
}

ControlSignal::Kind parse_control_kind(const std::string& name) {
  if (name == "none") return ControlSignal::Kind::None;
  if (name == "sinusoid") return ControlSignal::Kind::Sinusoid;
  if (name == "piecewise_constant") return ControlSignal::Kind::PiecewiseConstant;
  throw InvalidArgument("unknown control signal kind '" + name + "'");
}

Vector sample_initial_condition(const SystemSpec& system, std::uint64_t seed, Split split, std::size_t index) {
  auto rng = stream_rng(seed, kInitStream, split, index);
  const auto& init = system.init;
  Vector x(system.state_dim);
  if (init.kind == InitSampler::Kind::UniformBox) {
    if (init.lower.size() != system.state_dim || init.upper.size() != system.state_dim) {
      throw InvalidArgument("init sampler box does not match state_dim");
    }
    for (int i = 0; i < system.state_dim; ++i) {
      x[i] = init.lower[i] + (init.upper[i] - init.lower[i]) * unit_uniform(rng);
    }
  } else {
    if (init.center.size() != system.state_dim) throw InvalidArgument("init sampler center does not match state_dim");
    for (int i = 0; i < system.state_dim; ++i) x[i] = init.center[i] + init.stddev * standard_normal(rng);
  }
  return x;
}

Matrix sample_controls(const SystemSpec& system, const ControlSignal& signal, double dt, std::size_t n_steps,
                       std::uint64_t seed, Split split, std::size_t index) {
  Matrix u = Matrix::Zero(static_cast<Eigen::Index>(n_steps), system.control_dim);
  if (system.control_dim == 0) return u;
  auto rng = stream_rng(seed, kControlStream, split, index);
  switch (signal.kind) {
    case ControlSignal::Kind::None:
      break;
    case ControlSignal::Kind::Sinusoid:
      for (int c = 0; c < system.control_dim; ++c) {
        const double phase = 2.0 * std::numbers::pi * unit_uniform(rng);
        for (std::size_t t = 0; t < n_steps; ++t) {
          u(static_cast<Eigen::Index>(t), c) =
              signal.amplitude * std::sin(signal.frequency * static_cast<double>(t) * dt + phase);
        }
      }
      break;
    case ControlSignal::Kind::PiecewiseConstant: {
      const std::size_t hold = std::max<std::size_t>(1, signal.hold_steps);
      for (std::size_t t = 0; t < n_steps; t += hold) {
        for (int c = 0; c < system.control_dim; ++c) {
          const double level = signal.amplitude * (2.0 * unit_uniform(rng) - 1.0);
          for (std::size_t s = t; s < std::min(n_steps, t + hold); ++s) u(static_cast<Eigen::Index>(s), c) = level;
        }
      }
      break;
    }
  }
  return u;
}

Dataset generate_dataset(const DatasetRequest& req) {
  validate(req.system);
  if (req.n_train == 0 || req.n_eval == 0) throw InvalidArgument("dataset needs at least one train and eval trajectory");
  if (req.train_len == 0 || req.eval_len == 0) throw InvalidArgument("trajectory lengths must be positive");
  const double dt = req.dt > 0.0 ? req.dt : req.system.dt;
  if (req.system.control_dim > 0 && req.control.kind == ControlSignal::Kind::None) {
    throw InvalidArgument("forced system requires a control signal");
  }
  if (req.system.control_dim == 0 && req.control.kind != ControlSignal::Kind::None) {
    throw InvalidArgument(std::string(system_name(req.system.id)) + " takes no control input");
  }

  Dataset ds;
  ds.train.resize(req.n_train);
  ds.eval.resize(req.n_eval);
  parallel_for(req.n_train + req.n_eval, [&](std::size_t i) {
    if (i < req.n_train) {
      ds.train[i] = make_trajectory(req, dt, Split::Train, i);
    } else {
      ds.eval[i - req.n_train] = make_trajectory(req, dt, Split::Eval, i - req.n_train);
    }
  });

  auto& m = ds.manifest;
  m.system = req.system;
  m.n_train = req.n_train;
  m.n_eval = req.n_eval;
  m.train_len = req.train_len;
  m.eval_len = req.eval_len;
  m.seed = req.seed;
  m.dt = dt;
  m.control = req.control;
  return ds;
}

DatasetManifest generate_dataset(const DatasetRequest& request, const fs::path& out_dir) {
  Dataset ds = generate_dataset(request);
  return write_dataset(ds, out_dir);
}

void write_f64_blob(const fs::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  std::vector<unsigned char> buf(static_cast<std::size_t>(m.size()) * 8);
  std::size_t pos = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      auto bits = std::bit_cast<std::uint64_t>(m(r, c));
      for (int b = 0; b < 8; ++b) buf[pos++] = static_cast<unsigned char>(bits >> (8 * b));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Matrix read_f64_blob(const fs::path& path, std::size_t rows, std::size_t cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open blob '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != rows * cols * 8) {
    throw IoError("blob '" + path.string() + "' has " + std::to_string(size) + " bytes, expected " +
                  std::to_string(rows * cols * 8));
  }
  in.seekg(0);
  std::vector<unsigned char> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::size_t pos = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[pos++]) << (8 * b);
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = std::bit_cast<double>(bits);
    }
  }
  return m;
}

DatasetManifest write_dataset(Dataset& ds, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory '" + out_dir.string() + "': " + ec.message());

  auto& m = ds.manifest;
  m.train.clear();
  m.eval.clear();
  auto write_one = [&](const Trajectory& t, std::size_t index) {
    BlobRef ref;
    ref.states = "traj_" + std::to_string(index) + ".f64";
    ref.rows = static_cast<std::size_t>(t.states.rows());
    ref.cols = static_cast<std::size_t>(t.states.cols());
    write_f64_blob(out_dir / ref.states, t.states);
    if (t.has_controls()) {
      ref.controls = "ctrl_" + std::to_string(index) + ".f64";
      ref.control_cols = static_cast<std::size_t>(t.controls.cols());
      write_f64_blob(out_dir / ref.controls, t.controls);
    }
    return ref;
  };
  for (std::size_t i = 0; i < ds.train.size(); ++i) m.train.push_back(write_one(ds.train[i], i));
  for (std::size_t i = 0; i < ds.eval.size(); ++i) m.eval.push_back(write_one(ds.eval[i], ds.train.size() + i));

  json storage = {{"train", json::array()}, {"eval", json::array()}};
  for (const auto& b : m.train) storage["train"].push_back(blob_to_json(b));
  for (const auto& b : m.eval) storage["eval"].push_back(blob_to_json(b));
  json j = {{"schema_version", 1},
            {"system", system_to_json(m.system)},
            {"n_train_trajectories", m.n_train},
            {"n_eval_trajectories", m.n_eval},
            {"train_len", m.train_len},
            {"eval_len", m.eval_len},
            {"seed", m.seed},
            {"dt", m.dt},
            {"control",
             {{"kind", control_kind_name(m.control.kind)},
              {"amplitude", m.control.amplitude},
              {"frequency", m.control.frequency},
              {"hold_steps", m.control.hold_steps}}},
            {"storage", storage}};
  std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in '" + out_dir.string() + "'");
  out << j.dump(2) << '\n';
  return m;
}

DatasetManifest read_manifest(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest '" + manifest_path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest '" + manifest_path.string() + "': " + e.what());
  }
  DatasetManifest m;
  try {
    m.system = system_from_json(j.at("system"));
    m.n_train = j.at("n_train_trajectories").get<std::size_t>();
    m.n_eval = j.at("n_eval_trajectories").get<std::size_t>();
    m.train_len = j.at("train_len").get<std::size_t>();
    m.eval_len = j.at("eval_len").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.dt = j.at("dt").get<double>();
    if (j.contains("control")) {
      const auto& c = j.at("control");
      m.control.kind = parse_control_kind(c.at("kind").get<std::string>());
      m.control.amplitude = c.at("amplitude").get<double>();
      m.control.frequency = c.at("frequency").get<double>();
      m.control.hold_steps = c.at("hold_steps").get<std::size_t>();
    }
    for (const auto& b : j.at("storage").at("train")) m.train.push_back(blob_from_json(b));
    for (const auto& b : j.at("storage").at("eval")) m.eval.push_back(blob_from_json(b));
  } catch (const json::exception& e) {
    throw IoError("manifest '" + manifest_path.string() + "' is missing fields: " + e.what());
  }
  if (m.train.size() != m.n_train || m.eval.size() != m.n_eval) {
    throw IoError("manifest trajectory counts disagree with storage listing");
  }
  return m;
}

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir / "manifest.json");
  const auto& m = ds.manifest;
  auto load_one = [&](const BlobRef& b, std::size_t expected_len) {
    if (b.rows != expected_len + 1 || b.cols != static_cast<std::size_t>(m.system.state_dim)) {
      throw IoError("blob '" + b.states + "' declares shape inconsistent with manifest");
    }
    Trajectory t;
    t.dt = m.dt;
    t.states = read_f64_blob(dir / b.states, b.rows, b.cols);
    if (!b.controls.empty()) t.controls = read_f64_blob(dir / b.controls, b.rows - 1, b.control_cols);
    if (m.system.control_dim > 0 && t.controls.size() == 0) {
      throw IoError("forced-system trajectory '" + b.states + "' has no controls blob");
    }
    return t;
  };
  for (const auto& b : m.train) ds.train.push_back(load_one(b, m.train_len));
  for (const auto& b : m.eval) ds.eval.push_back(load_one(b, m.eval_len));
  return ds;
}

}  // namespace koopman_lab::dynsys
