#include "koopman_lab/dmd.hpp"

#include <cmath>

#include <json.hpp>

#include "koopman_lab/errors.hpp"

namespace koopman_lab::dmd {

using nlohmann::json;

namespace {

constexpr double kExplosionThreshold = 1e8;

double ipow(double x, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= x;
  return r;
}

std::vector<std::size_t> find_state_rows(const MonomialDictionary& dict) {
  const int d = dict.input_dim();
  std::vector<std::size_t> rows(static_cast<std::size_t>(d), dict.size());
  for (std::size_t k = 0; k < dict.size(); ++k) {
    const auto& e = dict.exponents[k];
    int degree = 0, which = -1;
    for (int j = 0; j < d; ++j) {
      degree += e[static_cast<std::size_t>(j)];
      if (e[static_cast<std::size_t>(j)] == 1) which = j;
    }
    if (degree == 1 && which >= 0 && rows[static_cast<std::size_t>(which)] == dict.size()) {
      rows[static_cast<std::size_t>(which)] = k;
    }
  }
  for (int j = 0; j < d; ++j) {
    if (rows[static_cast<std::size_t>(j)] == dict.size()) {
      throw InvalidArgument("dictionary lacks the linear monomial for state coordinate " + std::to_string(j));
    }
  }
  return rows;
}

DmdModel solve_least_squares(const Matrix& current, const Matrix& next) {
  if (current.rows() == 0) throw InvalidArgument("fit_dmd: empty dataset");
  if (current.rows() != next.rows() || current.cols() != next.cols()) {
    throw InvalidArgument("fit_dmd: current/next snapshot shapes differ");
  }
  // current * K^T ~= next
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(current);
  DmdModel m;
  m.K = cod.solve(next).transpose();
  m.rank = static_cast<std::size_t>(cod.rank());
  m.n_pairs = static_cast<std::size_t>(current.rows());
  m.fit_residual = (next - current * m.K.transpose()).norm();
  return m;
}

}  // namespace

MonomialDictionary MonomialDictionary::identity_plus(int dim, std::vector<std::vector<int>> extra) {
  MonomialDictionary d;
  for (int j = 0; j < dim; ++j) {
    std::vector<int> e(static_cast<std::size_t>(dim), 0);
    e[static_cast<std::size_t>(j)] = 1;
    d.exponents.push_back(std::move(e));
  }
  for (auto& e : extra) d.exponents.push_back(std::move(e));
  d.validate();
  return d;
}

void MonomialDictionary::validate() const {
  if (exponents.empty()) throw InvalidArgument("monomial dictionary is empty");
  const auto d = exponents.front().size();
  if (d == 0) throw InvalidArgument("monomial dictionary has zero input dimension");
  for (const auto& e : exponents) {
    if (e.size() != d) throw InvalidArgument("monomial dictionary exponent vectors differ in length");
    for (int p : e) {
      if (p < 0) throw InvalidArgument("monomial exponents must be non-negative");
    }
  }
}

Matrix MonomialDictionary::evaluate(const Matrix& x) const {
  if (x.cols() != input_dim()) throw InvalidArgument("dictionary input dimension mismatch");
  Matrix out(x.rows(), static_cast<Eigen::Index>(size()));
  for (std::size_t k = 0; k < size(); ++k) {
    const auto& e = exponents[k];
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      double v = 1.0;
      for (Eigen::Index j = 0; j < x.cols(); ++j) v *= ipow(x(r, j), e[static_cast<std::size_t>(j)]);
      out(r, static_cast<Eigen::Index>(k)) = v;
    }
  }
  return out;
}

Vector MonomialDictionary::evaluate(const Vector& x) const {
  return evaluate(Matrix(x.transpose())).row(0).transpose();
}

grad::Tensor MonomialDictionary::evaluate(const grad::Tensor& x) const {
  if (x.cols() != input_dim()) throw InvalidArgument("dictionary input dimension mismatch");
  grad::Tape& tape = *x.tape();
  std::vector<grad::Tensor> coords;
  for (Eigen::Index j = 0; j < x.cols(); ++j) coords.push_back(grad::slice_cols(x, j, 1));
  std::vector<grad::Tensor> features;
  for (const auto& e : exponents) {
    grad::Tensor f;
    for (std::size_t j = 0; j < e.size(); ++j) {
      for (int p = 0; p < e[j]; ++p) f = f.valid() ? grad::hadamard(f, coords[j]) : coords[j];
    }
    if (!f.valid()) f = tape.constant(Matrix::Ones(x.rows(), 1));
    features.push_back(f);
  }
  return grad::concat(features, 1);
}

SnapshotPairs pairs_from_trajectories(const std::vector<Matrix>& trajectories) {
  Eigen::Index total = 0, dim = -1;
  for (const auto& t : trajectories) {
    if (t.rows() < 2) continue;
    if (dim >= 0 && t.cols() != dim) throw InvalidArgument("trajectories have different state dimensions");
    dim = t.cols();
    total += t.rows() - 1;
  }
  if (total == 0) throw InvalidArgument("fit_dmd: empty dataset");
  SnapshotPairs p{Matrix(total, dim), Matrix(total, dim)};
  Eigen::Index row = 0;
  for (const auto& t : trajectories) {
    if (t.rows() < 2) continue;
    p.current.middleRows(row, t.rows() - 1) = t.topRows(t.rows() - 1);
    p.next.middleRows(row, t.rows() - 1) = t.bottomRows(t.rows() - 1);
    row += t.rows() - 1;
  }
  return p;
}

DmdModel fit_dmd(const SnapshotPairs& pairs) {
  DmdModel m = solve_least_squares(pairs.current, pairs.next);
  for (Eigen::Index j = 0; j < m.K.rows(); ++j) m.state_rows.push_back(static_cast<std::size_t>(j));
  if (!m.K.allFinite()) throw InvalidArgument("fit_dmd: non-finite solution");
  return m;
}

DmdModel fit_edmd(const SnapshotPairs& pairs, const MonomialDictionary& dictionary) {
  dictionary.validate();
  if (pairs.current.rows() == 0) throw InvalidArgument("fit_edmd: empty dataset");
  auto rows = find_state_rows(dictionary);
  DmdModel m = solve_least_squares(dictionary.evaluate(pairs.current), dictionary.evaluate(pairs.next));
  m.dictionary = dictionary;
  m.state_rows = std::move(rows);
  return m;
}

Matrix rollout_dmd(const DmdModel& model, const Vector& x0, std::size_t horizon) {
  if (horizon < 1) throw InvalidArgument("rollout_dmd: horizon must be at least 1");
  if (x0.size() != model.state_dim()) throw InvalidArgument("rollout_dmd: x0 dimension mismatch");
  Vector z = model.is_extended() ? model.dictionary.evaluate(x0) : x0;
  Matrix out(static_cast<Eigen::Index>(horizon) + 1, x0.size());
  auto emit = [&](std::size_t t) {
    for (std::size_t j = 0; j < model.state_rows.size(); ++j) {
      out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = z[static_cast<Eigen::Index>(model.state_rows[j])];
    }
  };
  emit(0);
  for (std::size_t t = 1; t <= horizon; ++t) {
    z = model.K * z;
    const double norm = z.norm();
    if (!std::isfinite(norm) || norm > kExplosionThreshold) {
      throw ExplosionError("rollout_dmd: state norm exceeded threshold at step " + std::to_string(t), t);
    }
    emit(t);
  }
  return out;
}

std::string dmd_to_json(const DmdModel& m) {
  json k = json::array();
  for (Eigen::Index r = 0; r < m.K.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.K.cols(); ++c) row.push_back(m.K(r, c));
    k.push_back(row);
  }
  json j = {{"format", "koopman_lab.dmd"}, {"version", 1},        {"K", k},
            {"fit_residual", m.fit_residual}, {"rank", m.rank}, {"n_pairs", m.n_pairs},
            {"state_rows", m.state_rows}};
  if (m.is_extended()) j["dictionary"] = m.dictionary.exponents;
  return j.dump(2);
}

DmdModel dmd_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed DMD model: ") + e.what());
  }
  if (j.value("format", "") != "koopman_lab.dmd") throw IoError("not a koopman_lab DMD model");
  DmdModel m;
  const auto& k = j.at("K");
  const auto n = static_cast<Eigen::Index>(k.size());
  m.K.resize(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (static_cast<Eigen::Index>(k[static_cast<std::size_t>(r)].size()) != n) throw IoError("DMD matrix is not square");
    for (Eigen::Index c = 0; c < n; ++c) {
      m.K(r, c) = k[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
    }
  }
  m.fit_residual = j.at("fit_residual").get<double>();
  m.rank = j.at("rank").get<std::size_t>();
  m.n_pairs = j.at("n_pairs").get<std::size_t>();
  m.state_rows = j.at("state_rows").get<std::vector<std::size_t>>();
  if (j.contains("dictionary")) m.dictionary.exponents = j.at("dictionary").get<std::vector<std::vector<int>>>();
  return m;
}

}  // namespace koopman_lab::dmd
