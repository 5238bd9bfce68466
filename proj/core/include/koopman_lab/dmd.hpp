#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "koopman_lab/grad.hpp"

namespace koopman_lab::dmd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Fixed feature map x -> (prod_j x_j^{e_j}) over a list of exponent vectors.
struct MonomialDictionary {
  std::vector<std::vector<int>> exponents;

  std::size_t size() const { return exponents.size(); }
  int input_dim() const { return exponents.empty() ? 0 : static_cast<int>(exponents.front().size()); }

  /// Identity coordinates followed by `extra` monomials.
  static MonomialDictionary identity_plus(int dim, std::vector<std::vector<int>> extra = {});

  void validate() const;
  /// Rows of x are samples.
  Matrix evaluate(const Matrix& x) const;
  Vector evaluate(const Vector& x) const;
  grad::Tensor evaluate(const grad::Tensor& x) const;
};

struct DmdModel {
  Matrix K;                  // maps x_t to x_{t+1} (column convention)
  double fit_residual = 0;   // Frobenius norm of the residual matrix over all pairs
  std::size_t rank = 0;      // numerical rank of the snapshot matrix
  std::size_t n_pairs = 0;
  MonomialDictionary dictionary;  // empty for plain DMD
  /// Rows of the lifted state that reproduce x (plain DMD: all of them).
  std::vector<std::size_t> state_rows;

  int state_dim() const { return static_cast<int>(state_rows.size()); }
  int lifted_dim() const { return static_cast<int>(K.rows()); }
  bool is_extended() const { return !dictionary.exponents.empty(); }
};

/// Snapshot pairs stacked as rows: current.row(i) -> next.row(i).
struct SnapshotPairs {
  Matrix current;
  Matrix next;
};

/// Collects (x_t, x_{t+1}) from every trajectory (rows are time samples).
SnapshotPairs pairs_from_trajectories(const std::vector<Matrix>& trajectories);

/// Least-squares K = argmin sum ||x_{t+1} - K x_t|| via a complete orthogonal
/// decomposition: minimum-Frobenius-norm solution when rank deficient.
DmdModel fit_dmd(const SnapshotPairs& pairs);

/// DMD on dictionary features. The dictionary must contain every state
/// coordinate as a pure degree-one monomial so states can be read back.
DmdModel fit_edmd(const SnapshotPairs& pairs, const MonomialDictionary& dictionary);

/// Repeated K products from x0; row t is the prediction at step t
/// (horizon+1 rows). Throws ExplosionError past a norm of 1e8.
Matrix rollout_dmd(const DmdModel& model, const Vector& x0, std::size_t horizon);

std::string dmd_to_json(const DmdModel& model);
DmdModel dmd_from_json(const std::string& text);

}  // namespace koopman_lab::dmd
