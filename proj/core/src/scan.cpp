#include <bit>

#include "koopman_lab/errors.hpp"
#include "koopman_lab/parallel.hpp"
#include "koopman_lab/rollout.hpp"

namespace koopman_lab::rollout {

namespace {

// x -> A x + b
struct Affine {
  Matrix A;
  Vector b;
};

// Apply `first`, then `second`.
Affine then(const Affine& first, const Affine& second) {
  return {second.A * first.A, second.A * first.b + second.b};
}

void check_inputs(const koopman::DiscreteOperators& ops, const Vector& z0, const Matrix& v, std::size_t n_steps) {
  if (n_steps < 1) throw InvalidArgument("latent unroll: n_steps must be at least 1");
  if (z0.size() != ops.K.cols()) throw InvalidArgument("latent unroll: z0 dimension mismatch");
  if (ops.has_control()) {
    if (v.rows() < static_cast<Eigen::Index>(n_steps) || v.cols() != ops.L.cols()) {
      throw InvalidArgument("latent unroll: need one encoded control row per step");
    }
  } else if (v.size() != 0) {
    throw InvalidArgument("latent unroll: controls given but the operators have no L");
  }
}

Vector offset(const koopman::DiscreteOperators& ops, const Matrix& v, std::size_t t) {
  if (!ops.has_control()) return Vector::Zero(ops.K.rows());
  return ops.L * v.row(static_cast<Eigen::Index>(t)).transpose();
}

}  // namespace

Matrix latent_unroll_sequential(const koopman::DiscreteOperators& ops, const Vector& z0, const Matrix& v,
                                std::size_t n_steps) {
  check_inputs(ops, z0, v, n_steps);
  Matrix out(static_cast<Eigen::Index>(n_steps) + 1, z0.size());
  Vector z = z0;
  out.row(0) = z;
  for (std::size_t t = 0; t < n_steps; ++t) {
    z = ops.K * z + offset(ops, v, t);
    out.row(static_cast<Eigen::Index>(t) + 1) = z;
  }
  return out;
}

Matrix latent_unroll_scan(const koopman::DiscreteOperators& ops, const Vector& z0, const Matrix& v,
                          std::size_t n_steps) {
  check_inputs(ops, z0, v, n_steps);
  const auto n = z0.size();
  const Affine identity{Matrix::Identity(n, n), Vector::Zero(n)};
  const std::size_t m = std::bit_ceil(n_steps);
  std::vector<Affine> tree(m, identity);
  std::vector<Affine> step(n_steps);
  parallel_for(n_steps, [&](std::size_t t) {
    step[t] = {ops.K, offset(ops, v, t)};
    tree[t] = step[t];
  });

  // Blelloch up-sweep: the right node of each pair absorbs its left sibling.
  for (std::size_t d = 1; d < m; d *= 2) {
    parallel_for(m / (2 * d), [&](std::size_t j) {
      const std::size_t right = j * 2 * d + 2 * d - 1;
      tree[right] = then(tree[right - d], tree[right]);
    });
  }
  // Down-sweep to exclusive prefixes.
  tree[m - 1] = identity;
  for (std::size_t d = m / 2; d >= 1; d /= 2) {
    parallel_for(m / (2 * d), [&](std::size_t j) {
      const std::size_t right = j * 2 * d + 2 * d - 1;
      const std::size_t left = right - d;
      Affine left_sum = std::move(tree[left]);
      tree[left] = tree[right];
      tree[right] = then(tree[right], left_sum);
    });
  }

  Matrix out(static_cast<Eigen::Index>(n_steps) + 1, n);
  out.row(0) = z0;
  parallel_for(n_steps, [&](std::size_t t) {
    const Vector before = tree[t].A * z0 + tree[t].b;
    out.row(static_cast<Eigen::Index>(t) + 1) = step[t].A * before + step[t].b;
  });
  return out;
}

}  // namespace koopman_lab::rollout
