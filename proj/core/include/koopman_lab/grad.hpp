#pragma once

// Dense reverse-mode automatic differentiation over double matrices.
//
// Every value is a rank-2 matrix (vectors are n x 1 or 1 x n, scalars 1 x 1).
// Operations append nodes to a Tape in evaluation order, so walking the tape
// backwards visits nodes in reverse topological order exactly once.

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace koopman_lab::grad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using Shape = std::array<Index, 2>;

class Tape;

/// A trainable leaf that outlives any single tape.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;                 // accumulated by Tape::backward
  std::string group = "main";  // optimizer group (learning rate)
  bool decay = true;           // receives decoupled weight decay
};

/// Handle to a node recorded on a Tape. Cheap to copy; valid until the tape
/// is cleared or destroyed.
class Tensor {
 public:
  Tensor() = default;

  Shape shape() const;
  Index rows() const { return shape()[0]; }
  Index cols() const { return shape()[1]; }
  const Matrix& value() const;
  /// Gradient of the most recent backward() target. Zero-sized when the
  /// node does not require grad.
  const Matrix& grad() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Adjoint rule: receives the node's upstream gradient and its own forward
  /// value, and adds contributions to parents through grad_slot().
  using Backward = std::function<void(Tape&, const Matrix& upstream, const Matrix& output)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix value);
  Tensor variable(Matrix value);
  /// Leaf bound to p: backward() adds its gradient into p.grad (callers zero
  /// p.grad between optimizer steps).
  Tensor parameter(Parameter& p);

  /// Populates gradients of every node reachable from `loss`, which must be
  /// 1 x 1. The tape stays intact: node grads can be read afterwards and a
  /// second backward() recomputes them from scratch (bound Parameters then
  /// accumulate twice). Call clear() to reuse the tape for a new graph.
  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }

  // Used by primitive implementations.
  Tensor record(Matrix value, std::vector<std::size_t> parents, Backward backward);
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient slot for node `id`, or nullptr if it does not require grad.
  Matrix* grad_slot(std::size_t id);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool reached = false;  // received an adjoint during the current backward()
    Parameter* param = nullptr;
    std::vector<std::size_t> parents;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

std::string shape_string(const Shape& s);

// Forward primitives. All operands must live on the same tape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// s (1 x 1) times a.
Tensor mul_scalar(const Tensor& s, const Tensor& a);
Tensor hadamard(const Tensor& a, const Tensor& b);
/// a + 1 * row, broadcasting a 1 x c row over every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);
/// x * W^T + 1 * b^T with W (out x in) and b (out x 1); b may be invalid.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean of squared differences over all entries.
Tensor mse(const Tensor& a, const Tensor& b);
/// Sum of absolute values; subgradient 0 at 0.
Tensor l1_norm(const Tensor& a);
/// Euclidean norm of each row (r x 1); subgradient 0 for zero rows.
Tensor row_norms(const Tensor& a);
/// Concatenate along rows (axis 0) or columns (axis 1).
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_rows(const Tensor& a, Index begin, Index count);
Tensor slice_cols(const Tensor& a, Index begin, Index count);
/// Square matrix from a column vector on its diagonal.
Tensor diag(const Tensor& column);
/// A^{-1} B via partial-pivot LU. Throws InvalidArgument when A is singular.
Tensor solve(const Tensor& a, const Tensor& b);

}  // namespace koopman_lab::grad
