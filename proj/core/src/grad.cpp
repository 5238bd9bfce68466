#include "koopman_lab/grad.hpp"

#include <cmath>
#include <utility>

#include "koopman_lab/errors.hpp"

namespace koopman_lab::grad {

namespace {

Tape& same_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.valid() || !b.valid()) throw InvalidArgument(std::string(op) + ": invalid tensor handle");
  if (a.tape() != b.tape()) throw InvalidArgument(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

Tape& tape_of(const Tensor& a, const char* op) {
  if (!a.valid()) throw InvalidArgument(std::string(op) + ": invalid tensor handle");
  return *a.tape();
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw InvalidArgument(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                        shape_string(b.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a, b);
}

}  // namespace

std::string shape_string(const Shape& s) {
  return "[" + std::to_string(s[0]) + ", " + std::to_string(s[1]) + "]";
}

Shape Tensor::shape() const {
  const auto& v = tape_->value(id_);
  return {v.rows(), v.cols()};
}
const Matrix& Tensor::value() const { return tape_->value(id_); }
const Matrix& Tensor::grad() const { return tape_->grad(id_); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor Tape::record(Matrix value, std::vector<std::size_t> parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (auto p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Matrix* Tape::grad_slot(std::size_t id) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  n.reached = true;
  return &n.grad;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.valid() || loss.tape() != this) throw InvalidArgument("backward: loss is not on this tape");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw InvalidArgument("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  if (nodes_.empty()) throw InvalidArgument("backward: tape is empty");
  for (auto& n : nodes_) {
    n.reached = false;
    if (n.requires_grad) {
      n.grad.setZero(n.value.rows(), n.value.cols());
    } else {
      n.grad.resize(0, 0);
    }
  }
  auto& root = nodes_[loss.id()];
  if (!root.requires_grad) return;
  root.grad(0, 0) = 1.0;
  root.reached = true;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || !n.reached) continue;
    if (n.backward) {
      n.backward(*this, n.grad, n.value);
    }
    if (n.param) {
      if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) {
        n.param->grad.setZero(n.value.rows(), n.value.cols());
      }
      n.param->grad += n.grad;
    }
  }
}

void Tape::clear() { nodes_.clear(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  Matrix out;
  out.noalias() = a.value() * b.value();
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) ga->noalias() += g * tp.value(ib).transpose();
    if (Matrix* gb = tp.grad_slot(ib)) gb->noalias() += tp.value(ia).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  Tape& t = tape_of(a, "transpose");
  const auto ia = a.id();
  return t.record(a.value().transpose(), {ia}, [ia](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += g.transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape("add", a, b);
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += g;
    if (Matrix* gb = tp.grad_slot(ib)) *gb += g;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape("sub", a, b);
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += g;
    if (Matrix* gb = tp.grad_slot(ib)) *gb -= g;
  });
}

Tensor scale(const Tensor& a, double factor) {
  Tape& t = tape_of(a, "scale");
  const auto ia = a.id();
  return t.record(a.value() * factor, {ia}, [ia, factor](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += factor * g;
  });
}

Tensor mul_scalar(const Tensor& s, const Tensor& a) {
  Tape& t = same_tape(s, a, "mul_scalar");
  if (s.rows() != 1 || s.cols() != 1) shape_error("mul_scalar", s, a);
  const auto is = s.id(), ia = a.id();
  return t.record(s.value()(0, 0) * a.value(), {is, ia}, [is, ia](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* gs = tp.grad_slot(is)) (*gs)(0, 0) += (g.array() * tp.value(ia).array()).sum();
    if (Matrix* ga = tp.grad_slot(ia)) *ga += tp.value(is)(0, 0) * g;
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "hadamard");
  require_same_shape("hadamard", a, b);
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += g.cwiseProduct(tp.value(ib));
    if (Matrix* gb = tp.grad_slot(ib)) *gb += g.cwiseProduct(tp.value(ia));
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  Tape& t = same_tape(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error("add_row", a, row);
  const auto ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {ia, ir}, [ia, ir](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += g;
    if (Matrix* gr = tp.grad_slot(ir)) *gr += g.colwise().sum();
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tape& t = same_tape(x, weight, "linear");
  if (x.cols() != weight.cols()) shape_error("linear", x, weight);
  const bool has_bias = bias.valid();
  if (has_bias) {
    if (bias.tape() != &t) throw InvalidArgument("linear: operands on different tapes");
    if (bias.rows() != weight.rows() || bias.cols() != 1) shape_error("linear", weight, bias);
  }
  Matrix out;
  out.noalias() = x.value() * weight.value().transpose();
  if (has_bias) out.rowwise() += bias.value().col(0).transpose();
  const auto ix = x.id(), iw = weight.id();
  const auto ib = has_bias ? bias.id() : std::size_t{0};
  std::vector<std::size_t> parents{ix, iw};
  if (has_bias) parents.push_back(ib);
  return t.record(std::move(out), std::move(parents),
                  [ix, iw, ib, has_bias](Tape& tp, const Matrix& g, const Matrix&) {
                    if (Matrix* gx = tp.grad_slot(ix)) gx->noalias() += g * tp.value(iw);
                    if (Matrix* gw = tp.grad_slot(iw)) gw->noalias() += g.transpose() * tp.value(ix);
                    if (has_bias) {
                      if (Matrix* gb = tp.grad_slot(ib)) *gb += g.colwise().sum().transpose();
                    }
                  });
}

Tensor relu(const Tensor& a) {
  Tape& t = tape_of(a, "relu");
  const auto ia = a.id();
  return t.record(a.value().cwiseMax(0.0), {ia}, [ia](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += (tp.value(ia).array() > 0.0).select(g, 0.0).matrix();
  });
}

Tensor exp(const Tensor& a) {
  Tape& t = tape_of(a, "exp");
  const auto ia = a.id();
  return t.record(a.value().array().exp().matrix(), {ia}, [ia](Tape& tp, const Matrix& g, const Matrix& out) {
    if (Matrix* ga = tp.grad_slot(ia)) *ga += g.cwiseProduct(out);
  });
}

Tensor sum(const Tensor& a) {
  Tape& t = tape_of(a, "sum");
  const auto ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) ga->array() += g(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  Tape& t = tape_of(a, "mean");
  if (a.value().size() == 0) throw InvalidArgument("mean: empty tensor");
  const auto ia = a.id();
  const double n = static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return t.record(std::move(out), {ia}, [ia, n](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) ga->array() += g(0, 0) / n;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "mse");
  require_same_shape("mse", a, b);
  if (a.value().size() == 0) throw InvalidArgument("mse: empty tensors");
  const auto ia = a.id(), ib = b.id();
  const double n = static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = (a.value() - b.value()).squaredNorm() / n;
  return t.record(std::move(out), {ia, ib}, [ia, ib, n](Tape& tp, const Matrix& g, const Matrix&) {
    const Matrix d = (2.0 * g(0, 0) / n) * (tp.value(ia) - tp.value(ib));
    if (Matrix* ga = tp.grad_slot(ia)) *ga += d;
    if (Matrix* gb = tp.grad_slot(ib)) *gb -= d;
  });
}

Tensor l1_norm(const Tensor& a) {
  Tape& t = tape_of(a, "l1_norm");
  const auto ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseAbs().sum();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) {
      const auto& v = tp.value(ia).array();
      *ga += (g(0, 0) * ((v > 0.0).cast<double>() - (v < 0.0).cast<double>())).matrix();
    }
  });
}

Tensor row_norms(const Tensor& a) {
  Tape& t = tape_of(a, "row_norms");
  const auto ia = a.id();
  Matrix out = a.value().rowwise().norm();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g, const Matrix& norms) {
    if (Matrix* ga = tp.grad_slot(ia)) {
      const Matrix& v = tp.value(ia);
      for (Index r = 0; r < v.rows(); ++r) {
        const double n = norms(r, 0);
        if (n > 0.0) ga->row(r) += (g(r, 0) / n) * v.row(r);
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw InvalidArgument("concat: no operands");
  if (axis != 0 && axis != 1) throw InvalidArgument("concat: axis must be 0 or 1");
  Tape& t = tape_of(parts.front(), "concat");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw InvalidArgument("concat: operands on different tapes");
    if (axis == 0 && p.cols() != parts.front().cols()) shape_error("concat", parts.front(), p);
    if (axis == 1 && p.rows() != parts.front().rows()) shape_error("concat", parts.front(), p);
    total += axis == 0 ? p.rows() : p.cols();
  }
  Matrix out = axis == 0 ? Matrix(total, parts.front().cols()) : Matrix(parts.front().rows(), total);
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.middleRows(off, p.rows()) = p.value();
    } else {
      out.middleCols(off, p.cols()) = p.value();
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += axis == 0 ? p.rows() : p.cols();
  }
  auto parents = ids;
  return t.record(std::move(out), std::move(parents),
                  [ids, offsets, axis](Tape& tp, const Matrix& g, const Matrix&) {
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (Matrix* gp = tp.grad_slot(ids[k])) {
                        if (axis == 0) {
                          *gp += g.middleRows(offsets[k], gp->rows());
                        } else {
                          *gp += g.middleCols(offsets[k], gp->cols());
                        }
                      }
                    }
                  });
}

Tensor slice_rows(const Tensor& a, Index begin, Index count) {
  Tape& t = tape_of(a, "slice_rows");
  if (begin < 0 || count <= 0 || begin + count > a.rows()) {
    throw InvalidArgument("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                          ") outside shape " + shape_string(a.shape()));
  }
  const auto ia = a.id();
  return t.record(a.value().middleRows(begin, count), {ia}, [ia, begin, count](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) ga->middleRows(begin, count) += g;
  });
}

Tensor slice_cols(const Tensor& a, Index begin, Index count) {
  Tape& t = tape_of(a, "slice_cols");
  if (begin < 0 || count <= 0 || begin + count > a.cols()) {
    throw InvalidArgument("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                          ") outside shape " + shape_string(a.shape()));
  }
  const auto ia = a.id();
  return t.record(a.value().middleCols(begin, count), {ia}, [ia, begin, count](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* ga = tp.grad_slot(ia)) ga->middleCols(begin, count) += g;
  });
}

Tensor diag(const Tensor& column) {
  Tape& t = tape_of(column, "diag");
  if (column.cols() != 1) throw InvalidArgument("diag: expected a column vector, got " + shape_string(column.shape()));
  const auto ic = column.id();
  Matrix out = column.value().col(0).asDiagonal();
  return t.record(std::move(out), {ic}, [ic](Tape& tp, const Matrix& g, const Matrix&) {
    if (Matrix* gc = tp.grad_slot(ic)) gc->col(0) += g.diagonal();
  });
}

Tensor solve(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "solve");
  if (a.rows() != a.cols() || a.rows() != b.rows()) shape_error("solve", a, b);
  Eigen::PartialPivLU<Matrix> lu(a.value());
  const double rcond = lu.rcond();
  if (!(rcond > 1e-14)) {
    throw InvalidArgument("solve: matrix is singular to working precision (rcond " + std::to_string(rcond) + ")");
  }
  Matrix out = lu.solve(b.value());
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib, lu](Tape& tp, const Matrix& g, const Matrix& x) {
    // X = A^{-1} B:  gB = A^{-T} G,  gA = -gB X^T.
    const Matrix gb = lu.transpose().solve(g);
    if (Matrix* ga = tp.grad_slot(ia)) ga->noalias() -= gb * x.transpose();
    if (Matrix* gbs = tp.grad_slot(ib)) *gbs += gb;
  });
}

}  // namespace koopman_lab::grad
