#include "koopman_lab/expm.hpp"

#include <array>
#include <cmath>
#include <span>

#include "koopman_lab/errors.hpp"

namespace koopman_lab::koopman {

namespace {

constexpr std::array<double, 4> kPade3 = {120.0, 60.0, 12.0, 1.0};
constexpr std::array<double, 6> kPade5 = {30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0};
constexpr std::array<double, 8> kPade7 = {17297280.0, 8648640.0, 1995840.0, 277200.0,
                                          25200.0,    1512.0,    56.0,      1.0};
constexpr std::array<double, 10> kPade9 = {17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
                                           2162160.0,     110880.0,     3960.0,       90.0,        1.0};
constexpr std::array<double, 14> kPade13 = {64764752532480000.0,
                                            32382376266240000.0,
                                            7771770303897600.0,
                                            1187353796428800.0,
                                            129060195264000.0,
                                            10559470521600.0,
                                            670442572800.0,
                                            33522128640.0,
                                            1323241920.0,
                                            40840800.0,
                                            960960.0,
                                            16380.0,
                                            182.0,
                                            1.0};

constexpr double kTheta3 = 1.495585217958292e-2;
constexpr double kTheta5 = 2.539398330063230e-1;
constexpr double kTheta7 = 9.504178996162932e-1;
constexpr double kTheta9 = 2.097847961257068e0;
constexpr double kTheta13 = 5.371920351148152e0;

struct Plan {
  int degree = 13;
  int squarings = 0;
};

Plan choose_plan(double norm1) {
  if (norm1 <= kTheta3) return {3, 0};
  if (norm1 <= kTheta5) return {5, 0};
  if (norm1 <= kTheta7) return {7, 0};
  if (norm1 <= kTheta9) return {9, 0};
  const int s = std::max(0, static_cast<int>(std::ceil(std::log2(norm1 / kTheta13))));
  return {13, s};
}

double one_norm(const Matrix& a) { return a.cwiseAbs().colwise().sum().maxCoeff(); }

// Low-degree approximants: U = A * sum_{odd k} b_k A^{k-1}, V = sum_{even k} b_k A^k.
void pade_low(const Matrix& a, std::span<const double> b, Matrix& u, Matrix& v) {
  const auto n = a.rows();
  const Matrix ident = Matrix::Identity(n, n);
  const Matrix a2 = a * a;
  Matrix power = ident;
  Matrix odd = b[1] * ident;
  v = b[0] * ident;
  for (std::size_t k = 2; k < b.size(); k += 2) {
    power = power * a2;
    v += b[k] * power;
    if (k + 1 < b.size()) odd += b[k + 1] * power;
  }
  u.noalias() = a * odd;
}

void pade13(const Matrix& a, Matrix& u, Matrix& v) {
  const auto& b = kPade13;
  const auto n = a.rows();
  const Matrix ident = Matrix::Identity(n, n);
  const Matrix a2 = a * a;
  const Matrix a4 = a2 * a2;
  const Matrix a6 = a4 * a2;
  const Matrix u_inner = a6 * (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident;
  u.noalias() = a * u_inner;
  v = a6 * (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident;
}

}  // namespace

Matrix expm(const Matrix& a) {
  if (a.rows() != a.cols()) throw InvalidArgument("expm: matrix must be square");
  if (a.size() == 0) return a;
  if (!a.allFinite()) throw InvalidArgument("expm: non-finite input");
  const Plan plan = choose_plan(one_norm(a));
  const Matrix scaled = plan.squarings > 0 ? Matrix(a * std::ldexp(1.0, -plan.squarings)) : a;
  Matrix u, v;
  switch (plan.degree) {
    case 3: pade_low(scaled, kPade3, u, v); break;
    case 5: pade_low(scaled, kPade5, u, v); break;
    case 7: pade_low(scaled, kPade7, u, v); break;
    case 9: pade_low(scaled, kPade9, u, v); break;
    default: pade13(scaled, u, v); break;
  }
  Matrix r = (v - u).partialPivLu().solve(v + u);
  for (int i = 0; i < plan.squarings; ++i) r = r * r;
  return r;
}

grad::Tensor expm(const grad::Tensor& a) {
  using namespace grad;
  if (a.rows() != a.cols()) throw InvalidArgument("expm: matrix must be square");
  Tape& tape = *a.tape();
  const Plan plan = choose_plan(one_norm(a.value()));
  const Tensor scaled = plan.squarings > 0 ? grad::scale(a, std::ldexp(1.0, -plan.squarings)) : a;
  const auto n = a.rows();
  const Tensor ident = tape.constant(Matrix::Identity(n, n));

  Tensor u, v;
  auto axpy = [](const Tensor& acc, double c, const Tensor& m) { return add(acc, grad::scale(m, c)); };
  if (plan.degree == 13) {
    const auto& b = kPade13;
    const Tensor a2 = matmul(scaled, scaled);
    const Tensor a4 = matmul(a2, a2);
    const Tensor a6 = matmul(a4, a2);
    Tensor inner_u = axpy(axpy(grad::scale(a6, b[13]), b[11], a4), b[9], a2);
    inner_u = add(matmul(a6, inner_u), axpy(axpy(axpy(grad::scale(a6, b[7]), b[5], a4), b[3], a2), b[1], ident));
    u = matmul(scaled, inner_u);
    Tensor inner_v = axpy(axpy(grad::scale(a6, b[12]), b[10], a4), b[8], a2);
    v = add(matmul(a6, inner_v), axpy(axpy(axpy(grad::scale(a6, b[6]), b[4], a4), b[2], a2), b[0], ident));
  } else {
    std::span<const double> b;
    switch (plan.degree) {
      case 3: b = kPade3; break;
      case 5: b = kPade5; break;
      case 7: b = kPade7; break;
      default: b = kPade9; break;
    }
    const Tensor a2 = matmul(scaled, scaled);
    Tensor power = ident;
    Tensor odd = grad::scale(ident, b[1]);
    v = grad::scale(ident, b[0]);
    for (std::size_t k = 2; k < b.size(); k += 2) {
      power = k == 2 ? a2 : matmul(power, a2);
      v = axpy(v, b[k], power);
      if (k + 1 < b.size()) odd = axpy(odd, b[k + 1], power);
    }
    u = matmul(scaled, odd);
  }
  Tensor r = solve(sub(v, u), add(v, u));
  for (int i = 0; i < plan.squarings; ++i) r = matmul(r, r);
  return r;
}

}  // namespace koopman_lab::koopman
