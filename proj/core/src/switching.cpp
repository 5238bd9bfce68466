#include <cmath>
#include <cstdio>

#include "koopman_lab/errors.hpp"
#include "koopman_lab/rollout.hpp"

namespace koopman_lab::rollout {

namespace {

bool support_within(const Vector& z, Eigen::Index begin) {
  return z[begin] == 0.0 && z[begin + 1] == 0.0;
}

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), f, a, b);
  return buf;
}

}  // namespace

SwitchingOracle::SwitchingOracle(double delta) {
  if (!(delta > 0.0)) throw InvalidArgument("SwitchingOracle: delta must be positive");
  Matrix k1(2, 2), k2(2, 2);
  k1 << 0.0, 1.0, 0.0, 0.0;
  k2 << 0.0, 1.0, 0.0, -0.5;
  k_ = Matrix::Zero(4, 4);
  k_.topLeftCorner(2, 2) = k1;
  k_.bottomRightCorner(2, 2) = k2;
  // Discretize block by block so the off-diagonal blocks are exact zeros.
  const auto d1 = koopman::discretize_bilinear(k1, Matrix(), delta);
  const auto d2 = koopman::discretize_bilinear(k2, Matrix(), delta);
  ops_.delta = delta;
  ops_.K = Matrix::Zero(4, 4);
  ops_.K.topLeftCorner(2, 2) = d1.K;
  ops_.K.bottomRightCorner(2, 2) = d2.K;
}

Vector SwitchingOracle::encode(const Vector& x) const {
  if (x.size() != 2) throw InvalidArgument("SwitchingOracle: state dimension mismatch");
  Vector z = Vector::Zero(4);
  z.segment(x[0] < 0.0 ? 0 : 2, 2) = x;
  return z;
}

Vector SwitchingOracle::decode(const Vector& z) const {
  if (z.size() != 4) throw InvalidArgument("SwitchingOracle: latent dimension mismatch");
  return z.head(2) + z.tail(2);
}

Vector SwitchingOracle::advance(const Vector& z, const Vector& u) const {
  return koopman::latent_step(ops_, z, u);
}

std::size_t SwitchingOracle::crossing_step(const Vector& x0) const {
  if (!(x0[0] < 0.0) || !(x0[1] > 0.0)) throw InvalidArgument("crossing_step: need x1 < 0 and x2 > 0");
  return static_cast<std::size_t>(std::ceil(-x0[0] / (ops_.delta * x0[1])));
}

SwitchingReport switching_oracle_check(std::size_t horizon) {
  const SwitchingOracle model;
  SwitchingReport rep;
  Vector start_r1(2), start_r2(2);
  start_r1 << -1.0, 1.0;
  start_r2 << 0.5, 1.0;
  rep.expected_crossing = model.crossing_step(start_r1);
  if (horizon <= rep.expected_crossing + 1) throw InvalidArgument("switching_oracle_check: horizon too short");

  RolloutPlan plan;
  plan.horizon = horizon;
  plan.reencode_period = 0;

  // (a) the latent never leaves the R1 support without reencoding, even after
  // the decoded state has crossed into x1 >= 0.
  const auto a = rollout_no_reencode(model, start_r1, plan);
  rep.max_leak = a.latents.rightCols(2).cwiseAbs().maxCoeff();
  rep.no_reencode_confined = rep.max_leak == 0.0;
  rep.lines.push_back(fmt("no reencode from R1: max |z3|,|z4| = %g, final x1 = %g", rep.max_leak,
                          a.states(static_cast<Eigen::Index>(horizon), 0)));

  const auto r2 = rollout_no_reencode(model, start_r2, plan);
  const double leak2 = r2.latents.leftCols(2).cwiseAbs().maxCoeff();
  rep.r2_confined = leak2 == 0.0;
  rep.lines.push_back(fmt("no reencode from R2: max |z1|,|z2| = %g", leak2));

  // (b) every-step reencoding: latents up to the crossing live on {1, 2}; the
  // reencoding at the crossing step moves them to {3, 4} for good.
  plan.reencode_period = 1;
  const auto b = rollout_periodic(model, start_r1, plan);
  bool before_ok = true;
  rep.observed_switch = 0;
  for (std::size_t i = 0; i <= horizon; ++i) {
    const Vector z = b.latents.row(static_cast<Eigen::Index>(i)).transpose();
    const bool on_r2 = support_within(z, 0);
    if (on_r2 && rep.observed_switch == 0) rep.observed_switch = i - 1;
    if (!on_r2 && rep.observed_switch != 0) before_ok = false;
    if (i <= rep.expected_crossing && !support_within(z, 2)) before_ok = false;
  }
  const double x_cross = b.states(static_cast<Eigen::Index>(rep.expected_crossing), 0);
  const double x_prev = b.states(static_cast<Eigen::Index>(rep.expected_crossing) - 1, 0);
  rep.reencode_switches = before_ok && rep.observed_switch == rep.expected_crossing && x_prev < 0.0 && x_cross >= 0.0;
  rep.lines.push_back(fmt("every-step reencode from R1: expected crossing step %g, support switch at %g",
                          static_cast<double>(rep.expected_crossing), static_cast<double>(rep.observed_switch)));
  return rep;
}

}  // namespace koopman_lab::rollout
