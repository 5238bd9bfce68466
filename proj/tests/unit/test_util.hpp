#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "koopman_lab/dataset.hpp"
#include "koopman_lab/dynsys.hpp"

namespace koopman_lab::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "koopman_lab_";
    if (info != nullptr) name += std::string(info->test_suite_name()) + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Random matrix shifted so every eigenvalue has real part <= -margin.
inline Eigen::MatrixXd random_stable(std::mt19937_64& rng, Eigen::Index n, double margin = 0.1) {
  Eigen::MatrixXd a = random_matrix(rng, n, n);
  const double shift = a.eigenvalues().real().maxCoeff() + margin;
  return a - shift * Eigen::MatrixXd::Identity(n, n);
}

/// Parabolic (mu = -0.1, lambda = -1) trajectories sampled from the closed-form flow.
inline std::vector<dynsys::Trajectory> parabolic_set(std::size_t n, std::size_t len, double dt, std::uint64_t seed) {
  const auto sys = dynsys::make_system("parabolic");
  std::vector<dynsys::Trajectory> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd x0 = dynsys::sample_initial_condition(sys, seed, dynsys::Split::Train, i);
    dynsys::Trajectory t;
    t.dt = dt;
    t.states.resize(static_cast<Eigen::Index>(len + 1), 2);
    for (std::size_t s = 0; s <= len; ++s) {
      t.states.row(static_cast<Eigen::Index>(s)) =
          dynsys::parabolic_closed_form(x0, dt * static_cast<double>(s), -0.1, -1.0).transpose();
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace koopman_lab::testing
