#pragma once

#include <Eigen/Dense>

#include "koopman_lab/grad.hpp"

namespace koopman_lab::koopman {

using Matrix = Eigen::MatrixXd;

/// Matrix exponential by scaling and squaring with diagonal Pade
/// approximants of degree 3, 5, 7, 9 or 13, chosen from the 1-norm with the
/// standard backward-error thresholds.
Matrix expm(const Matrix& a);

/// The same algorithm recorded on a tape. The degree and scaling exponent
/// are picked from the forward value and treated as constants.
grad::Tensor expm(const grad::Tensor& a);

}  // namespace koopman_lab::koopman
