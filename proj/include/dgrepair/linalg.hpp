// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dgr {

class SvdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thin SVD a = U diag(s) V^T with s descending; U is m x p, V is n x p,
/// p = min(m, n). U and V are empty when vectors were not requested.
struct Svd {
  Eigen::VectorXd s;
  Eigen::MatrixXd U;
  Eigen::MatrixXd V;
};

/// LAPACK divide-and-conquer SVD, falling back to QR iteration if it does
/// not converge. Throws SvdError if both fail or the input is not finite.
Svd svd(const Eigen::MatrixXd& a, bool vectors = true);

Eigen::VectorXd singular_values(const Eigen::MatrixXd& a);

}  // namespace dgr
