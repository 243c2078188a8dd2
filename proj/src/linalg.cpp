// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/linalg.hpp"

#include <algorithm>
#include <vector>

#include <lapacke.h>

namespace dgr {

namespace {

lapack_int run_gesdd(Eigen::MatrixXd& work, bool vectors, Svd& out) {
  const lapack_int m = static_cast<lapack_int>(work.rows());
  const lapack_int n = static_cast<lapack_int>(work.cols());
  const lapack_int p = std::min(m, n);
  out.s.resize(p);
  if (!vectors) {
    return LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'N', m, n, work.data(), m, out.s.data(), nullptr, 1,
                          nullptr, 1);
  }
  out.U.resize(m, p);
  Eigen::MatrixXd vt(p, n);
  const lapack_int info = LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'S', m, n, work.data(), m,
                                         out.s.data(), out.U.data(), m, vt.data(), p);
  if (info == 0) out.V = vt.transpose();
  return info;
}

lapack_int run_gesvd(Eigen::MatrixXd& work, bool vectors, Svd& out) {
  const lapack_int m = static_cast<lapack_int>(work.rows());
  const lapack_int n = static_cast<lapack_int>(work.cols());
  const lapack_int p = std::min(m, n);
  out.s.resize(p);
  std::vector<double> superb(static_cast<std::size_t>(std::max<lapack_int>(p - 1, 1)));
  if (!vectors) {
    return LAPACKE_dgesvd(LAPACK_COL_MAJOR, 'N', 'N', m, n, work.data(), m, out.s.data(), nullptr,
                          1, nullptr, 1, superb.data());
  }
  out.U.resize(m, p);
  Eigen::MatrixXd vt(p, n);
  const lapack_int info = LAPACKE_dgesvd(LAPACK_COL_MAJOR, 'S', 'S', m, n, work.data(), m,
                                         out.s.data(), out.U.data(), m, vt.data(), p,
                                         superb.data());
  if (info == 0) out.V = vt.transpose();
  return info;
}

}  // namespace

Svd svd(const Eigen::MatrixXd& a, bool vectors) {
  if (a.size() == 0) throw SvdError("SVD of an empty matrix");
  if (!a.allFinite()) throw SvdError("SVD input contains non-finite values");
  Svd out;
  Eigen::MatrixXd work = a;
  lapack_int info = run_gesdd(work, vectors, out);
  if (info > 0) {
    work = a;
    out = Svd{};
    info = run_gesvd(work, vectors, out);
  }
  if (info != 0) throw SvdError("SVD did not converge (info=" + std::to_string(info) + ")");
  // LAPACK returns descending values; clamp tiny negative zeros.
  out.s = out.s.cwiseMax(0.0);
  return out;
}

Eigen::VectorXd singular_values(const Eigen::MatrixXd& a) { return svd(a, false).s; }

}  // namespace dgr
