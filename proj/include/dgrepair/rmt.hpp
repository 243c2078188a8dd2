// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace dgr {

/// Constants of the Marchenko-Pastur law at aspect ratio beta.
struct AspectConstants {
  double beta = 1.0;
  double omega = 0.0;
  double mu_beta = 0.0;
  double lambda_minus = 0.0;
  double lambda_plus = 0.0;
};

struct NoiseEstimate {
  double sigma_hat = 0.0;
  double median_s = 0.0;
  std::int64_t m = 0;
  std::int64_t n = 0;
};

inline constexpr std::size_t kDefaultGridPoints = std::size_t{1} << 20;

/// min(m, n) / max(m, n); exactly 1 for square shapes.
double aspect_ratio(std::int64_t m, std::int64_t n);

/// Optimal hard-threshold coefficient for known noise level.
double omega(double beta);

/// Bulk edge sigma * sqrt(max_dim) * (1 + sqrt(beta)) in singular-value units.
double mp_edge(double sigma, double beta, std::int64_t max_dim);

/// Square root of the median of the MP eigenvalue law (unit variance).
/// Memoized per (beta, grid_points); safe to call concurrently.
double mp_median(double beta, std::size_t grid_points = kDefaultGridPoints);

AspectConstants aspect_constants(double beta, std::size_t grid_points = kDefaultGridPoints);

/// Median of a list; even length averages the central pair. Order of input is irrelevant.
double median(std::span<const double> values);

/// sigma_hat = median(s) / (mu_beta * sqrt(max(m, n))). Requires the full
/// spectrum (min(m, n) nonnegative values).
NoiseEstimate estimate_sigma(std::span<const double> singulars, std::int64_t m, std::int64_t n);

/// tau* = (omega(beta) / mu_beta) * median(s).
double dg_threshold(std::span<const double> singulars, std::int64_t m, std::int64_t n);

/// CDF of the MP singular-value law at scale sigma * sqrt(max_dim).
double mp_cdf(double x, double sigma, double beta, std::int64_t max_dim);

/// 100 * (1 - KS distance) between the empirical spectrum and the MP law.
/// Returns 0 when sigma_hat is zero (nothing noise-like to compare against).
double mp_fit(std::span<const double> singulars, double sigma_hat, double beta,
              std::int64_t max_dim);

}  // namespace dgr
