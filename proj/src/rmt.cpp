// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/rmt.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dgr {

namespace {

void check_beta(double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) {
    throw std::invalid_argument("aspect ratio beta must lie in (0, 1], got " + std::to_string(beta));
  }
}

// Cumulative MP eigenvalue mass on a uniform grid in theta, where
// lambda(theta) = c - R cos(theta) sweeps [lambda-, lambda+] as theta goes
// 0 -> pi. The Jacobian cancels the square-root endpoint behaviour, so the
// integrand is smooth and bounded even at beta = 1 where lambda- = 0.
struct MpGrid {
  double beta = 0.0;
  double lambda_minus = 0.0;
  double lambda_plus = 0.0;
  double center = 0.0;
  double radius = 0.0;
  std::vector<double> cdf;  // cdf[k] = mass on [0, k*pi/N], normalized to cdf[N] = 1.

  double theta_step() const { return std::numbers::pi / static_cast<double>(cdf.size() - 1); }

  double cdf_at_theta(double theta) const {
    const double pos = theta / theta_step();
    const auto last = cdf.size() - 1;
    if (pos <= 0.0) return 0.0;
    if (pos >= static_cast<double>(last)) return 1.0;
    const auto k = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(k);
    return cdf[k] + frac * (cdf[k + 1] - cdf[k]);
  }

  double theta_of_lambda(double lambda) const {
    return std::acos(std::clamp((center - lambda) / radius, -1.0, 1.0));
  }

  double lambda_of_theta(double theta) const {
    const double h = std::sin(0.5 * theta);
    return lambda_minus + 2.0 * radius * h * h;
  }
};

double integrand(const MpGrid& g, double theta) {
  // R^2 sin^2(theta) / (2 pi beta lambda), with sin^2 = 4 h^2 c^2, h = sin(theta/2).
  const double h = std::sin(0.5 * theta);
  const double c = std::cos(0.5 * theta);
  const double denom = g.lambda_minus + 2.0 * g.radius * h * h;
  double ratio;
  if (denom > 0.0) {
    ratio = 4.0 * h * h * c * c / denom;
  } else {
    ratio = 2.0 * c * c / g.radius;  // beta = 1, theta = 0 limit.
  }
  return g.radius * g.radius * ratio / (2.0 * std::numbers::pi * g.beta);
}

std::shared_ptr<const MpGrid> build_grid(double beta, std::size_t points) {
  auto g = std::make_shared<MpGrid>();
  const double sb = std::sqrt(beta);
  g->beta = beta;
  g->lambda_minus = (1.0 - sb) * (1.0 - sb);
  g->lambda_plus = (1.0 + sb) * (1.0 + sb);
  g->center = 0.5 * (g->lambda_plus + g->lambda_minus);
  g->radius = 0.5 * (g->lambda_plus - g->lambda_minus);
  g->cdf.assign(points + 1, 0.0);
  const double step = std::numbers::pi / static_cast<double>(points);
  double prev = integrand(*g, 0.0);
  double acc = 0.0;
  for (std::size_t k = 1; k <= points; ++k) {
    const double cur = integrand(*g, step * static_cast<double>(k));
    acc += 0.5 * step * (prev + cur);
    g->cdf[k] = acc;
    prev = cur;
  }
  for (auto& v : g->cdf) v /= acc;
  g->cdf.back() = 1.0;
  return g;
}

struct GridSlot {
  std::once_flag once;
  std::shared_ptr<const MpGrid> grid;
};

std::shared_ptr<const MpGrid> grid_for(double beta, std::size_t points) {
  static std::mutex mutex;
  static std::map<std::pair<double, std::size_t>, std::shared_ptr<GridSlot>> cache;
  std::shared_ptr<GridSlot> slot;
  {
    std::lock_guard lock(mutex);
    auto& entry = cache[{beta, points}];
    if (!entry) entry = std::make_shared<GridSlot>();
    slot = entry;
  }
  std::call_once(slot->once, [&] { slot->grid = build_grid(beta, points); });
  return slot->grid;
}

}  // namespace

double aspect_ratio(std::int64_t m, std::int64_t n) {
  if (m <= 0 || n <= 0) throw std::invalid_argument("matrix dimensions must be positive");
  if (m == n) return 1.0;
  return static_cast<double>(std::min(m, n)) / static_cast<double>(std::max(m, n));
}

double omega(double beta) {
  check_beta(beta);
  const double b1 = beta + 1.0;
  return std::sqrt(2.0 * b1 + 8.0 * beta / (b1 + std::sqrt(beta * beta + 14.0 * beta + 1.0)));
}

double mp_edge(double sigma, double beta, std::int64_t max_dim) {
  check_beta(beta);
  if (!(sigma >= 0.0) || max_dim < 1) throw std::invalid_argument("mp_edge: invalid sigma or max_dim");
  return sigma * std::sqrt(static_cast<double>(max_dim)) * (1.0 + std::sqrt(beta));
}

double mp_median(double beta, std::size_t grid_points) {
  check_beta(beta);
  if (grid_points < 10000) throw std::invalid_argument("mp_median needs at least 1e4 grid points");
  const auto g = grid_for(beta, grid_points);
  const auto it = std::lower_bound(g->cdf.begin(), g->cdf.end(), 0.5);
  const auto k = static_cast<std::size_t>(it - g->cdf.begin());
  const double lo = g->cdf[k - 1];
  const double hi = g->cdf[k];
  const double theta = g->theta_step() * (static_cast<double>(k - 1) + (0.5 - lo) / (hi - lo));
  return std::sqrt(g->lambda_of_theta(theta));
}

AspectConstants aspect_constants(double beta, std::size_t grid_points) {
  const double sb = std::sqrt(beta);
  return AspectConstants{beta, omega(beta), mp_median(beta, grid_points), (1.0 - sb) * (1.0 - sb),
                         (1.0 + sb) * (1.0 + sb)};
}

double median(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::vector<double> v(values.begin(), values.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

NoiseEstimate estimate_sigma(std::span<const double> singulars, std::int64_t m, std::int64_t n) {
  if (singulars.empty()) throw std::invalid_argument("estimate_sigma: empty spectrum");
  const auto p = std::min(m, n);
  if (static_cast<std::int64_t>(singulars.size()) != p) {
    throw std::invalid_argument("estimate_sigma needs the full spectrum of " + std::to_string(p) +
                                " values, got " + std::to_string(singulars.size()));
  }
  for (double s : singulars) {
    if (!(s >= 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument("estimate_sigma: singular values must be finite and nonnegative");
    }
  }
  const double beta = aspect_ratio(m, n);
  const double med = median(singulars);
  const double sigma = med / (mp_median(beta) * std::sqrt(static_cast<double>(std::max(m, n))));
  return NoiseEstimate{sigma, med, m, n};
}

double dg_threshold(std::span<const double> singulars, std::int64_t m, std::int64_t n) {
  const auto est = estimate_sigma(singulars, m, n);
  const double beta = aspect_ratio(m, n);
  return omega(beta) / mp_median(beta) * est.median_s;
}

double mp_cdf(double x, double sigma, double beta, std::int64_t max_dim) {
  check_beta(beta);
  if (!(sigma > 0.0) || max_dim < 1 || std::isnan(x)) {
    throw std::invalid_argument("mp_cdf: invalid sigma, max_dim or x");
  }
  const auto g = grid_for(beta, kDefaultGridPoints);
  const double scaled = x / (sigma * std::sqrt(static_cast<double>(max_dim)));
  if (scaled <= 0.0) return 0.0;
  const double lambda = scaled * scaled;
  if (lambda <= g->lambda_minus) return 0.0;
  if (lambda >= g->lambda_plus) return 1.0;
  return std::clamp(g->cdf_at_theta(g->theta_of_lambda(lambda)), 0.0, 1.0);
}

double mp_fit(std::span<const double> singulars, double sigma_hat, double beta,
              std::int64_t max_dim) {
  if (singulars.empty()) throw std::invalid_argument("mp_fit: empty spectrum");
  if (!(sigma_hat > 0.0)) return 0.0;
  std::vector<double> x(singulars.begin(), singulars.end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double ks = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = mp_cdf(x[i], sigma_hat, beta, max_dim);
    ks = std::max({ks, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return std::clamp(100.0 * (1.0 - ks), 0.0, 100.0);
}

}  // namespace dgr
