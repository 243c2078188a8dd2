// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "dgrepair/linalg.hpp"
#include "dgrepair/parallel.hpp"
#include "dgrepair/repair.hpp"
#include "dgrepair/rmt.hpp"

namespace dgr {

namespace {

Eigen::MatrixXd gaussian(std::int64_t rows, std::int64_t cols, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(rows, cols);
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = normal(gen);
  }
  return g;
}

Eigen::MatrixXd orthonormal_columns(std::int64_t rows, std::int64_t cols, std::mt19937_64& gen) {
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(rows, cols, gen));
  return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

double error_at(const std::vector<double>& s, const std::vector<double>& a, double signal_sq, double t) {
  // ||sum_{s_i > t} s_i u_i v_i^T - S||^2 = ||S||^2 + sum_kept (s_i^2 - 2 s_i u_i^T S v_i)
  double err = signal_sq;
  for (std::size_t i = 0; i < s.size() && s[i] > t; ++i) err += s[i] * s[i] - 2.0 * s[i] * a[i];
  return err;
}

PropertyVerdict verdict(std::string name, bool pass, std::string detail,
                        std::vector<std::pair<std::string, double>> measured) {
  return PropertyVerdict{std::move(name), pass, std::move(detail), std::move(measured)};
}

}  // namespace

void SyntheticSpec::validate() const {
  if (m <= 0 || n <= 0) throw std::invalid_argument("synthetic dims must be positive");
  if (rank() > std::min(m, n)) throw std::invalid_argument("rank exceeds min(m, n)");
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
  for (std::size_t i = 0; i < spike_values.size(); ++i) {
    if (!(spike_values[i] > 0.0)) throw std::invalid_argument("spike values must be positive");
    if (i > 0 && spike_values[i] > spike_values[i - 1]) throw std::invalid_argument("spike values must descend");
  }
}

SyntheticPair generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 gen(spec.seed);
  SyntheticPair out;
  const auto r = spec.rank();
  if (r > 0) {
    const Eigen::MatrixXd u = orthonormal_columns(spec.m, r, gen);
    const Eigen::MatrixXd v = orthonormal_columns(spec.n, r, gen);
    const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(spec.spike_values.data(), r);
    out.signal = u * d.asDiagonal() * v.transpose();
  } else {
    out.signal = Eigen::MatrixXd::Zero(spec.m, spec.n);
  }
  out.observed = out.signal;
  if (spec.sigma > 0.0) out.observed += spec.sigma * gaussian(spec.m, spec.n, gen);
  return out;
}

double expected_threshold(std::int64_t m, std::int64_t n, double sigma) {
  return omega(aspect_ratio(m, n)) * sigma * std::sqrt(static_cast<double>(std::max(m, n)));
}

std::vector<double> spikes_at_multiples(std::int64_t m, std::int64_t n, double sigma, std::size_t count,
                                        double smallest_multiple, double step) {
  const double tau = expected_threshold(m, n, sigma);
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(tau * (smallest_multiple + step * static_cast<double>(count - 1 - i)));
  }
  return out;
}

std::vector<double> linspace(double lo, double hi, std::size_t points) {
  if (points < 2) throw std::invalid_argument("linspace needs at least two points");
  std::vector<double> out(points);
  for (std::size_t i = 0; i < points; ++i) {
    out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  out.back() = hi;
  return out;
}

std::uint64_t trial_seed(std::uint64_t seed, std::uint64_t trial) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (trial + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

AmseCurve amse_grid(const SyntheticSpec& spec, const std::vector<double>& thresholds, int trials, int threads) {
  spec.validate();
  if (thresholds.empty() || !std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw std::invalid_argument("thresholds must be nonempty and ascending");
  }
  if (trials < 1) throw std::invalid_argument("trials must be >= 1");
  struct Trial {
    std::vector<double> err;
    double dg_err = 0.0, dg_tau = 0.0, signal_sq = 0.0, noise_sq = 0.0;
  };
  std::vector<Trial> per(static_cast<std::size_t>(trials));
  parallel_for(per.size(), threads, [&](std::size_t t) {
    SyntheticSpec s = spec;
    s.seed = trial_seed(spec.seed, t);
    const auto pair = generate(s);
    const auto dec = svd(pair.observed, true);
    const auto p = static_cast<std::size_t>(dec.s.size());
    std::vector<double> sv(dec.s.data(), dec.s.data() + p);
    std::vector<double> a(p);
    const Eigen::MatrixXd sv_proj = pair.signal * dec.V;  // m x p
    for (std::size_t i = 0; i < p; ++i) a[i] = dec.U.col(static_cast<Eigen::Index>(i)).dot(sv_proj.col(static_cast<Eigen::Index>(i)));
    auto& tr = per[t];
    tr.signal_sq = pair.signal.squaredNorm();
    tr.noise_sq = (pair.observed - pair.signal).squaredNorm();
    tr.err.reserve(thresholds.size());
    for (double th : thresholds) tr.err.push_back(error_at(sv, a, tr.signal_sq, th));
    tr.dg_tau = dg_threshold(sv, s.m, s.n);
    tr.dg_err = error_at(sv, a, tr.signal_sq, tr.dg_tau);
  });
  AmseCurve curve;
  curve.thresholds = thresholds;
  curve.mean_error.assign(thresholds.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(trials);
  for (const auto& tr : per) {
    for (std::size_t k = 0; k < thresholds.size(); ++k) curve.mean_error[k] += tr.err[k] * inv;
    curve.dg_mean_error += tr.dg_err * inv;
    curve.dg_mean_tau += tr.dg_tau * inv;
    curve.mean_signal_energy += tr.signal_sq * inv;
    curve.mean_noise_energy += tr.noise_sq * inv;
  }
  curve.argmin = static_cast<std::size_t>(
      std::min_element(curve.mean_error.begin(), curve.mean_error.end()) - curve.mean_error.begin());
  return curve;
}

std::int64_t detect_rank(const Eigen::MatrixXd& observed) {
  return describe_spectrum(decompose_delta(observed, "observed", false)).kept_rank;
}

std::vector<PropertyVerdict> synth_check(const SynthCheckOptions& options) {
  if (options.seeds < 1) throw std::invalid_argument("seeds must be >= 1");
  std::vector<PropertyVerdict> out;
  const std::size_t seeds = static_cast<std::size_t>(options.seeds);

  SyntheticSpec spiked;
  spiked.m = 400;
  spiked.n = 600;
  spiked.sigma = 1.0;
  spiked.spike_values = spikes_at_multiples(spiked.m, spiked.n, spiked.sigma, 5);
  std::vector<std::int64_t> ranks(seeds);
  std::vector<char> improved(seeds);
  parallel_for(seeds, options.threads, [&](std::size_t t) {
    SyntheticSpec s = spiked;
    s.seed = trial_seed(options.seed, t);
    const auto pair = generate(s);
    const auto rep = repair_matrix(Eigen::MatrixXd::Zero(s.m, s.n), pair.observed, 1.0, "synthetic");
    ranks[t] = rep.spectrum.kept_rank;
    improved[t] = (rep.repaired - pair.signal).norm() < (pair.observed - pair.signal).norm();
  });
  const double hit = static_cast<double>(std::count(ranks.begin(), ranks.end(), 5)) / static_cast<double>(seeds);
  out.push_back(verdict("rank_detection", hit >= 0.95, "planted rank 5 at 400x600 recovered on >= 95% of seeds",
                        {{"fraction_exact", hit}}));
  const double better =
      static_cast<double>(std::count(improved.begin(), improved.end(), 1)) / static_cast<double>(seeds);
  out.push_back(verdict("denoising_improves", better == 1.0,
                        "repaired error below unrepaired error on every seed", {{"fraction_improved", better}}));

  spiked.seed = trial_seed(options.seed, 1000);
  const auto tau_exp = expected_threshold(spiked.m, spiked.n, spiked.sigma);
  const auto curve = amse_grid(spiked, linspace(0.0, 6.0 * tau_exp, 200), options.seeds, options.threads);
  const double grid_min = curve.mean_error[curve.argmin];
  out.push_back(verdict("amse_optimality", curve.dg_mean_error <= 1.05 * grid_min,
                        "error at data-driven threshold within 5% of the grid minimum",
                        {{"dg_mean_error", curve.dg_mean_error},
                         {"grid_min_error", grid_min},
                         {"grid_argmin_threshold", curve.thresholds[curve.argmin]},
                         {"dg_mean_tau", curve.dg_mean_tau}}));
  const bool u_shape = grid_min < curve.mean_error.front() && grid_min < curve.mean_error.back();
  out.push_back(verdict("amse_u_shape", u_shape, "grid minimum below both endpoints",
                        {{"error_at_zero", curve.mean_error.front()}, {"error_at_max", curve.mean_error.back()}}));

  SyntheticSpec noise;
  noise.m = 500;
  noise.n = 500;
  noise.sigma = 1.0;
  std::vector<double> sigma_err(seeds), top_ratio(seeds);
  std::vector<std::int64_t> noise_rank(seeds);
  parallel_for(seeds, options.threads, [&](std::size_t t) {
    SyntheticSpec s = noise;
    s.seed = trial_seed(options.seed ^ 0xabcdefull, t);
    const auto pair = generate(s);
    const auto sv = singular_values(pair.observed);
    std::vector<double> v(sv.data(), sv.data() + sv.size());
    sigma_err[t] = std::abs(estimate_sigma(v, s.m, s.n).sigma_hat - s.sigma) / s.sigma;
    top_ratio[t] = v.front() / mp_edge(s.sigma, 1.0, s.n);
    const double tau = dg_threshold(v, s.m, s.n);
    noise_rank[t] = std::count_if(v.begin(), v.end(), [tau](double x) { return x > tau; });
  });
  const double worst = *std::max_element(sigma_err.begin(), sigma_err.end());
  out.push_back(verdict("sigma_hat_accuracy", worst < 0.02, "noise estimate within 2% on pure noise",
                        {{"max_relative_error", worst}}));
  const double worst_edge = std::accumulate(top_ratio.begin(), top_ratio.end(), 0.0,
                                            [](double acc, double r) { return std::max(acc, std::abs(r - 1.0)); });
  out.push_back(verdict("bulk_edge", worst_edge < 0.05, "top noise singular value within 5% of the bulk edge",
                        {{"max_relative_deviation", worst_edge}}));
  const double zero_frac =
      static_cast<double>(std::count(noise_rank.begin(), noise_rank.end(), 0)) / static_cast<double>(seeds);
  out.push_back(verdict("pure_noise_rank_zero", zero_frac >= 0.95, "pure noise keeps no components on >= 95% of seeds",
                        {{"fraction_zero", zero_frac}}));
  return out;
}

std::string verdicts_json(const std::vector<PropertyVerdict>& verdicts) {
  nlohmann::ordered_json j;
  bool all = true;
  nlohmann::ordered_json props = nlohmann::ordered_json::array();
  for (const auto& v : verdicts) {
    all = all && v.pass;
    nlohmann::ordered_json o;
    o["name"] = v.name;
    o["pass"] = v.pass;
    o["detail"] = v.detail;
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, x] : v.measured) m[k] = x;
    o["measured"] = std::move(m);
    props.push_back(std::move(o));
  }
  j["all_pass"] = all;
  j["properties"] = std::move(props);
  return j.dump(2) + "\n";
}

}  // namespace dgr
