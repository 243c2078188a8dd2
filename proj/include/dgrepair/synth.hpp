// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dgr {

/// Planted low-rank signal plus IID Gaussian noise.
struct SyntheticSpec {
  std::int64_t m = 400;
  std::int64_t n = 600;
  std::vector<double> spike_values;  // descending, positive; rank = size
  double sigma = 1.0;
  std::uint64_t seed = 0;

  std::int64_t rank() const { return static_cast<std::int64_t>(spike_values.size()); }
  void validate() const;
};

struct SyntheticPair {
  Eigen::MatrixXd signal;
  Eigen::MatrixXd observed;
};

/// signal = U0 diag(spikes) V0^T with orthonormal factors from QR of Gaussian
/// matrices; observed = signal + sigma * G. Deterministic per seed.
SyntheticPair generate(const SyntheticSpec& spec);

/// Threshold with known noise: omega(beta) * sigma * sqrt(max(m, n)).
double expected_threshold(std::int64_t m, std::int64_t n, double sigma);

/// `count` spikes at multiples {first, first - step, ...} of expected_threshold.
std::vector<double> spikes_at_multiples(std::int64_t m, std::int64_t n, double sigma, std::size_t count,
                                        double smallest_multiple = 3.0, double step = 0.5);

struct AmseCurve {
  std::vector<double> thresholds;
  std::vector<double> mean_error;  // mean ||hard_t(observed) - signal||_F^2
  std::size_t argmin = 0;
  double dg_mean_error = 0.0;      // error at each trial's own data-driven tau*
  double dg_mean_tau = 0.0;
  double mean_signal_energy = 0.0;
  double mean_noise_energy = 0.0;  // mean ||observed - signal||_F^2
};

/// Trials use seeds derived from spec.seed; results do not depend on `threads`.
AmseCurve amse_grid(const SyntheticSpec& spec, const std::vector<double>& thresholds, int trials, int threads = 1);

/// Evenly spaced grid on [lo, hi] with `points` entries.
std::vector<double> linspace(double lo, double hi, std::size_t points);

/// Kept rank of the data-driven hard threshold against a zero base.
std::int64_t detect_rank(const Eigen::MatrixXd& observed);

/// Derived per-trial seed.
std::uint64_t trial_seed(std::uint64_t seed, std::uint64_t trial);

struct PropertyVerdict {
  std::string name;
  bool pass = false;
  std::string detail;
  std::vector<std::pair<std::string, double>> measured;
};

struct SynthCheckOptions {
  std::uint64_t seed = 0;
  int seeds = 20;
  int threads = 1;
};

/// Default desk-scale property suite used by the synth-check command.
std::vector<PropertyVerdict> synth_check(const SynthCheckOptions& options);
std::string verdicts_json(const std::vector<PropertyVerdict>& verdicts);

}  // namespace dgr
