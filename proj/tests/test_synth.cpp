// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <doctest.h>
#include <json.hpp>

#include "dgrepair/linalg.hpp"
#include "dgrepair/rmt.hpp"
#include "dgrepair/synth.hpp"

using namespace dgr;

namespace {

// Hard threshold by a separate SVD routine.
Eigen::MatrixXd jacobi_hard_threshold(const Eigen::MatrixXd& y, double t) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(y, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
    if (svd.singularValues()[i] > t) out += svd.singularValues()[i] * svd.matrixU().col(i) * svd.matrixV().col(i).transpose();
  }
  return out;
}

}  // namespace

TEST_CASE("generator") {
  SyntheticSpec spec{60, 90, {5.0, 3.0}, 0.0, 1};
  const auto clean = generate(spec);
  CHECK(clean.observed == clean.signal);
  const Eigen::VectorXd s = singular_values(clean.signal);
  CHECK(s[0] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(s[2] < 1e-12);

  spec.sigma = 0.5;
  const auto a = generate(spec);
  const auto b = generate(spec);
  CHECK(a.observed == b.observed);
  spec.seed = 2;
  CHECK_FALSE(generate(spec).observed == a.observed);

  // Noise energy concentrates at sigma^2 m n.
  SyntheticSpec big{300, 500, {}, 0.3, 4};
  const auto noise = generate(big);
  CHECK(noise.signal.isZero(0.0));
  CHECK(noise.observed.squaredNorm() == doctest::Approx(0.09 * 300 * 500).epsilon(0.02));

  CHECK_THROWS_AS((SyntheticSpec{10, 10, {1.0, 2.0}, 1.0, 0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((SyntheticSpec{10, 10, {1.0}, -1.0, 0}.validate()), std::invalid_argument);
}

TEST_CASE("threshold placement") {
  CHECK(expected_threshold(100, 100, 1.0) == doctest::Approx(4.0 / std::sqrt(3.0) * 10.0));
  const auto spikes = spikes_at_multiples(400, 600, 1.0, 5);
  const double tau = expected_threshold(400, 600, 1.0);
  REQUIRE(spikes.size() == 5);
  CHECK(spikes.front() == doctest::Approx(5.0 * tau));
  CHECK(spikes.back() == doctest::Approx(3.0 * tau));
  // Above the bulk edge by construction.
  CHECK(tau > mp_edge(1.0, aspect_ratio(400, 600), 600));
  const auto pts = linspace(0.0, 1.0, 5);
  CHECK(pts == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
}

TEST_CASE("pure-noise spectrum edge") {
  SyntheticSpec spec{400, 600, {}, 1.0, 9};
  const Eigen::VectorXd s = singular_values(generate(spec).observed);
  const double edge = mp_edge(1.0, aspect_ratio(400, 600), 600);
  CHECK(s[0] == doctest::Approx(edge).epsilon(0.05));
}

TEST_CASE("rank detection") {
  const auto spikes = spikes_at_multiples(400, 600, 1.0, 5);
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    hits += detect_rank(generate({400, 600, spikes, 1.0, seed}).observed) == 5;
  }
  CHECK(hits == 5);

  int zero = 0, false_positives = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = detect_rank(generate({120, 180, {}, 1.0, 1000 + seed}).observed);
    zero += r == 0;
    false_positives += static_cast<int>(r);
  }
  CHECK(zero >= 95);
  CHECK(false_positives <= 1);
}

TEST_CASE("AMSE curve") {
  SyntheticSpec spec{60, 90, {30.0, 22.0, 15.0}, 1.0, 17};
  const double tau = expected_threshold(60, 90, 1.0);
  const auto grid = linspace(0.0, 4.0 * tau, 41);
  const auto curve = amse_grid(spec, grid, 6);
  REQUIRE(curve.mean_error.size() == grid.size());

  // Zero threshold keeps the noise; a huge one loses the whole signal.
  CHECK(curve.mean_error.front() == doctest::Approx(curve.mean_noise_energy).epsilon(1e-9));
  CHECK(curve.mean_noise_energy == doctest::Approx(60.0 * 90.0).epsilon(0.05));
  CHECK(curve.mean_error.back() == doctest::Approx(curve.mean_signal_energy).epsilon(1e-9));
  CHECK(curve.mean_signal_energy == doctest::Approx(30.0 * 30 + 22 * 22 + 15 * 15).epsilon(1e-9));

  // Identity against a brute-force reconstruction on the same trials.
  for (std::size_t k : {std::size_t{5}, std::size_t{12}, std::size_t{20}}) {
    double brute = 0.0;
    for (int t = 0; t < 6; ++t) {
      SyntheticSpec trial = spec;
      trial.seed = trial_seed(spec.seed, static_cast<std::uint64_t>(t));
      const auto pair = generate(trial);
      brute += (jacobi_hard_threshold(pair.observed, grid[k]) - pair.signal).squaredNorm() / 6.0;
    }
    CHECK(curve.mean_error[k] == doctest::Approx(brute).epsilon(1e-9));
  }

  // U shape: falls to the minimum then rises.
  CHECK(curve.argmin > 0);
  CHECK(curve.argmin < grid.size() - 1);
  CHECK(curve.mean_error[curve.argmin] < curve.mean_error.front());
  CHECK(curve.mean_error[curve.argmin] < curve.mean_error.back());

  // Data-driven threshold lands near the grid optimum.
  CHECK(curve.dg_mean_error <= 1.05 * curve.mean_error[curve.argmin]);
  CHECK(curve.dg_mean_tau == doctest::Approx(tau).epsilon(0.1));

  CHECK(amse_grid(spec, grid, 6, 3).mean_error == curve.mean_error);
}

TEST_CASE("property suite") {
  const auto verdicts = synth_check({0, 3, 1});
  CHECK(verdicts.size() == 7);
  for (const auto& v : verdicts) {
    CAPTURE(v.name);
    CAPTURE(v.detail);
    CHECK(v.pass);
  }
  const auto j = nlohmann::json::parse(verdicts_json(verdicts));
  CHECK(j.is_object());
}
