// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

// Full-size projection geometry (8192 x 3072). Labelled slow.

#include <doctest.h>

#include "dgrepair/repair.hpp"
#include "dgrepair/rmt.hpp"
#include "dgrepair/synth.hpp"

using namespace dgr;

TEST_CASE("30 planted directions in an 8192 x 3072 delta") {
  const std::int64_t m = 8192, n = 3072;
  const double sigma = 1e-3;
  const double tau = expected_threshold(m, n, sigma);
  std::vector<double> spikes;
  for (int i = 0; i < 30; ++i) spikes.push_back(tau * (6.0 - 3.0 * i / 29.0));
  const auto pair = generate({m, n, spikes, sigma, 5});

  const auto dec = decompose_delta(pair.observed, "up_proj", false);
  const auto sp = describe_spectrum(dec);
  CHECK(sp.beta == 0.375);
  CHECK(sp.sigma_hat == doctest::Approx(sigma).epsilon(0.01));
  CHECK(sp.kept_rank == 30);
  std::int64_t bulk = 0;
  for (double s : sp.singulars) bulk += s <= sp.edge;
  CHECK(bulk == n - 30);
  CHECK(sp.mp_fit >= 90.0);
}
