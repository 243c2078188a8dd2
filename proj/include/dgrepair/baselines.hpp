// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "dgrepair/repair.hpp"
#include "dgrepair/tensor_store.hpp"

namespace dgr {

enum class Method { wise, ties, dare, dare_linear, fapm, dg_hard };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// One post-hoc method and its scalar knob:
/// wise alpha, ties keep_ratio, dare/dare_linear drop_prob, fapm revert_rate,
/// dg_hard threshold_scale.
struct BaselineConfig {
  Method method = Method::wise;
  double knob = 0.5;
  std::uint64_t seed = 0;  // dare variants only
  double epsilon = 1e-8;   // fapm only
  double lambda = 1.0;     // ties scaling

  void validate() const;
};

TensorMap wise_ft(const TensorMap& base, const TensorMap& ft, double alpha, const RunOptions& options = {});
TensorMap ties(const TensorMap& base, const TensorMap& ft, double keep_ratio, double lambda = 1.0,
               const RunOptions& options = {});
TensorMap dare(const TensorMap& base, const TensorMap& ft, double drop_prob, bool rescale,
               std::uint64_t seed, const RunOptions& options = {});
TensorMap fapm(const TensorMap& base, const TensorMap& ft, double revert_rate = 0.9,
               double epsilon = 1e-8, const RunOptions& options = {});

TensorMap apply_baseline(const BaselineConfig& config, const TensorMap& base, const TensorMap& ft,
                         const RunOptions& options = {});

/// ceil(fraction * count) with a guard against products such as 0.7 * 100
/// landing one ulp above an integer.
std::int64_t fraction_count(double fraction, std::int64_t count);

/// Stable 64-bit FNV-1a hash of a tensor name.
std::uint64_t name_hash(const std::string& name);

struct RollbackResult {
  Method method = Method::wise;
  double knob_found = 0.0;
  double realized_r = 0.0;
  double target_r = 0.0;
  int iterations = 0;
  bool exact = false;
};

struct RollbackOutcome {
  RollbackResult result;
  TensorMap checkpoint;
};

/// Bisects the method's knob until the realized Frobenius retention is within
/// `tol` of `target_r`; otherwise returns the nearest knob seen with exact=false.
RollbackOutcome match_rollback(const BaselineConfig& config, const TensorMap& base,
                               const TensorMap& ft, double target_r, double tol = 0.01,
                               int max_iter = 40, const RunOptions& options = {});

std::string rollback_json(const RollbackResult& result);

}  // namespace dgr
