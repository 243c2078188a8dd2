// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dgrepair/linalg.hpp"
#include "dgrepair/tensor_store.hpp"

namespace dgr {

/// Spectral summary of one delta matrix and its threshold decision.
struct DeltaSpectrum {
  std::string name;
  std::int64_t m = 0;
  std::int64_t n = 0;
  double beta = 1.0;
  std::vector<double> singulars;  // descending, length min(m, n)
  double sigma_hat = 0.0;
  double tau = 0.0;   // threshold actually applied (threshold_scale * tau*)
  double edge = 0.0;  // bulk edge at sigma_hat
  std::int64_t kept_rank = 0;
  double noise_energy_fraction = 0.0;
  double mp_fit = 0.0;
  bool zero_delta = false;
};

/// Regex restriction over tensor names. Presets: ALL, mlp_only, attn_only, gate_up.
class LayerMask {
 public:
  /// Accepts a preset name or, failing that, treats `spec` as a custom regex.
  static LayerMask parse(const std::string& spec);
  static LayerMask preset(const std::string& name);
  static LayerMask custom(const std::string& pattern);

  const std::string& name() const noexcept { return name_; }
  const std::string& pattern() const noexcept { return pattern_; }
  bool matches(const std::string& tensor_name) const;

 private:
  LayerMask(std::string name, std::string pattern);
  std::string name_;
  std::string pattern_;
  std::regex re_;
};

/// Thin SVD of a delta, reusable across threshold scales.
struct DeltaDecomposition {
  std::string name;
  std::int64_t m = 0;
  std::int64_t n = 0;
  Svd svd;
  double sigma_hat = 0.0;
  double tau_star = 0.0;
  bool zero_delta = false;
};

/// With vectors=false only singular values are computed (enough for describe_spectrum).
DeltaDecomposition decompose_delta(const Eigen::MatrixXd& delta, const std::string& name = "",
                                   bool vectors = true);

/// Threshold decision and spectrum statistics at threshold_scale * tau*.
DeltaSpectrum describe_spectrum(const DeltaDecomposition& d, double threshold_scale = 1.0);

/// Keeps components with s > threshold_scale * tau* and returns U_k diag(s_k) V_k^T.
Eigen::MatrixXd thresholded_delta(const DeltaDecomposition& d, double threshold_scale,
                                  DeltaSpectrum* spectrum = nullptr);

struct MatrixRepair {
  Eigen::MatrixXd repaired;
  DeltaSpectrum spectrum;
};

/// Hard-threshold repair of one matrix: base + U_k diag(s_k) V_k^T.
MatrixRepair repair_matrix(const Eigen::MatrixXd& base, const Eigen::MatrixXd& ft,
                           double threshold_scale = 1.0, const std::string& name = "");

enum class Disposition { repaired, passthrough_out_of_scope, passthrough_masked, svd_failed };
std::string to_string(Disposition d);

struct TensorOutcome {
  std::string name;
  Disposition disposition = Disposition::repaired;
  ScopeReason scope_reason = ScopeReason::ok;
  std::optional<DeltaSpectrum> spectrum;
  double delta_frobenius_sq = 0.0;     // ||delta||^2 for in-scope tensors
  double retained_frobenius_sq = 0.0;  // ||delta*||^2 (full delta when masked)
  std::string warning;
};

struct RepairReport {
  std::vector<TensorOutcome> per_tensor;  // name order
  double retention_r = 1.0;
  bool zero_delta = false;
  double threshold_scale = 1.0;
  std::string mask;
  std::map<std::int64_t, std::int64_t> kept_rank_histogram;
  double wall_seconds = 0.0;  // not part of the serialized report
};

struct RunOptions {
  int threads = 1;
  std::int64_t min_elements = kDefaultMinElements;
  UnpairedPolicy unpaired = UnpairedPolicy::error;
};

struct RepairResult {
  TensorMap checkpoint;
  RepairReport report;
};

RepairResult repair_checkpoint(const TensorMap& base, const TensorMap& ft, const LayerMask& mask,
                               double threshold_scale = 1.0, const RunOptions& options = {});

/// Frobenius retention over in-scope tensors. `zero_delta` marks a zero
/// denominator, in which case `r` is reported as 1.
struct Retention {
  double r = 1.0;
  bool zero_delta = false;
};

Retention frobenius_retention(const TensorMap& base, const TensorMap& ft, const TensorMap& candidate,
                              std::int64_t min_elements = kDefaultMinElements);

/// Report JSON (stable key order, no timing fields).
std::string report_json(const RepairReport& report);
/// One CSV row per repaired tensor.
void write_spectrum_csv(const RepairReport& report, std::ostream& out);
inline constexpr const char* kSpectrumCsvHeader =
    "name,m,n,beta,sigma_hat,tau,edge,kept_rank,noise_energy_fraction,mp_fit";

/// Shared helpers for per-tensor checkpoint transforms.
Eigen::MatrixXd tensor_matrix(const DenseTensor& t);
DenseTensor matrix_to_tensor(const Eigen::MatrixXd& values, const DenseTensor& like);

}  // namespace dgr
