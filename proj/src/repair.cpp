// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/repair.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "dgrepair/parallel.hpp"
#include "dgrepair/rmt.hpp"
#include "format.hpp"

namespace dgr {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

const std::map<std::string, std::string>& mask_presets() {
  static const std::map<std::string, std::string> presets = {
      {"ALL", ".*"},
      {"mlp_only", R"(\.mlp\.)"},
      {"attn_only", R"(\.self_attn\.)"},
      {"gate_up", R"(\.mlp\.(gate|up)_proj)"},
  };
  return presets;
}

double applied_threshold(double tau_star, double threshold_scale) {
  if (std::isinf(threshold_scale)) return std::numeric_limits<double>::infinity();
  return threshold_scale * tau_star;
}

}  // namespace

LayerMask::LayerMask(std::string name, std::string pattern)
    : name_(std::move(name)), pattern_(std::move(pattern)), re_(pattern_, std::regex::ECMAScript) {}

LayerMask LayerMask::preset(const std::string& name) {
  const auto& p = mask_presets();
  auto it = p.find(name);
  if (it == p.end()) throw std::invalid_argument("unknown mask preset '" + name + "'");
  return LayerMask(name, it->second);
}

LayerMask LayerMask::custom(const std::string& pattern) {
  try {
    return LayerMask("custom", pattern);
  } catch (const std::regex_error& e) {
    throw std::invalid_argument("invalid mask regex '" + pattern + "': " + e.what());
  }
}

LayerMask LayerMask::parse(const std::string& spec) {
  if (mask_presets().contains(spec)) return preset(spec);
  return custom(spec);
}

bool LayerMask::matches(const std::string& tensor_name) const {
  return std::regex_search(tensor_name, re_);
}

DeltaDecomposition decompose_delta(const Eigen::MatrixXd& delta, const std::string& name, bool vectors) {
  if (!delta.allFinite()) throw std::invalid_argument("non-finite values in delta of '" + name + "'");
  DeltaDecomposition d;
  d.name = name;
  d.m = delta.rows();
  d.n = delta.cols();
  const auto p = std::min(d.m, d.n);
  if (delta.squaredNorm() == 0.0) {
    d.zero_delta = true;
    d.svd.s = Eigen::VectorXd::Zero(p);
    return d;
  }
  d.svd = svd(delta, vectors);
  std::span<const double> s(d.svd.s.data(), static_cast<std::size_t>(p));
  d.sigma_hat = estimate_sigma(s, d.m, d.n).sigma_hat;
  d.tau_star = dg_threshold(s, d.m, d.n);
  return d;
}

DeltaSpectrum describe_spectrum(const DeltaDecomposition& d, double threshold_scale) {
  if (!(threshold_scale >= 0.0)) throw std::invalid_argument("threshold_scale must be >= 0");
  const Eigen::VectorXd& s = d.svd.s;
  const double tau = applied_threshold(d.tau_star, threshold_scale);
  const double beta = aspect_ratio(d.m, d.n);
  const auto max_dim = std::max(d.m, d.n);
  DeltaSpectrum sp;
  sp.name = d.name;
  sp.m = d.m;
  sp.n = d.n;
  sp.beta = beta;
  sp.singulars.assign(s.data(), s.data() + s.size());
  sp.sigma_hat = d.sigma_hat;
  sp.tau = d.zero_delta ? 0.0 : tau;
  sp.edge = mp_edge(d.sigma_hat, beta, max_dim);
  sp.zero_delta = d.zero_delta;
  if (!d.zero_delta) {
    while (sp.kept_rank < s.size() && s[sp.kept_rank] > tau) ++sp.kept_rank;
  }
  double total = 0.0;
  double below = 0.0;
  for (double v : sp.singulars) {
    total += v * v;
    if (v <= sp.edge) below += v * v;
  }
  sp.noise_energy_fraction = total > 0.0 ? below / total : 0.0;
  sp.mp_fit = mp_fit(sp.singulars, d.sigma_hat, beta, max_dim);
  return sp;
}

Eigen::MatrixXd thresholded_delta(const DeltaDecomposition& d, double threshold_scale,
                                  DeltaSpectrum* spectrum) {
  if (!(threshold_scale >= 0.0)) throw std::invalid_argument("threshold_scale must be >= 0");
  const Eigen::VectorXd& s = d.svd.s;
  const double tau = applied_threshold(d.tau_star, threshold_scale);
  Eigen::Index k = 0;
  if (!d.zero_delta) {
    while (k < s.size() && s[k] > tau) ++k;
  }
  if (spectrum != nullptr) *spectrum = describe_spectrum(d, threshold_scale);
  if (k == 0) return Eigen::MatrixXd::Zero(d.m, d.n);
  if (d.svd.U.cols() < k) throw std::logic_error("thresholded_delta needs singular vectors");
  return d.svd.U.leftCols(k) * s.head(k).asDiagonal() * d.svd.V.leftCols(k).transpose();
}

MatrixRepair repair_matrix(const Eigen::MatrixXd& base, const Eigen::MatrixXd& ft,
                           double threshold_scale, const std::string& name) {
  if (base.rows() != ft.rows() || base.cols() != ft.cols()) {
    throw std::invalid_argument("repair_matrix: shape mismatch for '" + name + "'");
  }
  if (!base.allFinite() || !ft.allFinite()) {
    throw std::invalid_argument("repair_matrix: non-finite input in '" + name + "'");
  }
  const auto d = decompose_delta(ft - base, name);
  MatrixRepair out;
  out.repaired = base + thresholded_delta(d, threshold_scale, &out.spectrum);
  return out;
}

std::string to_string(Disposition d) {
  switch (d) {
    case Disposition::repaired:
      return "repaired";
    case Disposition::passthrough_out_of_scope:
      return "passthrough_out_of_scope";
    case Disposition::passthrough_masked:
      return "passthrough_masked";
    case Disposition::svd_failed:
      return "svd_failed";
  }
  return "?";
}

Eigen::MatrixXd tensor_matrix(const DenseTensor& t) { return t.as_matrix(); }

DenseTensor matrix_to_tensor(const Eigen::MatrixXd& values, const DenseTensor& like) {
  if (values.size() != like.numel()) throw std::invalid_argument("matrix_to_tensor: size mismatch");
  const RowMajor rm = values;
  auto t = DenseTensor::from_values(like.shape(), like.dtype(),
                                    std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
  if (!t.all_finite()) {
    throw std::range_error("result is not representable in " + to_string(like.dtype()) +
                           " (non-finite after rounding)");
  }
  return t;
}

RepairResult repair_checkpoint(const TensorMap& base, const TensorMap& ft, const LayerMask& mask,
                               double threshold_scale, const RunOptions& options) {
  if (!(threshold_scale >= 0.0)) throw std::invalid_argument("threshold_scale must be >= 0");
  const auto start = std::chrono::steady_clock::now();
  const auto ft_only = check_pairing(base, ft, options.unpaired);

  std::vector<std::string> names;
  for (const auto& [name, t] : ft.entries) names.push_back(name);
  std::vector<TensorOutcome> outcomes(names.size());
  std::vector<DenseTensor> tensors(names.size());

  parallel_for(names.size(), options.threads, [&](std::size_t i) {
    const auto& name = names[i];
    const auto& f = ft.at(name);
    auto& out = outcomes[i];
    out.name = name;
    if (!base.contains(name)) {
      out.disposition = Disposition::passthrough_out_of_scope;
      out.warning = "present only in fine-tuned checkpoint";
      tensors[i] = f;
      return;
    }
    const auto scope = scope_of(name, f.shape(), options.min_elements);
    out.scope_reason = scope.reason;
    if (!scope.in_scope) {
      out.disposition = Disposition::passthrough_out_of_scope;
      tensors[i] = f;
      return;
    }
    const Eigen::MatrixXd b = tensor_matrix(base.at(name));
    const Eigen::MatrixXd fm = tensor_matrix(f);
    out.delta_frobenius_sq = (fm - b).squaredNorm();
    if (!mask.matches(name)) {
      out.disposition = Disposition::passthrough_masked;
      out.retained_frobenius_sq = out.delta_frobenius_sq;
      tensors[i] = f;
      return;
    }
    try {
      auto rep = repair_matrix(b, fm, threshold_scale, name);
      out.retained_frobenius_sq = (rep.repaired - b).squaredNorm();
      tensors[i] = matrix_to_tensor(rep.repaired, f);
      out.spectrum = std::move(rep.spectrum);
      out.disposition = Disposition::repaired;
    } catch (const SvdError& e) {
      out.disposition = Disposition::svd_failed;
      out.warning = e.what();
      out.retained_frobenius_sq = out.delta_frobenius_sq;
      tensors[i] = f;
    }
  });

  RepairResult result;
  result.checkpoint.metadata = ft.metadata;
  auto& report = result.report;
  report.threshold_scale = threshold_scale;
  report.mask = mask.name() == "custom" ? mask.pattern() : mask.name();
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    result.checkpoint.entries.emplace(names[i], std::move(tensors[i]));
    num += outcomes[i].retained_frobenius_sq;
    den += outcomes[i].delta_frobenius_sq;
    if (outcomes[i].disposition == Disposition::repaired) {
      ++report.kept_rank_histogram[outcomes[i].spectrum->kept_rank];
    }
  }
  report.per_tensor = std::move(outcomes);
  report.zero_delta = den == 0.0;
  report.retention_r = report.zero_delta ? 1.0 : std::sqrt(num / den);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

Retention frobenius_retention(const TensorMap& base, const TensorMap& ft, const TensorMap& candidate,
                              std::int64_t min_elements) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& [name, f] : ft.entries) {
    if (!base.contains(name)) continue;
    if (!scope_of(name, f.shape(), min_elements).in_scope) continue;
    if (!candidate.contains(name)) {
      throw std::invalid_argument("candidate checkpoint lacks tensor '" + name + "'");
    }
    const auto bv = base.at(name).values();
    const auto fv = f.values();
    const auto cv = candidate.at(name).values();
    if (bv.size() != fv.size() || cv.size() != fv.size()) {
      throw std::invalid_argument("shape mismatch for tensor '" + name + "'");
    }
    for (std::size_t i = 0; i < fv.size(); ++i) {
      const double d = fv[i] - bv[i];
      const double c = cv[i] - bv[i];
      den += d * d;
      num += c * c;
    }
  }
  if (den == 0.0) return Retention{1.0, true};
  return Retention{std::sqrt(num / den), false};
}

std::string report_json(const RepairReport& report) {
  using ojson = nlohmann::ordered_json;
  ojson j;
  j["mask"] = report.mask;
  j["threshold_scale"] = report.threshold_scale;
  j["retention_r"] = report.retention_r;
  j["zero_delta"] = report.zero_delta;
  ojson hist = ojson::object();
  for (const auto& [k, v] : report.kept_rank_histogram) hist[std::to_string(k)] = v;
  j["kept_rank_histogram"] = hist;
  ojson tensors = ojson::array();
  for (const auto& t : report.per_tensor) {
    ojson row;
    row["name"] = t.name;
    row["disposition"] = to_string(t.disposition);
    row["scope_reason"] = to_string(t.scope_reason);
    row["delta_frobenius_sq"] = t.delta_frobenius_sq;
    row["retained_frobenius_sq"] = t.retained_frobenius_sq;
    if (t.spectrum) {
      const auto& s = *t.spectrum;
      row["spectrum"] = {{"m", s.m},
                         {"n", s.n},
                         {"beta", s.beta},
                         {"sigma_hat", s.sigma_hat},
                         {"tau", s.tau},
                         {"edge", s.edge},
                         {"kept_rank", s.kept_rank},
                         {"noise_energy_fraction", s.noise_energy_fraction},
                         {"mp_fit", s.mp_fit},
                         {"zero_delta", s.zero_delta}};
    }
    if (!t.warning.empty()) row["warning"] = t.warning;
    tensors.push_back(std::move(row));
  }
  j["tensors"] = std::move(tensors);
  return j.dump(2) + "\n";
}

void write_spectrum_csv(const RepairReport& report, std::ostream& out) {
  using detail::fmt_double;
  out << kSpectrumCsvHeader << '\n';
  for (const auto& t : report.per_tensor) {
    if (!t.spectrum) continue;
    const auto& s = *t.spectrum;
    out << detail::csv_field(s.name) << ',' << s.m << ',' << s.n << ',' << fmt_double(s.beta) << ','
        << fmt_double(s.sigma_hat) << ',' << fmt_double(s.tau) << ',' << fmt_double(s.edge) << ','
        << s.kept_rank << ',' << fmt_double(s.noise_energy_fraction) << ',' << fmt_double(s.mp_fit)
        << '\n';
  }
}

}  // namespace dgr
