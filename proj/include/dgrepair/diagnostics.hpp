// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <ostream>
#include <regex>
#include <string>
#include <vector>

#include "dgrepair/repair.hpp"
#include "dgrepair/tensor_store.hpp"

namespace dgr {

struct LayerClass {
  std::string name;
  std::string pattern;  // ECMAScript regex searched in the tensor name
};

/// q/k/v/o projections, gate/up/down projections and the token embedding.
/// Tensors matching none of them fall into an implicit "other" class.
std::vector<LayerClass> default_layer_classes();

struct ClassNoiseRow {
  std::string class_name;
  std::size_t n_tensors = 0;
  std::optional<double> mean_noise;  // mean below-edge energy fraction
  std::optional<double> norm_share;  // class ||delta||^2 / network ||delta||^2
  std::optional<double> product;
};

/// Rows sorted by product descending; classes without members come last
/// with unset statistics. Throws if a tensor matches more than one class.
std::vector<ClassNoiseRow> class_noise_profile(const TensorMap& base, const TensorMap& ft,
                                               const std::vector<LayerClass>& classes,
                                               const RunOptions& options = {});

/// Spectrum of one delta plus MP-fit for the kept and discarded parts, all
/// at the sigma_hat of the full delta.
struct SpectrumRow {
  DeltaSpectrum spectrum;
  double mp_fit_kept = 0.0;
  double mp_fit_discarded = 0.0;
  double delta_frobenius_sq = 0.0;
};

/// In-scope tensors, optionally restricted to names matching `filter`.
std::vector<SpectrumRow> spectrum_report(const TensorMap& base, const TensorMap& ft,
                                         const std::optional<std::string>& filter = std::nullopt,
                                         const RunOptions& options = {});

/// Builds the row from singular values without forming the kept matrix.
SpectrumRow spectrum_row(const DeltaSpectrum& spectrum);

void write_class_noise_csv(const std::vector<ClassNoiseRow>& rows, std::ostream& out);
std::string class_noise_json(const std::vector<ClassNoiseRow>& rows);
void write_spectrum_report_csv(const std::vector<SpectrumRow>& rows, std::ostream& out);
std::string spectrum_report_json(const std::vector<SpectrumRow>& rows);
/// "index value kept" lines for plotting one spectrum.
void write_spectrum_dump(const DeltaSpectrum& spectrum, std::ostream& out);

}  // namespace dgr
