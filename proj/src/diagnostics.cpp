// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/diagnostics.hpp"

#include <algorithm>
#include <stdexcept>

#include <json.hpp>

#include "dgrepair/parallel.hpp"
#include "dgrepair/rmt.hpp"
#include "format.hpp"

namespace dgr {

namespace {

struct TensorStat {
  std::string name;
  double noise_fraction = 0.0;
  double frob_sq = 0.0;
  DeltaSpectrum spectrum;
};

std::vector<std::string> in_scope_names(const TensorMap& base, const TensorMap& ft, const RunOptions& options) {
  check_pairing(base, ft, options.unpaired);
  std::vector<std::string> names;
  for (const auto& [name, f] : ft.entries) {
    if (base.contains(name) && scope_of(name, f.shape(), options.min_elements).in_scope) names.push_back(name);
  }
  return names;
}

std::vector<TensorStat> collect(const TensorMap& base, const TensorMap& ft, const std::vector<std::string>& names,
                                const RunOptions& options) {
  std::vector<TensorStat> stats(names.size());
  parallel_for(names.size(), options.threads, [&](std::size_t i) {
    const Eigen::MatrixXd d = tensor_matrix(ft.at(names[i])) - tensor_matrix(base.at(names[i]));
    const auto dec = decompose_delta(d, names[i], false);
    stats[i].name = names[i];
    stats[i].spectrum = describe_spectrum(dec);
    stats[i].noise_fraction = stats[i].spectrum.noise_energy_fraction;
    stats[i].frob_sq = d.squaredNorm();
  });
  return stats;
}

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  if (v) return *v;
  return nullptr;
}

}  // namespace

std::vector<LayerClass> default_layer_classes() {
  return {
      {"attn.q_proj", R"((self_attn|attn)\.q_proj(\.|$))"},
      {"attn.k_proj", R"((self_attn|attn)\.k_proj(\.|$))"},
      {"attn.v_proj", R"((self_attn|attn)\.v_proj(\.|$))"},
      {"attn.o_proj", R"((self_attn|attn)\.o_proj(\.|$))"},
      {"mlp.gate_proj", R"(mlp\.gate_proj(\.|$))"},
      {"mlp.up_proj", R"(mlp\.up_proj(\.|$))"},
      {"mlp.down_proj", R"(mlp\.down_proj(\.|$))"},
      {"embed_tokens", R"(embed_tokens(\.|$))"},
  };
}

std::vector<ClassNoiseRow> class_noise_profile(const TensorMap& base, const TensorMap& ft,
                                               const std::vector<LayerClass>& classes, const RunOptions& options) {
  std::vector<std::regex> res;
  for (const auto& c : classes) {
    if (c.name == "other") throw std::invalid_argument("class name 'other' is reserved for unmatched tensors");
    res.emplace_back(c.pattern, std::regex::ECMAScript);
  }
  const auto names = in_scope_names(base, ft, options);
  // Resolve membership first so overlaps fail before any SVD work.
  std::vector<std::size_t> member_of(names.size(), classes.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (!std::regex_search(names[i], res[c])) continue;
      if (member_of[i] != classes.size()) {
        throw std::invalid_argument("tensor '" + names[i] + "' matches both class '" + classes[member_of[i]].name +
                                    "' and '" + classes[c].name + "'");
      }
      member_of[i] = c;
    }
  }
  const auto stats = collect(base, ft, names, options);

  std::vector<ClassNoiseRow> rows(classes.size() + 1);
  std::vector<double> noise_sum(rows.size(), 0.0);
  std::vector<double> frob_sum(rows.size(), 0.0);
  for (std::size_t c = 0; c < classes.size(); ++c) rows[c].class_name = classes[c].name;
  rows.back().class_name = "other";
  double total = 0.0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto c = member_of[i];
    ++rows[c].n_tensors;
    noise_sum[c] += stats[i].noise_fraction;
    frob_sum[c] += stats[i].frob_sq;
    total += stats[i].frob_sq;
  }
  for (std::size_t c = 0; c < rows.size(); ++c) {
    if (rows[c].n_tensors == 0) continue;
    rows[c].mean_noise = noise_sum[c] / static_cast<double>(rows[c].n_tensors);
    if (total > 0.0) {
      rows[c].norm_share = frob_sum[c] / total;
      rows[c].product = *rows[c].mean_noise * *rows[c].norm_share;
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ClassNoiseRow& a, const ClassNoiseRow& b) {
    if (a.product.has_value() != b.product.has_value()) return a.product.has_value();
    return a.product.value_or(0.0) > b.product.value_or(0.0);
  });
  return rows;
}

SpectrumRow spectrum_row(const DeltaSpectrum& spectrum) {
  SpectrumRow row;
  row.spectrum = spectrum;
  const auto& s = spectrum.singulars;
  const auto k = static_cast<std::size_t>(spectrum.kept_rank);
  std::vector<double> kept(s.size(), 0.0);
  std::vector<double> discarded(s.size(), 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    row.delta_frobenius_sq += s[i] * s[i];
    (i < k ? kept : discarded)[i] = s[i];
  }
  if (!s.empty()) {
    const auto max_dim = std::max(spectrum.m, spectrum.n);
    row.mp_fit_kept = mp_fit(kept, spectrum.sigma_hat, spectrum.beta, max_dim);
    row.mp_fit_discarded = mp_fit(discarded, spectrum.sigma_hat, spectrum.beta, max_dim);
  }
  return row;
}

std::vector<SpectrumRow> spectrum_report(const TensorMap& base, const TensorMap& ft,
                                         const std::optional<std::string>& filter, const RunOptions& options) {
  auto names = in_scope_names(base, ft, options);
  if (filter) {
    const std::regex re(*filter, std::regex::ECMAScript);
    std::erase_if(names, [&](const std::string& n) { return !std::regex_search(n, re); });
  }
  const auto stats = collect(base, ft, names, options);
  std::vector<SpectrumRow> rows;
  rows.reserve(stats.size());
  for (const auto& st : stats) rows.push_back(spectrum_row(st.spectrum));
  return rows;
}

void write_class_noise_csv(const std::vector<ClassNoiseRow>& rows, std::ostream& out) {
  using detail::fmt_double;
  auto opt = [](const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); };
  out << "class,n_tensors,mean_noise,norm_share,product\n";
  for (const auto& r : rows) {
    out << detail::csv_field(r.class_name) << ',' << r.n_tensors << ',' << opt(r.mean_noise) << ','
        << opt(r.norm_share) << ',' << opt(r.product) << '\n';
  }
}

std::string class_noise_json(const std::vector<ClassNoiseRow>& rows) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["class"] = r.class_name;
    o["n_tensors"] = r.n_tensors;
    o["mean_noise"] = opt_json(r.mean_noise);
    o["norm_share"] = opt_json(r.norm_share);
    o["product"] = opt_json(r.product);
    j.push_back(std::move(o));
  }
  return j.dump(2) + "\n";
}

void write_spectrum_report_csv(const std::vector<SpectrumRow>& rows, std::ostream& out) {
  using detail::fmt_double;
  out << "name,m,n,beta,sigma_hat,tau,edge,kept_rank,noise_energy_fraction,mp_fit,mp_fit_kept,mp_fit_discarded,"
         "zero_delta\n";
  for (const auto& r : rows) {
    const auto& s = r.spectrum;
    out << detail::csv_field(s.name) << ',' << s.m << ',' << s.n << ',' << fmt_double(s.beta) << ','
        << fmt_double(s.sigma_hat) << ',' << fmt_double(s.tau) << ',' << fmt_double(s.edge) << ',' << s.kept_rank
        << ',' << fmt_double(s.noise_energy_fraction) << ',' << fmt_double(s.mp_fit) << ','
        << fmt_double(r.mp_fit_kept) << ',' << fmt_double(r.mp_fit_discarded) << ',' << (s.zero_delta ? 1 : 0)
        << '\n';
  }
}

std::string spectrum_report_json(const std::vector<SpectrumRow>& rows) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    const auto& s = r.spectrum;
    nlohmann::ordered_json o;
    o["name"] = s.name;
    o["m"] = s.m;
    o["n"] = s.n;
    o["beta"] = s.beta;
    o["sigma_hat"] = s.sigma_hat;
    o["tau"] = s.tau;
    o["edge"] = s.edge;
    o["kept_rank"] = s.kept_rank;
    o["noise_energy_fraction"] = s.noise_energy_fraction;
    o["mp_fit"] = s.mp_fit;
    o["mp_fit_kept"] = r.mp_fit_kept;
    o["mp_fit_discarded"] = r.mp_fit_discarded;
    o["zero_delta"] = s.zero_delta;
    o["singulars"] = s.singulars;
    j.push_back(std::move(o));
  }
  return j.dump(2) + "\n";
}

void write_spectrum_dump(const DeltaSpectrum& spectrum, std::ostream& out) {
  out << "# index value kept  (" << spectrum.name << ", tau=" << detail::fmt_double(spectrum.tau)
      << ", edge=" << detail::fmt_double(spectrum.edge) << ")\n";
  for (std::size_t i = 0; i < spectrum.singulars.size(); ++i) {
    out << i << ' ' << detail::fmt_double(spectrum.singulars[i]) << ' '
        << (static_cast<std::int64_t>(i) < spectrum.kept_rank ? 1 : 0) << '\n';
  }
}

}  // namespace dgr
