// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/baselines.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "dgrepair/parallel.hpp"

namespace dgr {

namespace {

using ElementFn = std::function<std::vector<double>(const std::string& name, const std::vector<double>& base,
                                                    const std::vector<double>& ft)>;

// Applies fn to every in-scope tensor; everything else passes through at ft.
TensorMap transform_checkpoint(const TensorMap& base, const TensorMap& ft, const RunOptions& options,
                               const ElementFn& fn) {
  check_pairing(base, ft, options.unpaired);
  std::vector<std::string> names;
  for (const auto& [name, t] : ft.entries) names.push_back(name);
  std::vector<DenseTensor> out(names.size());
  parallel_for(names.size(), options.threads, [&](std::size_t i) {
    const auto& name = names[i];
    const auto& f = ft.at(name);
    if (!base.contains(name) || !scope_of(name, f.shape(), options.min_elements).in_scope) {
      out[i] = f;
      return;
    }
    const auto values = fn(name, base.at(name).values(), f.values());
    auto t = DenseTensor::from_values(f.shape(), f.dtype(), values);
    if (!t.all_finite()) {
      throw std::range_error("non-finite result for tensor '" + name + "' after rounding to " +
                             to_string(f.dtype()));
    }
    out[i] = std::move(t);
  });
  TensorMap result;
  result.metadata = ft.metadata;
  for (std::size_t i = 0; i < names.size(); ++i) result.entries.emplace(names[i], std::move(out[i]));
  return result;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

void check_unit(double v, const char* what, bool open_top = false) {
  const bool ok = open_top ? (v >= 0.0 && v < 1.0) : (v >= 0.0 && v <= 1.0);
  if (!ok) {
    throw std::invalid_argument(std::string(what) + " must lie in [0, 1" + (open_top ? ")" : "]") +
                                ", got " + std::to_string(v));
  }
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::wise:
      return "wise";
    case Method::ties:
      return "ties";
    case Method::dare:
      return "dare";
    case Method::dare_linear:
      return "dare_linear";
    case Method::fapm:
      return "fapm";
    case Method::dg_hard:
      return "dg_hard";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "wise" || s == "wise_ft" || s == "task_arithmetic") return Method::wise;
  if (s == "ties") return Method::ties;
  if (s == "dare") return Method::dare;
  if (s == "dare_linear") return Method::dare_linear;
  if (s == "fapm") return Method::fapm;
  if (s == "dg_hard") return Method::dg_hard;
  throw std::invalid_argument("unknown method '" + s + "'");
}

void BaselineConfig::validate() const {
  switch (method) {
    case Method::wise:
      check_unit(knob, "alpha");
      break;
    case Method::ties:
      check_unit(knob, "keep_ratio");
      break;
    case Method::dare:
    case Method::dare_linear:
      check_unit(knob, "drop_prob", true);
      break;
    case Method::fapm:
      check_unit(knob, "revert_rate");
      if (!(epsilon > 0.0)) throw std::invalid_argument("fapm epsilon must be positive");
      break;
    case Method::dg_hard:
      if (!(knob >= 0.0)) throw std::invalid_argument("threshold_scale must be >= 0");
      break;
  }
}

std::int64_t fraction_count(double fraction, std::int64_t count) {
  const double x = fraction * static_cast<double>(count);
  const auto k = static_cast<std::int64_t>(std::ceil(x * (1.0 - 4.0 * DBL_EPSILON)));
  return std::clamp<std::int64_t>(k, 0, count);
}

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

TensorMap wise_ft(const TensorMap& base, const TensorMap& ft, double alpha, const RunOptions& options) {
  check_unit(alpha, "alpha");
  return transform_checkpoint(base, ft, options, [alpha](const std::string&, const auto& b, const auto& f) {
    std::vector<double> out(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out[i] = (1.0 - alpha) * b[i] + alpha * f[i];
    return out;
  });
}

TensorMap ties(const TensorMap& base, const TensorMap& ft, double keep_ratio, double lambda,
               const RunOptions& options) {
  check_unit(keep_ratio, "keep_ratio");
  return transform_checkpoint(base, ft, options, [=](const std::string&, const auto& b, const auto& f) {
    const auto n = static_cast<std::int64_t>(f.size());
    const auto k = fraction_count(keep_ratio, n);
    std::vector<double> d(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) d[i] = f[i] - b[i];
    std::vector<std::int64_t> order(f.size());
    std::iota(order.begin(), order.end(), 0);
    auto larger = [&](std::int64_t x, std::int64_t y) {
      const double ax = std::abs(d[x]);
      const double ay = std::abs(d[y]);
      return ax != ay ? ax > ay : x < y;
    };
    if (k > 0 && k < n) std::nth_element(order.begin(), order.begin() + k, order.end(), larger);
    std::vector<double> out(b.begin(), b.end());
    for (std::int64_t j = 0; j < k; ++j) {
      const auto i = order[j];
      out[i] = lambda == 1.0 ? f[i] : b[i] + lambda * d[i];
    }
    return out;
  });
}

TensorMap dare(const TensorMap& base, const TensorMap& ft, double drop_prob, bool rescale, std::uint64_t seed,
               const RunOptions& options) {
  check_unit(drop_prob, "drop_prob", true);
  const double scale = rescale ? 1.0 / (1.0 - drop_prob) : 1.0;
  return transform_checkpoint(base, ft, options, [=](const std::string& name, const auto& b, const auto& f) {
    std::mt19937_64 gen(splitmix64(seed ^ name_hash(name)));
    std::vector<double> out(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
      if (u < drop_prob) {
        out[i] = b[i];
      } else {
        out[i] = scale == 1.0 ? f[i] : b[i] + scale * (f[i] - b[i]);
      }
    }
    return out;
  });
}

TensorMap fapm(const TensorMap& base, const TensorMap& ft, double revert_rate, double epsilon,
               const RunOptions& options) {
  check_unit(revert_rate, "revert_rate");
  if (!(epsilon > 0.0)) throw std::invalid_argument("fapm epsilon must be positive");
  return transform_checkpoint(base, ft, options, [=](const std::string&, const auto& b, const auto& f) {
    const auto n = static_cast<std::int64_t>(f.size());
    const auto k = fraction_count(revert_rate, n);
    std::vector<double> score(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double d = f[i] - b[i];
      score[i] = d * d / (std::abs(b[i]) + epsilon);
    }
    std::vector<std::int64_t> order(f.size());
    std::iota(order.begin(), order.end(), 0);
    auto lower = [&](std::int64_t x, std::int64_t y) {
      return score[x] != score[y] ? score[x] < score[y] : x < y;
    };
    if (k > 0 && k < n) std::nth_element(order.begin(), order.begin() + k, order.end(), lower);
    std::vector<double> out(f.begin(), f.end());
    for (std::int64_t j = 0; j < k; ++j) out[order[j]] = b[order[j]];
    return out;
  });
}

TensorMap apply_baseline(const BaselineConfig& config, const TensorMap& base, const TensorMap& ft,
                         const RunOptions& options) {
  config.validate();
  switch (config.method) {
    case Method::wise:
      return wise_ft(base, ft, config.knob, options);
    case Method::ties:
      return ties(base, ft, config.knob, config.lambda, options);
    case Method::dare:
      return dare(base, ft, config.knob, true, config.seed, options);
    case Method::dare_linear:
      return dare(base, ft, config.knob, false, config.seed, options);
    case Method::fapm:
      return fapm(base, ft, config.knob, config.epsilon, options);
    case Method::dg_hard:
      return repair_checkpoint(base, ft, LayerMask::preset("ALL"), config.knob, options).checkpoint;
  }
  throw std::logic_error("unhandled method");
}

namespace {

// Threshold-scale sweeps reuse one SVD per tensor.
class DgHardCandidates {
 public:
  DgHardCandidates(const TensorMap& base, const TensorMap& ft, const RunOptions& options)
      : base_(base), ft_(ft), options_(options) {
    check_pairing(base, ft, options.unpaired);
    for (const auto& [name, f] : ft.entries) {
      if (base.contains(name) && scope_of(name, f.shape(), options.min_elements).in_scope) {
        names_.push_back(name);
      }
    }
    decomps_.resize(names_.size());
    parallel_for(names_.size(), options.threads, [&](std::size_t i) {
      const auto& name = names_[i];
      decomps_[i] = decompose_delta(tensor_matrix(ft.at(name)) - tensor_matrix(base.at(name)), name);
    });
  }

  TensorMap at(double c) const {
    TensorMap out;
    out.metadata = ft_.metadata;
    for (const auto& [name, f] : ft_.entries) out.entries.emplace(name, f);
    std::vector<DenseTensor> repaired(names_.size());
    parallel_for(names_.size(), options_.threads, [&](std::size_t i) {
      const auto& name = names_[i];
      const Eigen::MatrixXd w = tensor_matrix(base_.at(name)) + thresholded_delta(decomps_[i], c);
      repaired[i] = matrix_to_tensor(w, ft_.at(name));
    });
    for (std::size_t i = 0; i < names_.size(); ++i) out.entries.at(names_[i]) = std::move(repaired[i]);
    return out;
  }

 private:
  const TensorMap& base_;
  const TensorMap& ft_;
  RunOptions options_;
  std::vector<std::string> names_;
  std::vector<DeltaDecomposition> decomps_;
};

}  // namespace

RollbackOutcome match_rollback(const BaselineConfig& config, const TensorMap& base, const TensorMap& ft,
                               double target_r, double tol, int max_iter, const RunOptions& options) {
  if (!(target_r > 0.0 && target_r < 1.0)) throw std::invalid_argument("target_r must lie in (0, 1)");
  if (!(tol >= 0.0)) throw std::invalid_argument("tol must be >= 0");
  if (config.method == Method::dare) {
    throw std::invalid_argument(
        "dare with rescale has expected retention sqrt(1/(1-p)) >= 1 and cannot reach a target below 1; "
        "use dare_linear");
  }

  std::optional<DgHardCandidates> dg;
  if (config.method == Method::dg_hard) dg.emplace(base, ft, options);

  auto build = [&](double knob) {
    if (dg) return dg->at(knob);
    BaselineConfig c = config;
    c.knob = knob;
    return apply_baseline(c, base, ft, options);
  };

  const bool increasing = config.method == Method::wise || config.method == Method::ties;
  double lo = 0.0;
  double hi = 1.0;
  if (config.method == Method::dare_linear) hi = 0.999;

  RollbackOutcome best;
  best.result.method = config.method;
  best.result.target_r = target_r;
  double best_gap = std::numeric_limits<double>::infinity();
  auto evaluate = [&](double knob) {
    auto map = build(knob);
    const auto ret = frobenius_retention(base, ft, map, options.min_elements);
    if (ret.zero_delta) throw std::invalid_argument("fine-tuned checkpoint equals base; retention undefined");
    const double gap = std::abs(ret.r - target_r);
    if (gap < best_gap) {
      best_gap = gap;
      best.result.knob_found = knob;
      best.result.realized_r = ret.r;
      best.checkpoint = std::move(map);
    }
    return ret.r;
  };

  const double r_lo = evaluate(lo);
  double r_hi = evaluate(hi);
  if (config.method == Method::dg_hard) {
    for (int doubling = 0; r_hi >= target_r; ++doubling) {
      if (doubling > 60) throw std::runtime_error("could not bracket target retention for dg_hard");
      hi *= 2.0;
      r_hi = evaluate(hi);
    }
  }
  const bool brackets = increasing ? (r_lo <= target_r && target_r <= r_hi)
                                   : (r_hi <= target_r && target_r <= r_lo);
  if (!brackets) {
    throw std::invalid_argument("knob interval [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                "] does not bracket target_r " + std::to_string(target_r) + " (r in [" +
                                std::to_string(std::min(r_lo, r_hi)) + ", " +
                                std::to_string(std::max(r_lo, r_hi)) + "])");
  }

  int it = 0;
  while (best_gap > tol && it < max_iter) {
    const double mid = 0.5 * (lo + hi);
    if (!(mid > lo && mid < hi)) break;
    ++it;
    const double r = evaluate(mid);
    if (std::abs(r - target_r) <= tol) break;
    const bool below = r < target_r;
    if (below == increasing) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  best.result.iterations = it;
  best.result.exact = best_gap <= tol;
  return best;
}

std::string rollback_json(const RollbackResult& result) {
  nlohmann::ordered_json j;
  j["method"] = to_string(result.method);
  j["knob"] = result.knob_found;
  j["realized_r"] = result.realized_r;
  j["target_r"] = result.target_r;
  j["iterations"] = result.iterations;
  j["exact"] = result.exact;
  return j.dump(2) + "\n";
}

}  // namespace dgr
