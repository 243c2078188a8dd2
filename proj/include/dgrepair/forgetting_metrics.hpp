// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace dgr {

struct ScoreRow {
  std::string model;
  std::string task;
  std::string method;
  std::string benchmark;
  double score = 0.0;
};

/// Long-form benchmark scores in [0, 1]. A benchmark named "task_<task>" is
/// the on-task benchmark of its cell; every other benchmark is held out.
class ScoreTable {
 public:
  using Key = std::tuple<std::string, std::string, std::string, std::string>;

  void add(ScoreRow row);
  std::optional<double> find(const std::string& model, const std::string& task, const std::string& method,
                             const std::string& benchmark) const;
  /// Throws with the full key when the row is missing.
  double at(const std::string& model, const std::string& task, const std::string& method,
            const std::string& benchmark) const;

  std::vector<std::pair<std::string, std::string>> cells() const;
  std::vector<std::string> methods() const;
  /// Held-out benchmarks scored for the cell's base model, sorted.
  std::vector<std::string> heldout_benchmarks(const std::string& model, const std::string& task) const;
  std::size_t size() const noexcept { return scores_.size(); }

  static bool is_on_task(const std::string& task, const std::string& benchmark) {
    return benchmark == "task_" + task;
  }
  static std::string on_task_benchmark(const std::string& task) { return "task_" + task; }

 private:
  std::map<Key, double> scores_;
};

ScoreTable parse_scores_jsonl(std::istream& in);
ScoreTable parse_scores_csv(std::istream& in);
/// Dispatches on extension: .jsonl / .json -> JSON Lines, otherwise CSV.
ScoreTable load_scores(const std::filesystem::path& path);

enum class TripleClass { damaged, improved, unchanged };
std::string to_string(TripleClass c);

struct PartitionEntry {
  std::string model;
  std::string task;
  std::string benchmark;
  double delta_ft_pp = 0.0;
  TripleClass cls = TripleClass::unchanged;

  bool operator==(const PartitionEntry&) const = default;
};

struct PartitionReport {
  double threshold_pp = 3.0;
  std::vector<PartitionEntry> entries;  // sorted by (model, task, benchmark)

  std::size_t count(TripleClass c) const;
  const PartitionEntry* find(const std::string& model, const std::string& task,
                             const std::string& benchmark) const;
  bool operator==(const PartitionReport&) const = default;
};

/// 100 * x rounded to a 1e-9 pp grid so that table values such as 0.4 - 0.37
/// compare as exactly 3 pp.
double to_pp(double fraction_diff);

PartitionReport partition(const ScoreTable& table, double threshold_pp = 3.0);

struct CohortSpec {
  std::string name = "overall";
  std::optional<std::set<std::string>> benchmarks;  // held-out filter
  std::optional<std::set<std::string>> models;      // cell filter

  bool includes_model(const std::string& model) const;
  bool includes_benchmark(const std::string& benchmark) const;

  static CohortSpec overall();
  static CohortSpec knowledge();
  static CohortSpec cognition();
  static CohortSpec reasoning();
  static CohortSpec non_reasoning();
  /// Preset name, or "benchmarks=a,b" / "models=a,b" for a custom slice.
  static CohortSpec parse(const std::string& spec);
};

/// Harmonic mean with inputs floored at 0; HM(0, 0) = 0.
double harmonic_mean(double a, double b);

struct MetricOptions {
  /// Clip healed / preserved / on-task / non-damage into [0, 100] before the
  /// harmonic means. Off by default: only flooring at 0 is applied.
  bool clip_hm_inputs = false;
};

/// Population statistics of one method over a cohort. Empty D, I or U sets
/// leave the matching sub-statistic unset; the harmonic means then use 100.
struct MethodStats {
  std::string method;
  std::string cohort;
  std::optional<double> healed_pct;
  std::optional<double> preserved_pct;
  double on_task_retention = 0.0;
  std::optional<double> non_damage;
  double cleanup = 0.0;
  double retention = 0.0;
  double combined = 0.0;
  std::size_t n_damaged = 0;
  std::size_t n_improved = 0;
  std::size_t n_unchanged = 0;
  std::size_t n_cells = 0;
};

MethodStats method_stats(const ScoreTable& table, const PartitionReport& part, const std::string& method,
                         const CohortSpec& cohort = CohortSpec::overall(), const MetricOptions& options = {});

enum class BucketAxis { damage, improvement };

struct Bucket {
  double lo = 0.0;
  double hi = 0.0;  // exclusive; may be +inf
  std::size_t n = 0;
  std::optional<double> mean;  // absent when n == 0
};

std::vector<double> default_bucket_edges(BucketAxis axis);

/// Damaged (or improved) triples grouped by |delta_ft_pp| in [lo, hi).
std::vector<Bucket> bucket_stats(const ScoreTable& table, const PartitionReport& part, const std::string& method,
                                 BucketAxis axis, const std::vector<double>& edges,
                                 const CohortSpec& cohort = CohortSpec::overall());

/// Per-cell Combined in percent: clipped per-benchmark ratios, empty side = 100.
double cell_combined(const ScoreTable& table, const PartitionReport& part, const std::string& model,
                     const std::string& task, const std::string& method);

/// HM of held-out mean ratio vs base and on-task ratio vs ft, in percent.
double cell_balance(const ScoreTable& table, const std::string& model, const std::string& task,
                    const std::string& method);

enum class WinnerScore { balance, combined };

struct WinnerOptions {
  /// Scores closer than this (percentage points) are a tie.
  double tie_margin = 0.5;
  /// Round scores to this many decimals before comparing; negative = no rounding.
  int round_decimals = -1;
};

struct CellWinner {
  std::string model;
  std::string task;
  std::map<std::string, double> scores;
  std::string winner;  // method name or "tie"
};

struct WinnerTable {
  std::vector<CellWinner> cells;
  std::map<std::string, std::size_t> wins;
  std::size_t ties = 0;
};

WinnerTable winner_table(const ScoreTable& table, const PartitionReport& part,
                         const std::vector<std::string>& methods, WinnerScore score,
                         const WinnerOptions& options = {});

struct EvalRequest {
  std::vector<std::string> methods;  // empty: every method except base and ft
  std::vector<CohortSpec> cohorts = {CohortSpec::overall()};
  double threshold_pp = 3.0;
  MetricOptions metric_options;
  WinnerOptions winner_options;
  std::vector<std::string> winner_methods = {"dg_hard", "wise_ft"};
};

/// Full JSON report: partition counts, method stats per cohort, buckets,
/// per-cell Combined and balance, winner tables.
std::string eval_report_json(const ScoreTable& table, const EvalRequest& request);
/// One CSV row per (cohort, method).
void write_method_stats_csv(const std::vector<MethodStats>& stats, std::ostream& out);
std::vector<MethodStats> all_method_stats(const ScoreTable& table, const EvalRequest& request);

}  // namespace dgr
