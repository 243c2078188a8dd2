// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/forgetting_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "format.hpp"

namespace dgr {

namespace {

const std::set<std::string> kKnowledge = {"mmlu", "triviaqa", "truthfulqa"};
const std::set<std::string> kCognition = {"arc_challenge", "gsm8k", "hellaswag", "ifeval", "math500", "mnli"};

std::string key_string(const std::string& model, const std::string& task, const std::string& method,
                       const std::string& benchmark) {
  return "(" + model + ", " + task + ", " + method + ", " + benchmark + ")";
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::set<std::string> split_set(const std::string& s) {
  std::set<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.insert(item);
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

double clip100(double v) { return std::clamp(v, 0.0, 100.0); }

}  // namespace

void ScoreTable::add(ScoreRow row) {
  if (!std::isfinite(row.score) || row.score < 0.0 || row.score > 1.0) {
    throw std::invalid_argument("score out of [0, 1] for " +
                                key_string(row.model, row.task, row.method, row.benchmark));
  }
  Key key{row.model, row.task, row.method, row.benchmark};
  if (!scores_.emplace(key, row.score).second) {
    throw std::invalid_argument("duplicate score row " + key_string(row.model, row.task, row.method, row.benchmark));
  }
}

std::optional<double> ScoreTable::find(const std::string& model, const std::string& task, const std::string& method,
                                       const std::string& benchmark) const {
  auto it = scores_.find(Key{model, task, method, benchmark});
  if (it == scores_.end()) return std::nullopt;
  return it->second;
}

double ScoreTable::at(const std::string& model, const std::string& task, const std::string& method,
                      const std::string& benchmark) const {
  auto v = find(model, task, method, benchmark);
  if (!v) throw std::out_of_range("missing score row " + key_string(model, task, method, benchmark));
  return *v;
}

std::vector<std::pair<std::string, std::string>> ScoreTable::cells() const {
  std::set<std::pair<std::string, std::string>> s;
  for (const auto& [k, v] : scores_) s.emplace(std::get<0>(k), std::get<1>(k));
  return {s.begin(), s.end()};
}

std::vector<std::string> ScoreTable::methods() const {
  std::set<std::string> s;
  for (const auto& [k, v] : scores_) s.insert(std::get<2>(k));
  return {s.begin(), s.end()};
}

std::vector<std::string> ScoreTable::heldout_benchmarks(const std::string& model, const std::string& task) const {
  std::vector<std::string> out;
  auto it = scores_.lower_bound(Key{model, task, "base", ""});
  for (; it != scores_.end(); ++it) {
    const auto& [mo, ta, me, be] = it->first;
    if (mo != model || ta != task || me != "base") break;
    if (!is_on_task(task, be)) out.push_back(be);
  }
  return out;
}

ScoreTable parse_scores_jsonl(std::istream& in) {
  ScoreTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      table.add(ScoreRow{j.at("model").get<std::string>(), j.at("task").get<std::string>(),
                         j.at("method").get<std::string>(), j.at("benchmark").get<std::string>(),
                         j.at("score").get<double>()});
    } catch (const std::exception& e) {
      throw std::invalid_argument("score table line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return table;
}

ScoreTable parse_scores_csv(std::istream& in) {
  ScoreTable table;
  std::string line;
  if (!std::getline(in, line)) return table;
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"model", "task", "method", "benchmark", "score"}) {
    if (!col.contains(need)) throw std::invalid_argument(std::string("score CSV lacks column '") + need + "'");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    try {
      if (f.size() != header.size()) throw std::invalid_argument("wrong field count");
      table.add(ScoreRow{f[col["model"]], f[col["task"]], f[col["method"]], f[col["benchmark"]],
                         std::stod(f[col["score"]])});
    } catch (const std::exception& e) {
      throw std::invalid_argument("score table line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return table;
}

ScoreTable load_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open score table '" + path.string() + "'");
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".json") return parse_scores_jsonl(in);
  return parse_scores_csv(in);
}

std::string to_string(TripleClass c) {
  switch (c) {
    case TripleClass::damaged:
      return "damaged";
    case TripleClass::improved:
      return "improved";
    case TripleClass::unchanged:
      return "unchanged";
  }
  return "?";
}

std::size_t PartitionReport::count(TripleClass c) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [c](const PartitionEntry& e) { return e.cls == c; }));
}

const PartitionEntry* PartitionReport::find(const std::string& model, const std::string& task,
                                            const std::string& benchmark) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), std::tie(model, task, benchmark),
                             [](const PartitionEntry& e, const auto& k) {
                               return std::tie(e.model, e.task, e.benchmark) < k;
                             });
  if (it == entries.end() || it->model != model || it->task != task || it->benchmark != benchmark) return nullptr;
  return &*it;
}

double to_pp(double fraction_diff) { return std::round(100.0 * fraction_diff * 1e9) / 1e9; }

PartitionReport partition(const ScoreTable& table, double threshold_pp) {
  if (!(threshold_pp > 0.0)) throw std::invalid_argument("threshold_pp must be positive");
  PartitionReport rep;
  rep.threshold_pp = threshold_pp;
  for (const auto& [model, task] : table.cells()) {
    for (const auto& b : table.heldout_benchmarks(model, task)) {
      const double sb = table.at(model, task, "base", b);
      const double sf = table.at(model, task, "ft", b);
      const double d = to_pp(sf - sb);
      TripleClass c = TripleClass::unchanged;
      if (d <= -threshold_pp) c = TripleClass::damaged;
      if (d >= threshold_pp) c = TripleClass::improved;
      rep.entries.push_back({model, task, b, d, c});
    }
  }
  return rep;
}

bool CohortSpec::includes_model(const std::string& model) const { return !models || models->contains(model); }

bool CohortSpec::includes_benchmark(const std::string& benchmark) const {
  return !benchmarks || benchmarks->contains(benchmark);
}

CohortSpec CohortSpec::overall() { return CohortSpec{}; }
CohortSpec CohortSpec::knowledge() { return CohortSpec{"knowledge", kKnowledge, std::nullopt}; }
CohortSpec CohortSpec::cognition() { return CohortSpec{"cognition", kCognition, std::nullopt}; }
CohortSpec CohortSpec::reasoning() { return CohortSpec{"reasoning", std::nullopt, std::set<std::string>{"qwen3p5_4b"}}; }
CohortSpec CohortSpec::non_reasoning() {
  return CohortSpec{"non_reasoning", std::nullopt, std::set<std::string>{"llama3p2_3b"}};
}

CohortSpec CohortSpec::parse(const std::string& spec) {
  if (spec == "overall") return overall();
  if (spec == "knowledge") return knowledge();
  if (spec == "cognition") return cognition();
  if (spec == "reasoning") return reasoning();
  if (spec == "non_reasoning") return non_reasoning();
  if (spec.starts_with("benchmarks=")) return CohortSpec{spec, split_set(spec.substr(11)), std::nullopt};
  if (spec.starts_with("models=")) return CohortSpec{spec, std::nullopt, split_set(spec.substr(7))};
  throw std::invalid_argument("unknown cohort '" + spec + "'");
}

double harmonic_mean(double a, double b) {
  a = std::max(a, 0.0);
  b = std::max(b, 0.0);
  if (a + b == 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

MethodStats method_stats(const ScoreTable& table, const PartitionReport& part, const std::string& method,
                         const CohortSpec& cohort, const MetricOptions& options) {
  MethodStats st;
  st.method = method;
  st.cohort = cohort.name;
  std::vector<double> healed, preserved, nondmg, ontask;
  for (const auto& [model, task] : table.cells()) {
    if (!cohort.includes_model(model)) continue;
    const auto on = ScoreTable::on_task_benchmark(task);
    ontask.push_back(100.0 * table.at(model, task, method, on) / table.at(model, task, "ft", on));
  }
  for (const auto& e : part.entries) {
    if (!cohort.includes_model(e.model) || !cohort.includes_benchmark(e.benchmark)) continue;
    const double sb = table.at(e.model, e.task, "base", e.benchmark);
    const double sf = table.at(e.model, e.task, "ft", e.benchmark);
    const double sm = table.at(e.model, e.task, method, e.benchmark);
    switch (e.cls) {
      case TripleClass::damaged:
        healed.push_back(100.0 * (sm - sf) / (sb - sf));
        break;
      case TripleClass::improved:
        preserved.push_back(100.0 * (sm - sb) / (sf - sb));
        break;
      case TripleClass::unchanged:
        nondmg.push_back(to_pp(sb - sm) < part.threshold_pp ? 100.0 : 0.0);
        break;
    }
  }
  if (ontask.empty()) throw std::invalid_argument("cohort '" + cohort.name + "' selects no cells");
  st.healed_pct = mean_of(healed);
  st.preserved_pct = mean_of(preserved);
  st.non_damage = mean_of(nondmg);
  st.on_task_retention = *mean_of(ontask);
  st.n_damaged = healed.size();
  st.n_improved = preserved.size();
  st.n_unchanged = nondmg.size();
  st.n_cells = ontask.size();

  auto hm_input = [&](std::optional<double> v) {
    const double x = v.value_or(100.0);
    return options.clip_hm_inputs ? clip100(x) : x;
  };
  st.cleanup = harmonic_mean(hm_input(st.healed_pct), hm_input(st.non_damage));
  st.retention = harmonic_mean(hm_input(st.preserved_pct), hm_input(st.on_task_retention));
  st.combined = harmonic_mean(st.cleanup, st.retention);
  return st;
}

std::vector<double> default_bucket_edges(BucketAxis axis) {
  if (axis == BucketAxis::damage) return {3, 10, 20, 40, std::numeric_limits<double>::infinity()};
  return {3, 10, 20, 40};
}

std::vector<Bucket> bucket_stats(const ScoreTable& table, const PartitionReport& part, const std::string& method,
                                 BucketAxis axis, const std::vector<double>& edges, const CohortSpec& cohort) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()) ||
      std::adjacent_find(edges.begin(), edges.end()) != edges.end()) {
    throw std::invalid_argument("bucket edges must be strictly ascending with at least two values");
  }
  const auto want = axis == BucketAxis::damage ? TripleClass::damaged : TripleClass::improved;
  std::vector<std::vector<double>> vals(edges.size() - 1);
  for (const auto& e : part.entries) {
    if (e.cls != want || !cohort.includes_model(e.model) || !cohort.includes_benchmark(e.benchmark)) continue;
    const double sb = table.at(e.model, e.task, "base", e.benchmark);
    const double sf = table.at(e.model, e.task, "ft", e.benchmark);
    const double sm = table.at(e.model, e.task, method, e.benchmark);
    const double ratio = want == TripleClass::damaged ? 100.0 * (sm - sf) / (sb - sf) : 100.0 * (sm - sb) / (sf - sb);
    const double mag = std::abs(e.delta_ft_pp);
    for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
      if (mag >= edges[k] && mag < edges[k + 1]) {
        vals[k].push_back(ratio);
        break;
      }
    }
  }
  std::vector<Bucket> out;
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
    out.push_back(Bucket{edges[k], edges[k + 1], vals[k].size(), mean_of(vals[k])});
  }
  return out;
}

double cell_combined(const ScoreTable& table, const PartitionReport& part, const std::string& model,
                     const std::string& task, const std::string& method) {
  std::vector<double> healed, preserved;
  for (const auto& b : table.heldout_benchmarks(model, task)) {
    const auto* e = part.find(model, task, b);
    if (e == nullptr) throw std::invalid_argument("partition lacks triple (" + model + ", " + task + ", " + b + ")");
    if (e->cls == TripleClass::unchanged) continue;
    const double sb = table.at(model, task, "base", b);
    const double sf = table.at(model, task, "ft", b);
    const double sm = table.at(model, task, method, b);
    if (e->cls == TripleClass::damaged) {
      healed.push_back(clip100(100.0 * (sm - sf) / (sb - sf)));
    } else {
      preserved.push_back(clip100(100.0 * (sm - sb) / (sf - sb)));
    }
  }
  return harmonic_mean(mean_of(healed).value_or(100.0), mean_of(preserved).value_or(100.0));
}

double cell_balance(const ScoreTable& table, const std::string& model, const std::string& task,
                    const std::string& method) {
  double sum_m = 0.0;
  double sum_b = 0.0;
  for (const auto& b : table.heldout_benchmarks(model, task)) {
    sum_m += table.at(model, task, method, b);
    sum_b += table.at(model, task, "base", b);
  }
  if (sum_b == 0.0) throw std::invalid_argument("base held-out scores are all zero for (" + model + ", " + task + ")");
  const auto on = ScoreTable::on_task_benchmark(task);
  const double sf = table.at(model, task, "ft", on);
  if (sf == 0.0) throw std::invalid_argument("ft on-task score is zero for (" + model + ", " + task + ")");
  return harmonic_mean(100.0 * sum_m / sum_b, 100.0 * table.at(model, task, method, on) / sf);
}

WinnerTable winner_table(const ScoreTable& table, const PartitionReport& part, const std::vector<std::string>& methods,
                         WinnerScore score, const WinnerOptions& options) {
  if (methods.empty()) throw std::invalid_argument("winner_table needs at least one method");
  WinnerTable wt;
  for (const auto& m : methods) wt.wins[m] = 0;
  for (const auto& [model, task] : table.cells()) {
    CellWinner cw{model, task, {}, {}};
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& m : methods) {
      double v = score == WinnerScore::balance ? cell_balance(table, model, task, m)
                                               : cell_combined(table, part, model, task, m);
      cw.scores[m] = v;
      if (options.round_decimals >= 0) {
        const double f = std::pow(10.0, options.round_decimals);
        v = std::round(v * f) / f;
      }
      ranked.emplace_back(v, m);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    if (ranked.size() > 1 && ranked[0].first - ranked[1].first < options.tie_margin) {
      cw.winner = "tie";
      ++wt.ties;
    } else {
      cw.winner = ranked[0].second;
      ++wt.wins[cw.winner];
    }
    wt.cells.push_back(std::move(cw));
  }
  return wt;
}

namespace {

std::vector<std::string> resolve_methods(const ScoreTable& table, const EvalRequest& request) {
  if (!request.methods.empty()) return request.methods;
  std::vector<std::string> out;
  for (const auto& m : table.methods()) {
    if (m != "base" && m != "ft") out.push_back(m);
  }
  return out;
}

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  if (v) return *v;
  return nullptr;
}

nlohmann::ordered_json stats_json(const MethodStats& s) {
  nlohmann::ordered_json j;
  j["method"] = s.method;
  j["cohort"] = s.cohort;
  j["healed_pct"] = opt_json(s.healed_pct);
  j["preserved_pct"] = opt_json(s.preserved_pct);
  j["on_task_retention"] = s.on_task_retention;
  j["non_damage"] = opt_json(s.non_damage);
  j["cleanup"] = s.cleanup;
  j["retention"] = s.retention;
  j["combined"] = s.combined;
  j["n_damaged"] = s.n_damaged;
  j["n_improved"] = s.n_improved;
  j["n_unchanged"] = s.n_unchanged;
  j["n_cells"] = s.n_cells;
  return j;
}

}  // namespace

std::vector<MethodStats> all_method_stats(const ScoreTable& table, const EvalRequest& request) {
  const auto part = partition(table, request.threshold_pp);
  std::vector<MethodStats> out;
  for (const auto& cohort : request.cohorts) {
    for (const auto& m : resolve_methods(table, request)) {
      out.push_back(method_stats(table, part, m, cohort, request.metric_options));
    }
  }
  return out;
}

std::string eval_report_json(const ScoreTable& table, const EvalRequest& request) {
  using ojson = nlohmann::ordered_json;
  const auto part = partition(table, request.threshold_pp);
  const auto methods = resolve_methods(table, request);
  ojson j;
  j["threshold_pp"] = request.threshold_pp;
  j["partition"] = {{"damaged", part.count(TripleClass::damaged)},
                    {"improved", part.count(TripleClass::improved)},
                    {"unchanged", part.count(TripleClass::unchanged)}};
  ojson stats = ojson::array();
  for (const auto& s : all_method_stats(table, request)) stats.push_back(stats_json(s));
  j["method_stats"] = std::move(stats);

  ojson buckets = ojson::object();
  for (const auto& [axis, label] : {std::pair{BucketAxis::damage, "damage"}, std::pair{BucketAxis::improvement, "improvement"}}) {
    ojson per_method = ojson::object();
    for (const auto& m : methods) {
      ojson rows = ojson::array();
      for (const auto& b : bucket_stats(table, part, m, axis, default_bucket_edges(axis))) {
        ojson row;
        row["lo"] = b.lo;
        row["hi"] = std::isinf(b.hi) ? ojson(nullptr) : ojson(b.hi);
        row["n"] = b.n;
        row["mean"] = opt_json(b.mean);
        rows.push_back(std::move(row));
      }
      per_method[m] = std::move(rows);
    }
    buckets[label] = std::move(per_method);
  }
  j["buckets"] = std::move(buckets);

  ojson cells = ojson::array();
  for (const auto& [model, task] : table.cells()) {
    ojson c;
    c["model"] = model;
    c["task"] = task;
    ojson comb = ojson::object();
    ojson bal = ojson::object();
    for (const auto& m : methods) {
      comb[m] = cell_combined(table, part, model, task, m);
      bal[m] = cell_balance(table, model, task, m);
    }
    c["combined"] = std::move(comb);
    c["balance"] = std::move(bal);
    cells.push_back(std::move(c));
  }
  j["cells"] = std::move(cells);

  std::vector<std::string> wm;
  for (const auto& m : request.winner_methods) {
    if (std::find(methods.begin(), methods.end(), m) != methods.end()) wm.push_back(m);
  }
  if (wm.size() >= 2) {
    ojson winners = ojson::object();
    for (const auto& [kind, label] : {std::pair{WinnerScore::balance, "balance"}, std::pair{WinnerScore::combined, "combined"}}) {
      const auto wt = winner_table(table, part, wm, kind, request.winner_options);
      ojson w;
      w["tie_margin"] = request.winner_options.tie_margin;
      w["wins"] = wt.wins;
      w["ties"] = wt.ties;
      ojson rows = ojson::array();
      for (const auto& c : wt.cells) rows.push_back({{"model", c.model}, {"task", c.task}, {"winner", c.winner}});
      w["cells"] = std::move(rows);
      winners[label] = std::move(w);
    }
    j["winners"] = std::move(winners);
  }
  return j.dump(2) + "\n";
}

void write_method_stats_csv(const std::vector<MethodStats>& stats, std::ostream& out) {
  using detail::fmt_double;
  auto opt = [](const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); };
  out << "cohort,method,healed_pct,preserved_pct,on_task_retention,non_damage,cleanup,retention,combined,"
         "n_damaged,n_improved,n_unchanged,n_cells\n";
  for (const auto& s : stats) {
    out << detail::csv_field(s.cohort) << ',' << detail::csv_field(s.method) << ',' << opt(s.healed_pct) << ','
        << opt(s.preserved_pct) << ',' << fmt_double(s.on_task_retention) << ',' << opt(s.non_damage) << ','
        << fmt_double(s.cleanup) << ',' << fmt_double(s.retention) << ',' << fmt_double(s.combined) << ','
        << s.n_damaged << ',' << s.n_improved << ',' << s.n_unchanged << ',' << s.n_cells << '\n';
  }
}

}  // namespace dgr
