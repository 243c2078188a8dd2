// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/cli.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <regex>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "dgrepair/baselines.hpp"
#include "dgrepair/diagnostics.hpp"
#include "dgrepair/forgetting_metrics.hpp"
#include "dgrepair/repair.hpp"
#include "dgrepair/synth.hpp"
#include "dgrepair/tensor_store.hpp"
#include "dgrepair/version.hpp"

namespace dgr {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

bool needs_checkpoints(Command c) {
  return c == Command::repair || c == Command::baseline || c == Command::match_rollback || c == Command::diagnose;
}

void require_file(const fs::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string(flag) + " is required for this command");
  if (!fs::is_regular_file(p)) throw ConfigError(std::string(flag) + " '" + p.string() + "' is not a readable file");
}

void require_out_parent(const fs::path& p) {
  if (p.empty()) throw ConfigError("--out is required for this command");
  const auto parent = fs::absolute(p).parent_path();
  if (!fs::is_directory(parent)) {
    throw ConfigError("output directory '" + parent.string() + "' does not exist");
  }
}

fs::path sidecar(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

ojson config_echo(const RunConfig& c) {
  ojson j;
  j["command"] = to_string(c.command);
  j["base"] = c.base_path.string();
  j["ft"] = c.ft_path.string();
  j["out"] = c.out_path.string();
  j["mask"] = c.mask;
  j["method"] = c.method;
  j["alpha"] = c.alpha;
  j["keep_ratio"] = c.keep_ratio;
  j["drop_prob"] = c.drop_prob;
  j["rescale"] = c.rescale;
  j["revert_rate"] = c.revert_rate;
  j["threshold_scale"] = c.threshold_scale;
  j["target_r"] = c.target_r;
  j["tol"] = c.tol;
  j["max_iter"] = c.max_iter;
  j["scores"] = c.scores_path.string();
  j["cohort"] = c.cohorts;
  j["threshold_pp"] = c.threshold_pp;
  j["tie_margin"] = c.tie_margin;
  j["clip_hm_inputs"] = c.clip_hm_inputs;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["seeds"] = c.seeds;
  j["allow_unpaired"] = c.allow_unpaired;
  j["min_elements"] = c.min_elements;
  j["config"] = c.config_path ? c.config_path->string() : std::string();
  return j;
}

void write_manifest(const fs::path& path, const RunConfig& c, const std::vector<fs::path>& inputs,
                    const std::vector<fs::path>& outputs, double wall_seconds) {
  ojson j;
  j["tool"] = "dgrepair";
  j["version"] = kVersion;
  j["config"] = config_echo(c);
  ojson in = ojson::object();
  for (const auto& p : inputs) in[p.string()] = sha256_file(p);
  j["inputs"] = std::move(in);
  ojson out = ojson::object();
  for (const auto& p : outputs) out[p.string()] = sha256_file(p);
  j["outputs"] = std::move(out);
  j["wall_seconds"] = wall_seconds;
  write_text(path, j.dump(2) + "\n");
}

RunOptions run_options(const RunConfig& c) {
  RunOptions o;
  o.threads = c.threads;
  o.min_elements = c.min_elements;
  o.unpaired = c.allow_unpaired ? UnpairedPolicy::passthrough_ft : UnpairedPolicy::error;
  return o;
}

BaselineConfig baseline_config(const RunConfig& c) {
  if (c.method.empty()) throw ConfigError("--method is required for this command");
  BaselineConfig b;
  b.method = method_from_string(c.method);
  if (b.method == Method::dare && !c.rescale) b.method = Method::dare_linear;
  switch (b.method) {
    case Method::wise:
      b.knob = c.alpha;
      break;
    case Method::ties:
      b.knob = c.keep_ratio;
      break;
    case Method::dare:
    case Method::dare_linear:
      b.knob = c.drop_prob;
      break;
    case Method::fapm:
      b.knob = c.revert_rate;
      break;
    case Method::dg_hard:
      b.knob = c.threshold_scale;
      break;
  }
  b.seed = c.seed;
  return b;
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char ch : name) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_' || ch == '-') ? ch : '_';
  return out;
}

struct Loaded {
  TensorMap base;
  TensorMap ft;
};

Loaded load_pair(const RunConfig& c, std::ostream& err) {
  err << "[dgrepair] loading " << c.base_path.string() << '\n';
  Loaded l{load_checkpoint(c.base_path), {}};
  err << "[dgrepair] loading " << c.ft_path.string() << '\n';
  l.ft = load_checkpoint(c.ft_path);
  return l;
}

std::vector<fs::path> run_repair(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto pair = load_pair(c, err);
  const auto mask = LayerMask::parse(c.mask);
  err << "[dgrepair] repairing with mask " << c.mask << " at threshold scale " << c.threshold_scale << '\n';
  const auto res = repair_checkpoint(pair.base, pair.ft, mask, c.threshold_scale, run_options(c));
  save_checkpoint(res.checkpoint, c.out_path);
  const auto report_path = sidecar(c.out_path, ".report.json");
  const auto csv_path = sidecar(c.out_path, ".spectrum.csv");
  write_text(report_path, report_json(res.report));
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  write_spectrum_csv(res.report, csv);
  csv.close();
  std::map<std::string, int> counts;
  for (const auto& t : res.report.per_tensor) ++counts[to_string(t.disposition)];
  ojson s;
  s["command"] = "repair";
  s["retention_r"] = res.report.retention_r;
  s["zero_delta"] = res.report.zero_delta;
  s["dispositions"] = counts;
  out << s.dump() << '\n';
  return {c.out_path, report_path, csv_path};
}

std::vector<fs::path> run_baseline(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto pair = load_pair(c, err);
  const auto cfg = baseline_config(c);
  err << "[dgrepair] applying " << to_string(cfg.method) << " with knob " << cfg.knob << '\n';
  const auto map = apply_baseline(cfg, pair.base, pair.ft, run_options(c));
  save_checkpoint(map, c.out_path);
  const auto ret = frobenius_retention(pair.base, pair.ft, map, c.min_elements);
  ojson s;
  s["command"] = "baseline";
  s["method"] = to_string(cfg.method);
  s["knob"] = cfg.knob;
  if (cfg.method == Method::dare || cfg.method == Method::dare_linear) s["seed"] = cfg.seed;
  s["realized_r"] = ret.r;
  s["zero_delta"] = ret.zero_delta;
  const auto report_path = sidecar(c.out_path, ".report.json");
  write_text(report_path, s.dump(2) + "\n");
  out << s.dump() << '\n';
  return {c.out_path, report_path};
}

std::vector<fs::path> run_rollback(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto pair = load_pair(c, err);
  const auto cfg = baseline_config(c);
  err << "[dgrepair] bisecting " << to_string(cfg.method) << " to r=" << c.target_r << '\n';
  const auto res = match_rollback(cfg, pair.base, pair.ft, c.target_r, c.tol, c.max_iter, run_options(c));
  save_checkpoint(res.checkpoint, c.out_path);
  const auto json_path = sidecar(c.out_path, ".rollback.json");
  const auto text = rollback_json(res.result);
  write_text(json_path, text);
  out << nlohmann::json::parse(text).dump() << '\n';
  return {c.out_path, json_path};
}

std::vector<fs::path> run_diagnose(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto pair = load_pair(c, err);
  fs::create_directories(c.out_path);
  const auto opts = run_options(c);
  err << "[dgrepair] layer-class noise profile\n";
  const auto classes = class_noise_profile(pair.base, pair.ft, default_layer_classes(), opts);
  err << "[dgrepair] spectrum report\n";
  std::optional<std::string> filter;
  if (c.mask != "ALL") filter = LayerMask::parse(c.mask).pattern();
  const auto rows = spectrum_report(pair.base, pair.ft, filter, opts);

  std::vector<fs::path> written;
  auto emit = [&](const std::string& file, const std::string& text) {
    const auto p = c.out_path / file;
    write_text(p, text);
    written.push_back(p);
  };
  std::ostringstream cls_csv, spec_csv;
  write_class_noise_csv(classes, cls_csv);
  write_spectrum_report_csv(rows, spec_csv);
  emit("class_noise.csv", cls_csv.str());
  emit("class_noise.json", class_noise_json(classes));
  emit("spectrum.csv", spec_csv.str());
  emit("spectrum.json", spectrum_report_json(rows));
  fs::create_directories(c.out_path / "spectra");
  for (const auto& r : rows) {
    std::ostringstream dump;
    write_spectrum_dump(r.spectrum, dump);
    emit("spectra/" + sanitize(r.spectrum.name) + ".dat", dump.str());
  }
  ojson s;
  s["command"] = "diagnose";
  s["tensors"] = rows.size();
  ojson top = ojson::array();
  for (const auto& r : classes) {
    if (r.product) top.push_back({{"class", r.class_name}, {"product", *r.product}});
  }
  s["classes"] = std::move(top);
  out << s.dump() << '\n';
  return written;
}

std::vector<fs::path> run_eval(const RunConfig& c, std::ostream& out, std::ostream& err) {
  err << "[dgrepair] loading scores " << c.scores_path.string() << '\n';
  const auto table = load_scores(c.scores_path);
  EvalRequest req;
  if (!c.method.empty() && c.method != "all") {
    std::stringstream ss(c.method);
    std::string m;
    while (std::getline(ss, m, ',')) {
      if (!m.empty()) req.methods.push_back(m);
    }
  }
  req.cohorts.clear();
  for (const auto& name : c.cohorts) req.cohorts.push_back(CohortSpec::parse(name));
  req.threshold_pp = c.threshold_pp;
  req.metric_options.clip_hm_inputs = c.clip_hm_inputs;
  req.winner_options.tie_margin = c.tie_margin;
  const auto known = table.methods();
  for (const auto& m : req.methods) {
    if (std::find(known.begin(), known.end(), m) == known.end()) {
      throw ConfigError("method '" + m + "' has no rows in the score table");
    }
  }

  fs::create_directories(c.out_path);
  const auto report_path = c.out_path / "report.json";
  const auto csv_path = c.out_path / "method_stats.csv";
  write_text(report_path, eval_report_json(table, req));
  const auto stats = all_method_stats(table, req);
  std::ostringstream csv;
  write_method_stats_csv(stats, csv);
  write_text(csv_path, csv.str());
  ojson s;
  s["command"] = "eval";
  ojson rows = ojson::array();
  for (const auto& st : stats) {
    rows.push_back({{"cohort", st.cohort}, {"method", st.method}, {"combined", st.combined}});
  }
  s["combined"] = std::move(rows);
  out << s.dump() << '\n';
  return {report_path, csv_path};
}

std::vector<fs::path> run_synth_check(const RunConfig& c, std::ostream& out, std::ostream& err, bool& all_pass) {
  err << "[dgrepair] synthetic property suite over " << c.seeds << " seeds\n";
  SynthCheckOptions o;
  o.seed = c.seed;
  o.seeds = c.seeds;
  o.threads = c.threads;
  const auto verdicts = synth_check(o);
  all_pass = std::all_of(verdicts.begin(), verdicts.end(), [](const PropertyVerdict& v) { return v.pass; });
  const auto text = verdicts_json(verdicts);
  out << nlohmann::json::parse(text).dump() << '\n';
  if (c.out_path.empty()) return {};
  write_text(c.out_path, text);
  return {c.out_path};
}

void emit_error(std::ostream& err, const std::string& kind, const std::string& message,
                const std::optional<std::string>& tensor = std::nullopt,
                const std::optional<std::uint64_t>& offset = std::nullopt) {
  ojson e;
  e["error"]["kind"] = kind;
  e["error"]["message"] = message;
  if (tensor && !tensor->empty()) e["error"]["tensor"] = *tensor;
  if (offset) e["error"]["offset"] = *offset;
  err << e.dump() << '\n';
}

}  // namespace

std::string to_string(Command c) {
  switch (c) {
    case Command::repair:
      return "repair";
    case Command::baseline:
      return "baseline";
    case Command::match_rollback:
      return "match-rollback";
    case Command::diagnose:
      return "diagnose";
    case Command::eval:
      return "eval";
    case Command::synth_check:
      return "synth-check";
  }
  return "?";
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("SHA-256 init failed");
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

void validate(const RunConfig& c) {
  if (c.threads < 1) throw ConfigError("--threads must be >= 1");
  if (c.min_elements < 1) throw ConfigError("--min-elements must be >= 1");
  if (needs_checkpoints(c.command)) {
    require_file(c.base_path, "--base");
    require_file(c.ft_path, "--ft");
  }
  switch (c.command) {
    case Command::repair:
      LayerMask::parse(c.mask);
      if (!(c.threshold_scale >= 0.0)) throw ConfigError("--threshold-scale must be >= 0");
      require_out_parent(c.out_path);
      break;
    case Command::baseline:
      baseline_config(c).validate();
      require_out_parent(c.out_path);
      break;
    case Command::match_rollback:
      baseline_config(c);
      if (!(c.target_r > 0.0 && c.target_r < 1.0)) throw ConfigError("--target-r must lie in (0, 1)");
      if (!(c.tol >= 0.0)) throw ConfigError("--tol must be >= 0");
      if (c.max_iter < 1) throw ConfigError("--max-iter must be >= 1");
      require_out_parent(c.out_path);
      break;
    case Command::diagnose:
      LayerMask::parse(c.mask);
      require_out_parent(c.out_path);
      break;
    case Command::eval:
      require_file(c.scores_path, "--scores");
      for (const auto& name : c.cohorts) CohortSpec::parse(name);
      if (!(c.threshold_pp > 0.0)) throw ConfigError("--threshold-pp must be positive");
      if (!(c.tie_margin >= 0.0)) throw ConfigError("--tie-margin must be >= 0");
      require_out_parent(c.out_path);
      break;
    case Command::synth_check:
      if (c.seeds < 1) throw ConfigError("--seeds must be >= 1");
      if (!c.out_path.empty()) require_out_parent(c.out_path);
      break;
  }
}

int run(const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    validate(config);
  } catch (const std::invalid_argument& e) {
    emit_error(err, "config", e.what());
    return 2;
  }
  const auto start = std::chrono::steady_clock::now();
  try {
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;
    fs::path manifest;
    bool all_pass = true;
    switch (config.command) {
      case Command::repair:
        outputs = run_repair(config, out, err);
        break;
      case Command::baseline:
        outputs = run_baseline(config, out, err);
        break;
      case Command::match_rollback:
        outputs = run_rollback(config, out, err);
        break;
      case Command::diagnose:
        outputs = run_diagnose(config, out, err);
        break;
      case Command::eval:
        outputs = run_eval(config, out, err);
        break;
      case Command::synth_check:
        outputs = run_synth_check(config, out, err, all_pass);
        break;
    }
    if (needs_checkpoints(config.command)) inputs = {config.base_path, config.ft_path};
    if (config.command == Command::eval) inputs = {config.scores_path};
    if (config.config_path) inputs.push_back(*config.config_path);
    if (config.command == Command::diagnose || config.command == Command::eval) {
      manifest = config.out_path / "manifest.json";
    } else if (!config.out_path.empty()) {
      manifest = sidecar(config.out_path, ".manifest.json");
    }
    if (!manifest.empty()) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      write_manifest(manifest, config, inputs, outputs, wall);
    }
    if (!all_pass) {
      emit_error(err, "property", "one or more synthetic properties failed");
      return 1;
    }
    return 0;
  } catch (const CheckpointError& e) {
    emit_error(err, "checkpoint", e.what(), e.tensor(), e.offset());
  } catch (const ConfigError& e) {
    emit_error(err, "config", e.what());
    return 2;
  } catch (const std::exception& e) {
    emit_error(err, "runtime", e.what());
  }
  return 1;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig c;
  CLI::App app{"Spectral repair of fine-tuning deltas, post-hoc baselines and forgetting metrics", "dgrepair"};
  app.set_version_flag("--version", std::string(kVersion));
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_file;
  app.set_config("--config", "", "Config file mirroring the long flags (key = value); flags win");
  app.add_option("--base", c.base_path, "Base checkpoint");
  app.add_option("--ft", c.ft_path, "Fine-tuned checkpoint");
  app.add_option("--out", c.out_path, "Output checkpoint (repair/baseline/match-rollback) or directory (diagnose/eval)");
  app.add_option("--mask", c.mask, "ALL, mlp_only, attn_only, gate_up, or a regex over tensor names");
  app.add_option("--method", c.method,
                 "baseline: wise|ties|dare|dare_linear|fapm|dg_hard; eval: comma list of score-table methods or 'all'");
  app.add_option("--alpha", c.alpha, "WiSE-FT interpolation weight");
  app.add_option("--keep-ratio", c.keep_ratio, "TIES fraction of entries kept per tensor");
  app.add_option("--drop-prob", c.drop_prob, "DARE drop probability");
  app.add_option("--rescale", c.rescale, "DARE survivor rescaling by 1/(1-p)");
  app.add_option("--revert-rate", c.revert_rate, "FAPM fraction of entries reverted to base");
  app.add_option("--threshold-scale", c.threshold_scale, "Multiplier on the hard threshold");
  app.add_option("--target-r", c.target_r, "Target Frobenius retention for match-rollback");
  app.add_option("--tol", c.tol, "Retention tolerance for match-rollback");
  app.add_option("--max-iter", c.max_iter, "Bisection iteration cap");
  app.add_option("--scores", c.scores_path, "Score table (.jsonl or .csv)");
  app.add_option("--cohort", c.cohorts, "overall, knowledge, cognition, reasoning, non_reasoning, benchmarks=.., models=..");
  app.add_option("--threshold-pp", c.threshold_pp, "Partition threshold in percentage points");
  app.add_option("--tie-margin", c.tie_margin, "Winner-table tie margin in percentage points");
  app.add_flag("--clip-hm-inputs", c.clip_hm_inputs, "Clip cohort sub-statistics to [0,100] before harmonic means");
  app.add_option("--seed", c.seed, "Seed for DARE and synthetic checks");
  app.add_option("--threads", c.threads, "Worker threads");
  app.add_option("--seeds", c.seeds, "Seeds per synthetic property");
  app.add_flag("--allow-unpaired", c.allow_unpaired, "Pass tensors present only in the fine-tuned checkpoint through");
  app.add_option("--min-elements", c.min_elements, "Minimum element count for a tensor to be repaired");

  const std::map<std::string, Command> commands = {
      {"repair", Command::repair},     {"baseline", Command::baseline}, {"match-rollback", Command::match_rollback},
      {"diagnose", Command::diagnose}, {"eval", Command::eval},         {"synth-check", Command::synth_check}};
  const std::map<std::string, std::string> help = {
      {"repair", "Hard-threshold every in-scope delta and write the repaired checkpoint"},
      {"baseline", "Apply one post-hoc baseline"},
      {"match-rollback", "Bisect a method's knob to a target Frobenius retention"},
      {"diagnose", "Layer-class noise profile and per-tensor spectrum reports"},
      {"eval", "Partition-conditional forgetting metrics from a score table"},
      {"synth-check", "Synthetic signal-plus-noise property suite"}};
  for (const auto& [name, cmd] : commands) app.add_subcommand(name, help.at(name));

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    emit_error(err, "usage", e.what());
    return 2;
  }
  for (const auto& [name, cmd] : commands) {
    if (app.got_subcommand(name)) c.command = cmd;
  }
  if (auto* opt = app.get_config_ptr(); opt != nullptr && opt->count() > 0) {
    c.config_path = fs::path(opt->as<std::string>());
  }
  return run(c, out, err);
}

}  // namespace dgr
