// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dgr {

enum class Command { repair, baseline, match_rollback, diagnose, eval, synth_check };
std::string to_string(Command c);

struct RunConfig {
  Command command = Command::repair;
  std::filesystem::path base_path;
  std::filesystem::path ft_path;
  std::filesystem::path out_path;
  std::string mask = "ALL";
  std::string method;  // empty: all methods for eval; required otherwise
  double alpha = 0.5;
  double keep_ratio = 0.2;
  double drop_prob = 0.5;
  bool rescale = true;
  double revert_rate = 0.9;
  double threshold_scale = 1.0;
  double target_r = 0.5;
  double tol = 0.01;
  int max_iter = 40;
  std::filesystem::path scores_path;
  std::vector<std::string> cohorts = {"overall"};
  double threshold_pp = 3.0;
  double tie_margin = 0.5;
  bool clip_hm_inputs = false;
  std::uint64_t seed = 0;
  int threads = 1;
  int seeds = 20;
  bool allow_unpaired = false;
  std::int64_t min_elements = 1024;
  std::optional<std::filesystem::path> config_path;
};

/// Throws std::invalid_argument describing the first problem found.
void validate(const RunConfig& config);

/// Executes one command. Machine-readable summary to `out`, progress and
/// error JSON to `err`. Returns the process exit status.
int run(const RunConfig& config, std::ostream& out, std::ostream& err);

/// Parses flags (and an optional --config file; flags win) and runs.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace dgr
