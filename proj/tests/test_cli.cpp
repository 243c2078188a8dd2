// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "dgrepair/cli.hpp"
#include "dgrepair/repair.hpp"
#include "support.hpp"

using namespace dgr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dgrepair");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Progress goes to stderr too; the error object is the last line.
json last_json_line(const std::string& text) {
  std::istringstream in(text);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  return json::parse(last);
}

json read_json(const fs::path& p) { return json::parse(std::ifstream(p)); }

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh directory holding a synthetic base/ft pair.
struct Workspace {
  fs::path dir;
  fs::path base, ft;

  explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / ("dgr_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto pair = test::synthetic_pair(100);
    base = dir / "base.safetensors";
    ft = dir / "ft.safetensors";
    save_checkpoint(pair.base, base);
    save_checkpoint(pair.ft, ft);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string operator/(const std::string& f) const { return (dir / f).string(); }
};

}  // namespace

TEST_CASE("repair with a mask") {
  Workspace ws("mask");
  const auto r = cli({"repair", "--base", ws.base.string(), "--ft", ws.ft.string(), "--out", ws / "out.safetensors",
                      "--mask", "gate_up"});
  REQUIRE(r.code == 0);
  const auto summary = json::parse(r.out);
  CHECK(summary["command"] == "repair");
  const auto report = read_json(ws / "out.safetensors.report.json");
  for (const auto& t : report["tensors"]) {
    const std::string name = t["name"];
    const std::string disp = t["disposition"];
    CAPTURE(name);
    if (name.find("gate_proj") != std::string::npos || name.find("up_proj") != std::string::npos) {
      CHECK(disp == "repaired");
    } else if (disp != "passthrough_out_of_scope") {
      CHECK(disp == "passthrough_masked");
    }
  }
  CHECK(fs::exists(ws / "out.safetensors.spectrum.csv"));
  const auto manifest = read_json(ws / "out.safetensors.manifest.json");
  CHECK(manifest["inputs"][ws.base.string()] == sha256_file(ws.base));
  CHECK(manifest["outputs"][ws / "out.safetensors"] == sha256_file(ws / "out.safetensors"));
  CHECK(manifest["outputs"].size() == 3);
  CHECK(manifest["config"]["mask"] == "gate_up");
  CHECK(load_checkpoint(ws / "out.safetensors").size() == load_checkpoint(ws.ft).size());
}

TEST_CASE("known digest") {
  Workspace ws("digest");
  std::ofstream(ws / "abc.txt") << "abc";
  CHECK(sha256_file(ws / "abc.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("outputs do not depend on the thread count") {
  Workspace ws("threads");
  REQUIRE(cli({"repair", "--base", ws.base.string(), "--ft", ws.ft.string(), "--out", ws / "a.safetensors",
               "--threads", "1"})
              .code == 0);
  REQUIRE(cli({"repair", "--base", ws.base.string(), "--ft", ws.ft.string(), "--out", ws / "b.safetensors",
               "--threads", "4"})
              .code == 0);
  CHECK(read_bytes(ws / "a.safetensors") == read_bytes(ws / "b.safetensors"));
  CHECK(read_bytes(ws / "a.safetensors.report.json") == read_bytes(ws / "b.safetensors.report.json"));
  CHECK(read_bytes(ws / "a.safetensors.spectrum.csv") == read_bytes(ws / "b.safetensors.spectrum.csv"));
}

TEST_CASE("config file with flag override") {
  Workspace ws("config");
  std::ofstream(ws / "run.toml") << "mask = \"gate_up\"\nthreshold-scale = 2.0\n";
  const auto r = cli({"repair", "--config", ws / "run.toml", "--base", ws.base.string(), "--ft", ws.ft.string(),
                      "--out", ws / "o.safetensors", "--threshold-scale", "1.5"});
  REQUIRE(r.code == 0);
  const auto report = read_json(ws / "o.safetensors.report.json");
  CHECK(report["mask"] == "gate_up");
  CHECK(report["threshold_scale"] == 1.5);
  const auto manifest = read_json(ws / "o.safetensors.manifest.json");
  CHECK(manifest["inputs"].size() == 3);
}

TEST_CASE("errors") {
  Workspace ws("errors");
  SUBCASE("usage error") {
    const auto r = cli({"repair", "--no-such-flag"});
    CHECK(r.code == 2);
    CHECK(last_json_line(r.err)["error"]["kind"] == "usage");
  }
  SUBCASE("missing subcommand") { CHECK(cli({}).code == 2); }
  SUBCASE("invalid knob") {
    const auto r = cli({"baseline", "--method", "wise", "--alpha", "1.5", "--base", ws.base.string(), "--ft",
                        ws.ft.string(), "--out", ws / "x.safetensors"});
    CHECK(r.code == 2);
    CHECK(last_json_line(r.err)["error"]["kind"] == "config");
    CHECK_FALSE(fs::exists(ws / "x.safetensors"));
  }
  SUBCASE("baseline needs a method") {
    CHECK(cli({"baseline", "--base", ws.base.string(), "--ft", ws.ft.string(), "--out", ws / "x.safetensors"}).code ==
          2);
  }
  SUBCASE("corrupt checkpoint") {
    std::ofstream(ws / "bad.safetensors", std::ios::binary) << "garbage!";
    const auto r = cli({"repair", "--base", ws / "bad.safetensors", "--ft", ws.ft.string(), "--out", ws / "x.safetensors"});
    CHECK(r.code == 1);
    const auto e = last_json_line(r.err)["error"];
    CHECK(e["kind"] == "checkpoint");
    CHECK(e.contains("offset"));
  }
  SUBCASE("missing file") {
    const auto r = cli({"repair", "--base", ws / "none.safetensors", "--ft", ws.ft.string(), "--out", ws / "x.safetensors"});
    CHECK(r.code != 0);
    CHECK(last_json_line(r.err).contains("error"));
  }
}

TEST_CASE("baseline and rollback commands") {
  Workspace ws("baseline");
  const auto b = cli({"baseline", "--method", "ties", "--keep-ratio", "0.3", "--base", ws.base.string(), "--ft",
                      ws.ft.string(), "--out", ws / "t.safetensors"});
  REQUIRE(b.code == 0);
  const auto ties_out = load_checkpoint(ws / "t.safetensors");
  const auto base = load_checkpoint(ws.base);
  const auto ft = load_checkpoint(ws.ft);
  CHECK(json::parse(b.out)["realized_r"] == doctest::Approx(frobenius_retention(base, ft, ties_out).r));

  const auto m = cli({"match-rollback", "--method", "wise", "--target-r", "0.4", "--base", ws.base.string(), "--ft",
                      ws.ft.string(), "--out", ws / "m.safetensors"});
  REQUIRE(m.code == 0);
  const auto j = read_json(ws / "m.safetensors.rollback.json");
  CHECK(j["exact"] == true);
  CHECK(std::abs(j["realized_r"].get<double>() - 0.4) <= 0.01);
  CHECK(frobenius_retention(base, ft, load_checkpoint(ws / "m.safetensors")).r ==
        doctest::Approx(j["realized_r"].get<double>()).epsilon(1e-12));
}

TEST_CASE("diagnose writes its reports") {
  Workspace ws("diagnose");
  const auto r = cli({"diagnose", "--base", ws.base.string(), "--ft", ws.ft.string(), "--out", ws / "diag"});
  REQUIRE(r.code == 0);
  for (const char* f : {"class_noise.csv", "class_noise.json", "spectrum.csv", "spectrum.json", "manifest.json"}) {
    CHECK(fs::exists(ws.dir / "diag" / f));
  }
  CHECK_FALSE(fs::is_empty(ws.dir / "diag" / "spectra"));
}

TEST_CASE("eval on the score fixture") {
  Workspace ws("eval");
  const auto r = cli({"eval", "--scores", (test::data_dir() / "bench_scores.jsonl").string(), "--out", ws / "ev",
                      "--cohort", "overall", "--cohort", "knowledge"});
  REQUIRE(r.code == 0);
  const auto report = read_json(ws.dir / "ev" / "report.json");
  CHECK(report["partition"]["damaged"] == 30);
  bool found = false;
  for (const auto& s : report["method_stats"]) {
    if (s["method"] == "dg_hard" && s["cohort"] == "overall") {
      CHECK(std::abs(s["combined"].get<double>() - 83.3) < 0.5);
      found = true;
    }
  }
  CHECK(found);
  CHECK(fs::exists(ws.dir / "ev" / "method_stats.csv"));
}

TEST_CASE("synth-check") {
  const auto r = cli({"synth-check", "--seeds", "2"});
  CHECK(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.is_object());
}

TEST_CASE("version") {
  const auto r = cli({"--version"});
  CHECK(r.code == 0);
  CHECK_FALSE(r.out.empty());
}
