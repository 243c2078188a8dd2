// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <doctest.h>
#include <json.hpp>

#include "dgrepair/tensor_store.hpp"
#include "support.hpp"

using namespace dgr;

namespace {

std::vector<std::byte> image_from(const std::string& header, const std::vector<std::uint8_t>& data) {
  std::vector<std::byte> img(8 + header.size() + data.size());
  const std::uint64_t n = header.size();
  std::memcpy(img.data(), &n, 8);
  std::memcpy(img.data() + 8, header.data(), header.size());
  if (!data.empty()) std::memcpy(img.data() + 8 + header.size(), data.data(), data.size());
  return img;
}

std::vector<std::uint8_t> f32_bytes(std::initializer_list<float> vals) {
  std::vector<std::uint8_t> out(vals.size() * 4);
  std::size_t i = 0;
  for (float v : vals) std::memcpy(out.data() + 4 * i++, &v, 4);
  return out;
}

std::uint16_t bits16(const DenseTensor& t, std::size_t i) {
  std::uint16_t b;
  std::memcpy(&b, t.bytes().data() + 2 * i, 2);
  return b;
}

// Reference f32 -> bf16 rounding on the integer bit pattern.
std::uint16_t bf16_reference(float x) {
  std::uint32_t u;
  std::memcpy(&u, &x, 4);
  const std::uint32_t rounding = 0x7FFF + ((u >> 16) & 1);
  return static_cast<std::uint16_t>((u + rounding) >> 16);
}

std::vector<std::byte> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<char> c((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(c.size());
  std::memcpy(out.data(), c.data(), c.size());
  return out;
}

std::uint64_t header_len(const std::vector<std::byte>& img) {
  std::uint64_t n;
  std::memcpy(&n, img.data(), 8);
  return n;
}

}  // namespace

TEST_CASE("identity matrix parses from a hand-built image") {
  const auto img = image_from(R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})",
                              f32_bytes({1.0f, 0.0f, 0.0f, 1.0f}));
  const auto map = parse_checkpoint(img);
  REQUIRE(map.size() == 1);
  CHECK(map.at("w").values() == std::vector<double>{1, 0, 0, 1});
  CHECK(map.at("w").shape() == std::vector<std::int64_t>{2, 2});
  CHECK(map.at("w").dtype() == DType::F32);
}

TEST_CASE("python-written fixtures decode to the recorded values") {
  const auto expect = nlohmann::json::parse(std::ifstream(test::data_dir() / "checkpoint_expect.json"));
  for (const auto& [file, e] : expect.items()) {
    CAPTURE(file);
    const auto map = load_checkpoint(test::data_dir() / file);
    REQUIRE(map.size() == e["tensors"].size());
    for (const auto& [name, te] : e["tensors"].items()) {
      CAPTURE(name);
      const auto& t = map.at(name);
      CHECK(to_string(t.dtype()) == e["dtype"].get<std::string>());
      CHECK(t.shape() == te["shape"].get<std::vector<std::int64_t>>());
      const auto v = t.values();
      double sum = 0.0;
      for (double x : v) sum += x;
      CHECK(sum == doctest::Approx(te["sum"].get<double>()).epsilon(1e-12));
      CHECK(v.front() == te["first"].get<double>());
      CHECK(v.back() == te["last"].get<double>());
    }
  }
}

TEST_CASE("fixture files round-trip byte for byte") {
  for (const char* file : {"ckpt_f32.safetensors", "ckpt_f16.safetensors", "ckpt_bf16.safetensors",
                           "pair_base.safetensors", "pair_ft.safetensors"}) {
    CAPTURE(file);
    const auto original = read_file(test::data_dir() / file);
    const auto map = load_checkpoint(test::data_dir() / file);
    const auto rewritten = serialize_checkpoint(map);
    CHECK(rewritten == original);
    // Data sections compared separately in case header encodings ever diverge.
    const auto a = 8 + header_len(original);
    const auto b = 8 + header_len(rewritten);
    CHECK(std::equal(original.begin() + static_cast<std::ptrdiff_t>(a), original.end(),
                     rewritten.begin() + static_cast<std::ptrdiff_t>(b), rewritten.end()));
  }
}

TEST_CASE("generated maps round-trip in every dtype") {
  for (auto dtype : {DType::F32, DType::F16, DType::BF16}) {
    CAPTURE(to_string(dtype));
    TensorMap map;
    map.entries.emplace("b", test::random_tensor({3, 5, 7}, dtype, 1.0, 1));
    map.entries.emplace("a", test::random_tensor({64}, dtype, 3.0, 2));
    map.entries.emplace("c.weight", test::random_tensor({40, 30}, dtype, 0.01, 3));
    map.metadata["note"] = "x";
    const auto img = serialize_checkpoint(map);
    CHECK(header_len(img) % 8 == 0);
    const auto back = parse_checkpoint(img);
    CHECK(back.entries == map.entries);
    CHECK(back.metadata == map.metadata);
    CHECK(serialize_checkpoint(back) == img);
  }
}

TEST_CASE("save and load through a file") {
  const auto path = std::filesystem::temp_directory_path() / "dgr_ts_roundtrip.safetensors";
  TensorMap map;
  map.entries.emplace("w", test::random_tensor({12, 12}, DType::BF16, 1.0, 9));
  save_checkpoint(map, path);
  const auto back = load_checkpoint(path);
  CHECK(back.entries == map.entries);
  REQUIRE(back.source_path.has_value());
  CHECK(*back.source_path == path);
  std::filesystem::remove(path);
}

TEST_CASE("empty map writes a valid file") {
  const auto img = serialize_checkpoint(TensorMap{});
  CHECK(header_len(img) == 8);
  CHECK(parse_checkpoint(img).size() == 0);
}

TEST_CASE("half-precision encodings follow round-to-nearest-even") {
  const std::vector<double> vals = {1.0, 65504.0, 0.1, -2.0, 1.0 + 1.0 / 2048.0, 1.0 + 3.0 / 2048.0};
  const auto f16 = DenseTensor::from_values({6}, DType::F16, vals);
  CHECK(bits16(f16, 0) == 0x3C00);
  CHECK(bits16(f16, 1) == 0x7BFF);
  CHECK(bits16(f16, 2) == 0x2E66);
  CHECK(bits16(f16, 3) == 0xC000);
  CHECK(bits16(f16, 4) == 0x3C00);  // tie rounds to even
  CHECK(bits16(f16, 5) == 0x3C02);  // tie rounds to even (up)

  const auto raw = test::normal_values(2000, 10.0, 5);
  std::vector<float> fl(raw.begin(), raw.end());
  const auto bf = DenseTensor::from_values({2000}, DType::BF16, std::span<const float>(fl));
  for (std::size_t i = 0; i < fl.size(); ++i) {
    REQUIRE(bits16(bf, i) == bf16_reference(fl[i]));
  }
}

TEST_CASE("malformed files are rejected with tensor name and offset") {
  SUBCASE("truncated data section") {
    const std::string header = R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})";
    const auto img = image_from(header, f32_bytes({1, 2}));
    try {
      parse_checkpoint(img);
      FAIL("expected an error");
    } catch (const CheckpointError& e) {
      CHECK(e.tensor() == "w");
      CHECK(e.offset() == 8 + header.size());  // start of the tensor data
    }
  }
  SUBCASE("duplicate tensor name") {
    const auto img = image_from(
        R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})",
        f32_bytes({1}));
    try {
      parse_checkpoint(img);
      FAIL("expected an error");
    } catch (const CheckpointError& e) {
      CHECK(e.tensor() == "w");
      CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
    }
  }
  SUBCASE("unsupported dtype") {
    const auto img = image_from(R"({"q":{"dtype":"I8","shape":[4],"data_offsets":[0,4]}})", {1, 2, 3, 4});
    try {
      parse_checkpoint(img);
      FAIL("expected an error");
    } catch (const CheckpointError& e) {
      CHECK(e.tensor() == "q");
      CHECK(std::string(e.what()).find("I8") != std::string::npos);
    }
  }
  SUBCASE("malformed header") {
    const auto img = image_from(R"({"w":{"dtype":)", {});
    CHECK_THROWS_AS(parse_checkpoint(img), CheckpointError);
  }
  SUBCASE("header length beyond file") {
    auto img = image_from("{}", {});
    const std::uint64_t huge = 1000;
    std::memcpy(img.data(), &huge, 8);
    CHECK_THROWS_AS(parse_checkpoint(img), CheckpointError);
  }
  SUBCASE("shape and byte count disagree") {
    const auto img = image_from(R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", f32_bytes({1, 2}));
    CHECK_THROWS_AS(parse_checkpoint(img), CheckpointError);
  }
  SUBCASE("trailing bytes") {
    const auto img = image_from(R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})", f32_bytes({1, 2}));
    CHECK_THROWS_AS(parse_checkpoint(img), CheckpointError);
  }
  SUBCASE("zero dimension") {
    const auto img = image_from(R"({"w":{"dtype":"F32","shape":[0,4],"data_offsets":[0,0]}})", {});
    CHECK_THROWS_AS(parse_checkpoint(img), CheckpointError);
  }
}

TEST_CASE("non-finite values are never written") {
  TensorMap map;
  map.entries.emplace("w", DenseTensor::from_values({2}, DType::F32, std::vector<double>{1.0, std::nan("")}));
  CHECK_THROWS_AS(serialize_checkpoint(map), std::invalid_argument);
  TensorMap inf;
  inf.entries.emplace("w", DenseTensor::from_values({1}, DType::F16, std::vector<double>{1e6}));
  CHECK_THROWS_AS(serialize_checkpoint(inf), std::invalid_argument);
}

TEST_CASE("scope rules") {
  const auto bias = scope_of("layers.0.bias", {4096});
  CHECK_FALSE(bias.in_scope);
  CHECK(bias.reason == ScopeReason::ndim_lt_2);

  const auto small = scope_of("small", {16, 16});
  CHECK_FALSE(small.in_scope);
  CHECK(small.reason == ScopeReason::too_small);

  const auto conv = scope_of("conv1d.weight", {32, 16, 4});
  CHECK(conv.in_scope);
  CHECK(conv.reason == ScopeReason::reshaped_from_ndim_gt_2);
  CHECK(conv.effective_shape == std::pair<std::int64_t, std::int64_t>{32, 64});

  const auto embed = scope_of("model.embed_tokens.weight", {128256, 3072});
  CHECK(embed.in_scope);
  CHECK(embed.reason == ScopeReason::ok);
  CHECK(embed.effective_shape == std::pair<std::int64_t, std::int64_t>{128256, 3072});

  CHECK(scope_of("edge", {32, 32}).in_scope);
  CHECK_FALSE(scope_of("edge", {31, 33}).in_scope);
  CHECK(scope_of("edge", {1, 8}, 8).in_scope);
}

TEST_CASE("scope decisions follow the rule on random shapes") {
  std::mt19937_64 gen(17);
  std::uniform_int_distribution<int> ndim(1, 4);
  std::uniform_int_distribution<int> dim(1, 40);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<std::int64_t> shape(static_cast<std::size_t>(ndim(gen)));
    for (auto& d : shape) d = dim(gen);
    const auto n = test::numel(shape);
    const auto d = scope_of("t", shape);
    const bool expected = shape.size() >= 2 && n >= kDefaultMinElements;
    REQUIRE(d.in_scope == expected);
    REQUIRE(d.in_scope == (d.reason == ScopeReason::ok || d.reason == ScopeReason::reshaped_from_ndim_gt_2));
    if (d.in_scope) {
      REQUIRE(d.effective_shape->first == shape[0]);
      REQUIRE(d.effective_shape->second * shape[0] == n);
    } else {
      REQUIRE_FALSE(d.effective_shape.has_value());
    }
  }
}

TEST_CASE("scope filter on the mixed fixture") {
  const auto map = load_checkpoint(test::data_dir() / "ckpt_f32.safetensors");
  std::map<std::string, ScopeReason> got;
  for (const auto& d : scope_filter(map)) got[d.name] = d.reason;
  CHECK(got.at("conv1d.weight") == ScopeReason::reshaped_from_ndim_gt_2);
  CHECK(got.at("model.embed_tokens.weight") == ScopeReason::ok);
  CHECK(got.at("model.layers.0.input_layernorm.weight") == ScopeReason::ndim_lt_2);
  CHECK(got.at("model.layers.0.self_attn.o_proj.bias") == ScopeReason::ndim_lt_2);
  CHECK(got.at("model.layers.0.mlp.gate_proj.weight") == ScopeReason::ok);
  CHECK(got.at("small.weight") == ScopeReason::too_small);
}

TEST_CASE("as_matrix keeps dim 0 as rows") {
  std::vector<double> v(24);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const auto t = DenseTensor::from_values({2, 3, 4}, DType::F32, v);
  const auto m = t.as_matrix();
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 12);
  CHECK(m(1, 0) == 12.0);
  CHECK(m(0, 11) == 11.0);
  CHECK(m(1, 5) == 17.0);
}

TEST_CASE("delta") {
  TensorMap a, b;
  a.entries.emplace("w", DenseTensor::from_values({2, 2}, DType::F32, std::vector<double>{1, 1, 1, 1}));
  b.entries.emplace("w", DenseTensor::from_values({2, 2}, DType::F32, std::vector<double>{3, 3, 3, 3}));
  CHECK(delta(a, b, "w").values == std::vector<double>{2, 2, 2, 2});
  CHECK(delta(a, a, "w").frobenius_sq() == 0.0);

  const auto pair = test::synthetic_pair(4);
  for (const auto& [name, f] : pair.ft.entries) {
    const auto d = delta(pair.base, pair.ft, name);
    const auto fv = f.values();
    const auto bv = pair.base.at(name).values();
    double brute = 0.0;
    for (std::size_t i = 0; i < fv.size(); ++i) {
      brute += (fv[i] - bv[i]) * (fv[i] - bv[i]);
      // f32 inputs subtract exactly in f64, so adding back is exact.
      REQUIRE(d.values[i] + bv[i] == fv[i]);
    }
    CHECK(d.frobenius_sq() == doctest::Approx(brute).epsilon(1e-14));
  }

  TensorMap c;
  c.entries.emplace("w", DenseTensor::from_values({4}, DType::F32, std::vector<double>{1, 1, 1, 1}));
  CHECK_THROWS_AS(delta(a, c, "w"), std::invalid_argument);
  CHECK_THROWS_AS(delta(a, b, "missing"), std::out_of_range);
}

TEST_CASE("pairing policy") {
  auto pair = test::synthetic_pair(5);
  CHECK(check_pairing(pair.base, pair.ft, UnpairedPolicy::error).empty());
  pair.ft.entries.emplace("extra.weight", test::random_tensor({4}, DType::F32, 1.0, 1));
  CHECK_THROWS_AS(check_pairing(pair.base, pair.ft, UnpairedPolicy::error), std::invalid_argument);
  CHECK(check_pairing(pair.base, pair.ft, UnpairedPolicy::passthrough_ft) == std::vector<std::string>{"extra.weight"});
}
