// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dgrepair/tensor_store.hpp"

namespace dgr::test {

inline std::filesystem::path data_dir() { return DGR_DATA_DIR; }

inline std::vector<double> normal_values(std::size_t n, double scale, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

inline std::int64_t numel(const std::vector<std::int64_t>& shape) {
  std::int64_t p = 1;
  for (auto d : shape) p *= d;
  return p;
}

inline DenseTensor random_tensor(const std::vector<std::int64_t>& shape, DType dtype, double scale,
                                 std::uint64_t seed) {
  return DenseTensor::from_values(shape, dtype, normal_values(static_cast<std::size_t>(numel(shape)), scale, seed));
}

/// Values that are small multiples of 2^-8 so sums and halvings stay exact in f32.
inline DenseTensor dyadic_tensor(const std::vector<std::int64_t>& shape, std::uint64_t seed, int lo = -64,
                                 int hi = 64) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> d(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = d(gen) / 256.0;
  return DenseTensor::from_values(shape, DType::F32, v);
}

inline Eigen::MatrixXd matrix_from_tensor(const DenseTensor& t) { return t.as_matrix(); }

inline DenseTensor tensor_from_matrix(const Eigen::MatrixXd& m, DType dtype = DType::F32) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  return DenseTensor::from_values({m.rows(), m.cols()}, dtype,
                                  std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
}

inline Eigen::MatrixXd random_orthogonal(std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d;
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = d(gen);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
}

/// Base plus a low-rank-and-noise delta on a small transformer-like name set.
struct CheckpointPair {
  TensorMap base;
  TensorMap ft;
};

inline CheckpointPair synthetic_pair(std::uint64_t seed, DType dtype = DType::F32) {
  CheckpointPair p;
  const std::vector<std::pair<std::string, std::vector<std::int64_t>>> shapes = {
      {"model.embed_tokens.weight", {96, 32}},
      {"model.layers.0.input_layernorm.weight", {32}},
      {"model.layers.0.mlp.down_proj.weight", {32, 80}},
      {"model.layers.0.mlp.gate_proj.weight", {80, 32}},
      {"model.layers.0.mlp.up_proj.weight", {80, 32}},
      {"model.layers.0.self_attn.k_proj.weight", {32, 32}},
      {"model.layers.0.self_attn.q_proj.weight", {32, 32}},
      {"model.layers.0.self_attn.q_proj.bias", {32}},
      {"model.norm.weight", {32}},
      {"tiny.weight", {8, 8}},
  };
  std::uint64_t s = seed;
  for (const auto& [name, shape] : shapes) {
    const auto n = static_cast<std::size_t>(numel(shape));
    const auto b = normal_values(n, 0.05, ++s);
    auto d = normal_values(n, 0.002, ++s);
    if (shape.size() == 2 && n >= 1024) {
      const auto u = normal_values(static_cast<std::size_t>(shape[0]), 1.0, ++s);
      const auto v = normal_values(static_cast<std::size_t>(shape[1]), 1.0, ++s);
      for (std::int64_t i = 0; i < shape[0]; ++i) {
        for (std::int64_t j = 0; j < shape[1]; ++j) d[static_cast<std::size_t>(i * shape[1] + j)] += 0.01 * u[i] * v[j];
      }
    }
    std::vector<double> f(n);
    for (std::size_t i = 0; i < n; ++i) f[i] = b[i] + d[i];
    p.base.entries.emplace(name, DenseTensor::from_values(shape, dtype, b));
    p.ft.entries.emplace(name, DenseTensor::from_values(shape, dtype, f));
  }
  return p;
}

}  // namespace dgr::test
