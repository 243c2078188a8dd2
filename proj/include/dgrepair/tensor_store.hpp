// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace dgr {

/// Storage element type of a checkpoint tensor.
enum class DType { F32, F16, BF16 };

std::string to_string(DType dtype);
DType dtype_from_string(const std::string& s);
std::size_t dtype_size(DType dtype);

/// Raised for malformed or inconsistent checkpoint files. Carries the tensor
/// name (empty for header-level problems) and the absolute byte offset in the
/// file where the problem was detected.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& what, std::string tensor, std::uint64_t offset);

  const std::string& tensor() const noexcept { return tensor_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string tensor_;
  std::uint64_t offset_;
};

/// Dense row-major tensor with raw little-endian storage.
class DenseTensor {
 public:
  DenseTensor() = default;
  /// Takes ownership of raw bytes; throws if the byte count does not match the shape.
  DenseTensor(std::vector<std::int64_t> shape, DType dtype, std::vector<std::byte> data);

  /// Builds a tensor by rounding `values` to `dtype` (round-to-nearest-even).
  static DenseTensor from_values(std::vector<std::int64_t> shape, DType dtype,
                                 std::span<const double> values);
  static DenseTensor from_values(std::vector<std::int64_t> shape, DType dtype,
                                 std::span<const float> values);

  const std::vector<std::int64_t>& shape() const noexcept { return shape_; }
  DType dtype() const noexcept { return dtype_; }
  const std::vector<std::byte>& bytes() const noexcept { return data_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::int64_t numel() const noexcept;

  /// Element values widened to f64.
  std::vector<double> values() const;
  double value(std::int64_t index) const;
  bool all_finite() const;

  /// Values viewed as a 2D (rows, cols) matrix: row = index along dim 0,
  /// columns = all remaining dims flattened row-major.
  Eigen::MatrixXd as_matrix() const;

  bool operator==(const DenseTensor& other) const = default;

 private:
  std::vector<std::int64_t> shape_;
  DType dtype_ = DType::F32;
  std::vector<std::byte> data_;
};

/// Named collection of tensors; iteration is lexicographic by name.
struct TensorMap {
  std::map<std::string, DenseTensor> entries;
  std::map<std::string, std::string> metadata;
  std::optional<std::filesystem::path> source_path;

  bool contains(const std::string& name) const { return entries.contains(name); }
  const DenseTensor& at(const std::string& name) const;
  std::size_t size() const noexcept { return entries.size(); }
};

TensorMap load_checkpoint(const std::filesystem::path& path);
/// Parses an in-memory checkpoint image (same layout as the file).
TensorMap parse_checkpoint(std::span<const std::byte> image);

void save_checkpoint(const TensorMap& map, const std::filesystem::path& path);
/// Serialized file image; tensors laid out in lexicographic name order.
std::vector<std::byte> serialize_checkpoint(const TensorMap& map);

enum class ScopeReason { ok, ndim_lt_2, too_small, reshaped_from_ndim_gt_2 };
std::string to_string(ScopeReason reason);

struct ScopeDecision {
  std::string name;
  bool in_scope = false;
  ScopeReason reason = ScopeReason::ndim_lt_2;
  std::optional<std::pair<std::int64_t, std::int64_t>> effective_shape;
};

inline constexpr std::int64_t kDefaultMinElements = 1024;

/// Decision for a single shape. Never looks at tensor values.
ScopeDecision scope_of(const std::string& name, const std::vector<std::int64_t>& shape,
                       std::int64_t min_elements = kDefaultMinElements);
std::vector<ScopeDecision> scope_filter(const TensorMap& map,
                                        std::int64_t min_elements = kDefaultMinElements);

/// Element-wise ft - base, computed at f64.
struct Delta {
  std::vector<std::int64_t> shape;
  std::vector<double> values;

  double frobenius_sq() const;
};

Delta delta(const TensorMap& base, const TensorMap& ft, const std::string& name);

/// Policy for tensors present in only one of two checkpoints.
enum class UnpairedPolicy { error, passthrough_ft };

/// Throws if base and ft disagree on names (unless passthrough is allowed) or
/// on shapes of shared names. Returns names present only in ft.
std::vector<std::string> check_pairing(const TensorMap& base, const TensorMap& ft,
                                       UnpairedPolicy policy);

}  // namespace dgr
