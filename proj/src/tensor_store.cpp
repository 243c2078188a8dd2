// Copyright (c) 2026, the dgrepair authors
// SPDX-License-Identifier: Apache-2.0

#include "dgrepair/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace dgr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kHeaderLenBytes = 8;
// Refuse absurd header lengths before allocating.
constexpr std::uint64_t kMaxHeaderBytes = 100ull * 1024 * 1024;

std::int64_t product(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

template <typename T>
T load_as(const std::byte* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

double decode(DType dtype, const std::byte* p) {
  switch (dtype) {
    case DType::F32:
      return load_as<float>(p);
    case DType::F16:
      return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(load_as<std::uint16_t>(p)));
    case DType::BF16:
      return static_cast<float>(
          Eigen::numext::bit_cast<Eigen::bfloat16>(load_as<std::uint16_t>(p)));
  }
  return 0.0;
}

void encode(DType dtype, double v, std::byte* p) {
  switch (dtype) {
    case DType::F32: {
      const auto f = static_cast<float>(v);
      std::memcpy(p, &f, sizeof f);
      return;
    }
    case DType::F16: {
      const auto bits = Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(static_cast<float>(v)));
      std::memcpy(p, &bits, sizeof bits);
      return;
    }
    case DType::BF16: {
      const auto bits =
          Eigen::numext::bit_cast<std::uint16_t>(Eigen::bfloat16(static_cast<float>(v)));
      std::memcpy(p, &bits, sizeof bits);
      return;
    }
  }
}

template <typename Value>
DenseTensor make_from_values(std::vector<std::int64_t> shape, DType dtype,
                             std::span<const Value> values) {
  if (static_cast<std::int64_t>(values.size()) != product(shape)) {
    throw std::invalid_argument("value count does not match shape");
  }
  std::vector<std::byte> data(values.size() * dtype_size(dtype));
  const std::size_t width = dtype_size(dtype);
  for (std::size_t i = 0; i < values.size(); ++i) {
    encode(dtype, static_cast<double>(values[i]), data.data() + i * width);
  }
  return DenseTensor(std::move(shape), dtype, std::move(data));
}

}  // namespace

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::F32:
      return "F32";
    case DType::F16:
      return "F16";
    case DType::BF16:
      return "BF16";
  }
  return "?";
}

DType dtype_from_string(const std::string& s) {
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  throw std::invalid_argument("unsupported dtype '" + s + "'");
}

std::size_t dtype_size(DType dtype) { return dtype == DType::F32 ? 4 : 2; }

CheckpointError::CheckpointError(const std::string& what, std::string tensor,
                                 std::uint64_t offset)
    : std::runtime_error(what + (tensor.empty() ? "" : " [tensor '" + tensor + "']") +
                         " at byte offset " + std::to_string(offset)),
      tensor_(std::move(tensor)),
      offset_(offset) {}

DenseTensor::DenseTensor(std::vector<std::int64_t> shape, DType dtype, std::vector<std::byte> data)
    : shape_(std::move(shape)), dtype_(dtype), data_(std::move(data)) {
  if (shape_.empty()) throw std::invalid_argument("tensor shape must be non-empty");
  for (auto d : shape_) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(product(shape_)) * dtype_size(dtype_)) {
    throw std::invalid_argument("tensor byte length does not match shape and dtype");
  }
}

DenseTensor DenseTensor::from_values(std::vector<std::int64_t> shape, DType dtype,
                                     std::span<const double> values) {
  return make_from_values(std::move(shape), dtype, values);
}

DenseTensor DenseTensor::from_values(std::vector<std::int64_t> shape, DType dtype,
                                     std::span<const float> values) {
  return make_from_values(std::move(shape), dtype, values);
}

std::int64_t DenseTensor::numel() const noexcept { return shape_.empty() ? 0 : product(shape_); }

double DenseTensor::value(std::int64_t index) const {
  return decode(dtype_, data_.data() + static_cast<std::size_t>(index) * dtype_size(dtype_));
}

std::vector<double> DenseTensor::values() const {
  const auto n = static_cast<std::size_t>(numel());
  const std::size_t width = dtype_size(dtype_);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = decode(dtype_, data_.data() + i * width);
  return out;
}

bool DenseTensor::all_finite() const {
  const auto n = static_cast<std::size_t>(numel());
  const std::size_t width = dtype_size(dtype_);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(decode(dtype_, data_.data() + i * width))) return false;
  }
  return true;
}

Eigen::MatrixXd DenseTensor::as_matrix() const {
  const std::int64_t rows = shape_.at(0);
  const std::int64_t cols = numel() / rows;
  const auto vals = values();
  // vals is row-major (rows x cols).
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      vals.data(), rows, cols);
}

const DenseTensor& TensorMap::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) throw std::out_of_range("no tensor named '" + name + "'");
  return it->second;
}

TensorMap parse_checkpoint(std::span<const std::byte> image) {
  if (image.size() < kHeaderLenBytes) {
    throw CheckpointError("file too short for header length", "", 0);
  }
  const auto header_len = load_as<std::uint64_t>(image.data());
  if (header_len > kMaxHeaderBytes || header_len > image.size() - kHeaderLenBytes) {
    throw CheckpointError("header length " + std::to_string(header_len) + " exceeds file size",
                          "", 0);
  }
  const auto* header_begin = reinterpret_cast<const char*>(image.data() + kHeaderLenBytes);
  const std::uint64_t data_start = kHeaderLenBytes + header_len;
  const std::uint64_t data_len = image.size() - data_start;

  std::set<std::string> seen;
  std::string duplicate;
  json::parser_callback_t on_event = [&](int depth, json::parse_event_t event, json& parsed) {
    if (depth == 1 && event == json::parse_event_t::key) {
      const auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  json header;
  try {
    header = json::parse(header_begin, header_begin + header_len, on_event);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("malformed header JSON: ") + e.what(), "",
                          kHeaderLenBytes + e.byte);
  }
  if (!duplicate.empty()) {
    throw CheckpointError("duplicate tensor name", duplicate, kHeaderLenBytes);
  }
  if (!header.is_object()) throw CheckpointError("header is not a JSON object", "", kHeaderLenBytes);

  TensorMap map;
  struct Span {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;
  for (auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) throw CheckpointError("__metadata__ is not an object", "", kHeaderLenBytes);
      for (auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw CheckpointError("__metadata__ values must be strings", "", kHeaderLenBytes);
        map.metadata.emplace(k, v.get<std::string>());
      }
      continue;
    }
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets")) {
      throw CheckpointError("tensor entry missing dtype/shape/data_offsets", name, kHeaderLenBytes);
    }
    DType dtype;
    try {
      dtype = dtype_from_string(entry.at("dtype").get<std::string>());
    } catch (const std::exception& e) {
      throw CheckpointError(e.what(), name, kHeaderLenBytes);
    }
    const auto& offsets = entry.at("data_offsets");
    if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
        !offsets[1].is_number_unsigned()) {
      throw CheckpointError("data_offsets must be two unsigned integers", name, kHeaderLenBytes);
    }
    const auto begin = offsets[0].get<std::uint64_t>();
    const auto end = offsets[1].get<std::uint64_t>();
    if (begin > end || end > data_len) {
      throw CheckpointError("data offsets [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") outside data section of " + std::to_string(data_len) +
                                " bytes (truncated?)",
                            name, data_start + begin);
    }
    std::vector<std::int64_t> shape;
    if (!entry.at("shape").is_array()) throw CheckpointError("shape is not an array", name, kHeaderLenBytes);
    for (const auto& d : entry.at("shape")) {
      if (!d.is_number_unsigned()) throw CheckpointError("shape entries must be unsigned", name, kHeaderLenBytes);
      shape.push_back(d.get<std::int64_t>());
    }
    std::vector<std::byte> bytes(image.begin() + static_cast<std::ptrdiff_t>(data_start + begin),
                                 image.begin() + static_cast<std::ptrdiff_t>(data_start + end));
    try {
      map.entries.emplace(name, DenseTensor(std::move(shape), dtype, std::move(bytes)));
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(e.what(), name, data_start + begin);
    }
    spans.push_back({begin, end, name});
  }

  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return std::tie(a.begin, a.end) < std::tie(b.begin, b.end); });
  std::uint64_t cursor = 0;
  for (const auto& s : spans) {
    if (s.begin < cursor) throw CheckpointError("overlapping tensor data", s.name, data_start + s.begin);
    if (s.begin > cursor) throw CheckpointError("gap in tensor data section", s.name, data_start + cursor);
    cursor = s.end;
  }
  if (cursor != data_len) {
    throw CheckpointError("trailing bytes after last tensor", "", data_start + cursor);
  }
  return map;
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> image(size);
  in.read(reinterpret_cast<char*>(image.data()), static_cast<std::streamsize>(size));
  if (!in) throw std::runtime_error("failed reading checkpoint '" + path.string() + "'");
  auto map = parse_checkpoint(image);
  map.source_path = path;
  return map;
}

std::vector<std::byte> serialize_checkpoint(const TensorMap& map) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : map.entries) {
    if (name == "__metadata__") throw std::invalid_argument("tensor name '__metadata__' is reserved");
    if (!t.all_finite()) {
      throw std::invalid_argument("refusing to save non-finite values in tensor '" + name + "'");
    }
    const std::uint64_t n = t.bytes().size();
    header[name] = {{"dtype", to_string(t.dtype())},
                    {"shape", t.shape()},
                    {"data_offsets", {offset, offset + n}}};
    offset += n;
  }
  if (!map.metadata.empty()) header["__metadata__"] = map.metadata;

  std::string text = header.dump();
  // Pad so the data section starts 8-byte aligned.
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> image(kHeaderLenBytes + text.size() + offset);
  const std::uint64_t header_len = text.size();
  std::memcpy(image.data(), &header_len, sizeof header_len);
  std::memcpy(image.data() + kHeaderLenBytes, text.data(), text.size());
  std::size_t cursor = kHeaderLenBytes + text.size();
  for (const auto& [name, t] : map.entries) {
    std::memcpy(image.data() + cursor, t.bytes().data(), t.bytes().size());
    cursor += t.bytes().size();
  }
  return image;
}

void save_checkpoint(const TensorMap& map, const std::filesystem::path& path) {
  const auto image = serialize_checkpoint(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(image.data()), static_cast<std::streamsize>(image.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::string to_string(ScopeReason reason) {
  switch (reason) {
    case ScopeReason::ok:
      return "ok";
    case ScopeReason::ndim_lt_2:
      return "ndim_lt_2";
    case ScopeReason::too_small:
      return "too_small";
    case ScopeReason::reshaped_from_ndim_gt_2:
      return "reshaped_from_ndim_gt_2";
  }
  return "?";
}

ScopeDecision scope_of(const std::string& name, const std::vector<std::int64_t>& shape,
                       std::int64_t min_elements) {
  ScopeDecision d{name, false, ScopeReason::ndim_lt_2, std::nullopt};
  if (shape.size() < 2) return d;
  if (product(shape) < min_elements) {
    d.reason = ScopeReason::too_small;
    return d;
  }
  d.in_scope = true;
  d.reason = shape.size() == 2 ? ScopeReason::ok : ScopeReason::reshaped_from_ndim_gt_2;
  d.effective_shape = std::pair{shape[0], product(shape) / shape[0]};
  return d;
}

std::vector<ScopeDecision> scope_filter(const TensorMap& map, std::int64_t min_elements) {
  std::vector<ScopeDecision> out;
  out.reserve(map.size());
  for (const auto& [name, t] : map.entries) out.push_back(scope_of(name, t.shape(), min_elements));
  return out;
}

double Delta::frobenius_sq() const {
  double acc = 0.0;
  for (double v : values) acc += v * v;
  return acc;
}

Delta delta(const TensorMap& base, const TensorMap& ft, const std::string& name) {
  if (!base.contains(name)) throw std::out_of_range("tensor '" + name + "' missing from base");
  if (!ft.contains(name)) throw std::out_of_range("tensor '" + name + "' missing from fine-tuned");
  const auto& b = base.at(name);
  const auto& f = ft.at(name);
  if (b.shape() != f.shape()) throw std::invalid_argument("shape mismatch for tensor '" + name + "'");
  Delta d{b.shape(), f.values()};
  const auto bv = b.values();
  for (std::size_t i = 0; i < bv.size(); ++i) d.values[i] -= bv[i];
  return d;
}

std::vector<std::string> check_pairing(const TensorMap& base, const TensorMap& ft,
                                       UnpairedPolicy policy) {
  std::vector<std::string> ft_only;
  for (const auto& [name, t] : ft.entries) {
    auto it = base.entries.find(name);
    if (it == base.entries.end()) {
      if (policy == UnpairedPolicy::error) {
        throw std::invalid_argument("tensor '" + name + "' present only in fine-tuned checkpoint");
      }
      ft_only.push_back(name);
      continue;
    }
    if (it->second.shape() != t.shape()) {
      throw std::invalid_argument("shape mismatch for tensor '" + name + "'");
    }
  }
  for (const auto& [name, t] : base.entries) {
    if (!ft.contains(name) && policy == UnpairedPolicy::error) {
      throw std::invalid_argument("tensor '" + name + "' present only in base checkpoint");
    }
  }
  return ft_only;
}

}  // namespace dgr
