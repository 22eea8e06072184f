#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attfuse/errors.hpp"

namespace attfuse {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Rank 0 is a scalar.
///
/// Channel-last layout is used for image-like data: a feature volume is
/// [H x W x C] and a batch of them is [B x H x W x C].
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  /// Builds a tensor from nested rows, e.g. matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
  }
  bool is_scalar() const { return data_.size() == 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape_));
    return data_[0];
  }

  /// Multi-index access; the index count must equal the rank.
  double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void require_same_shape(const Tensor& o, std::string_view what) const {
    if (shape_ != o.shape_) {
      throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(shape_) + " vs " +
                           shape_str(o.shape_));
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw DimensionError("index rank " + std::to_string(idx.size()) + " vs tensor " + shape_str(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_str(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Binary serialization: "FTNS", u8 rank, u64 dims, f64 data; all little-endian.

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 4);
}

inline bool get_u64(std::istream& is, std::uint64_t& v) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) return false;
  v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return true;
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) return false;
  v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return true;
}

}  // namespace detail

inline constexpr std::array<char, 4> kTensorMagic{'F', 'T', 'N', 'S'};

/// Number of bytes write_tensor emits for a tensor of this shape.
inline std::size_t serialized_tensor_bytes(const Shape& shape) {
  return 4 + 1 + 8 * shape.size() + 8 * shape_numel(shape);
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), 4);
  os.put(static_cast<char>(t.rank()));
  for (auto d : t.shape()) detail::put_u64(os, d);
  for (double v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw LoadError("truncated tensor header");
  if (magic != kTensorMagic) throw LoadError("bad tensor magic");
  char rank = 0;
  if (!is.get(rank)) throw LoadError("truncated tensor header");
  Shape shape(static_cast<unsigned char>(rank));
  for (auto& d : shape) {
    std::uint64_t v = 0;
    if (!detail::get_u64(is, v)) throw LoadError("truncated tensor dims");
    if (v == 0) throw LoadError("zero tensor dimension");
    d = static_cast<std::size_t>(v);
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& x : data) {
    std::uint64_t v = 0;
    if (!detail::get_u64(is, v)) throw LoadError("truncated tensor data");
    x = std::bit_cast<double>(v);
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace attfuse
