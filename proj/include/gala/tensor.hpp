#pragma once

// Dense double-precision tensors in row-major N,H,W,C order.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gala/errors.hpp"

namespace gala {

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<std::size_t> dims) : Shape(std::span<const std::size_t>(dims.begin(), dims.size())) {}

  explicit Shape(std::span<const std::size_t> dims) {
    if (dims.size() > kMaxRank) {
      throw ContractError("Shape: rank " + std::to_string(dims.size()) + " exceeds 4");
    }
    std::copy(dims.begin(), dims.end(), dims_.begin());
    rank_ = dims.size();
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t back() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }
  std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  /// Rank-4 view with leading singleton dims, e.g. {C} -> {1,1,1,C}.
  Shape padded4() const {
    std::array<std::size_t, 4> d{1, 1, 1, 1};
    std::copy(dims_.begin(), dims_.begin() + rank_, d.begin() + (4 - rank_));
    return Shape(std::span<const std::size_t>(d));
  }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    return a.rank_ == b.rank_ && std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Immutable value: copies share the payload.
class Tensor {
 public:
  Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : shape_(shape), requires_grad_(requires_grad) {
    if (values.size() != shape.numel()) {
      throw ContractError("Tensor: " + std::to_string(values.size()) + " values for shape " + shape.str());
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return full(shape, 0.0); }
  static Tensor full(Shape shape, double v) { return Tensor(shape, std::vector<double>(shape.numel(), v)); }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_->size(); }
  std::span<const double> values() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  bool requires_grad() const { return requires_grad_; }

  double item() const {
    if (size() != 1) throw ContractError("Tensor::item on shape " + shape_.str());
    return (*data_)[0];
  }

  /// Element of a rank-4 N,H,W,C tensor.
  double at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
    return (*data_)[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }

  Tensor with_requires_grad(bool flag) const {
    Tensor t = *this;
    t.requires_grad_ = flag;
    return t;
  }

  Tensor reshaped(Shape shape) const {
    if (shape.numel() != size()) {
      throw ContractError("Tensor::reshaped: " + shape_.str() + " -> " + shape.str());
    }
    Tensor t = *this;
    t.shape_ = shape;
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_->begin(), data_->end(), [](double v) { return std::isfinite(v); });
  }

  std::vector<double> to_vector() const { return *data_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && *a.data_ == *b.data_;
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  bool requires_grad_ = false;
};

// Binary container: 8 magic bytes, rank (u64 LE), dims (u64 LE each),
// payload (f64 LE, row-major N,H,W,C).
inline constexpr std::array<char, 8> kTensorMagic{'G', 'A', 'L', 'A', 'T', 'N', 'S', 'R'};

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (std::size_t i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(bytes.data(), bytes.size());
}

inline std::uint64_t read_u64_le(std::istream& is) {
  std::array<unsigned char, 8> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw DataError("tensor stream truncated");
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::write_u64_le(os, t.shape().rank());
  for (std::size_t d : t.shape().dims()) detail::write_u64_le(os, d);
  for (double v : t.values()) detail::write_u64_le(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw DataError("tensor write failed");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw DataError("tensor stream: bad magic");
  }
  const std::uint64_t rank = detail::read_u64_le(is);
  if (rank > Shape::kMaxRank) throw DataError("tensor stream: rank " + std::to_string(rank));
  std::array<std::size_t, Shape::kMaxRank> dims{};
  for (std::uint64_t i = 0; i < rank; ++i) dims[i] = detail::read_u64_le(is);
  Shape shape(std::span<const std::size_t>(dims.data(), rank));
  std::vector<double> values(shape.numel());
  for (double& v : values) v = std::bit_cast<double>(detail::read_u64_le(is));
  return Tensor(shape, std::move(values));
}

}  // namespace gala
