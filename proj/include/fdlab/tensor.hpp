#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fdlab/error.hpp"

namespace fdlab {

using Shape = std::vector<std::size_t>;

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major float32 array. Extents are positive; an empty shape is a scalar.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    require(shape_numel(shape_) == data_.size(), ErrorKind::shape,
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Contiguous slice along the leading axis.
  std::span<float> row(std::size_t i) {
    const std::size_t stride = size() / shape_[0];
    return std::span<float>(data_).subspan(i * stride, stride);
  }
  std::span<const float> row(std::size_t i) const {
    const std::size_t stride = size() / shape_[0];
    return std::span<const float>(data_).subspan(i * stride, stride);
  }

  /// View a rank-2 tensor as an Eigen matrix.
  MatrixMap matrix() {
    require(rank() == 2, ErrorKind::shape, "matrix view needs rank 2, got " + shape_string(shape_));
    return MatrixMap(data_.data(), Eigen::Index(shape_[0]), Eigen::Index(shape_[1]));
  }
  ConstMatrixMap matrix() const {
    require(rank() == 2, ErrorKind::shape, "matrix view needs rank 2, got " + shape_string(shape_));
    return ConstMatrixMap(data_.data(), Eigen::Index(shape_[0]), Eigen::Index(shape_[1]));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      require(e > 0, ErrorKind::shape, "tensor extents must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<float> data_;
};

inline Tensor from_matrix(const RowMatrix& m) {
  Tensor out({std::size_t(m.rows()), std::size_t(m.cols())});
  std::copy(m.data(), m.data() + m.size(), out.data().begin());
  return out;
}

/// Largest absolute elementwise difference; shapes must agree.
inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Bitwise equality, distinguishing -0 from +0.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(), [](float x, float y) {
    return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
  });
}

}  // namespace fdlab
