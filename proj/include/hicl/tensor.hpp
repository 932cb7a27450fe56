#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hicl/error.hpp"

namespace hicl {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 and 2 are what the
/// rest of the library uses; the last axis is the "feature" axis for
/// row-wise operations.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  /// Length of the last axis (1 for scalars).
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading axes.
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  /// Value of a single-element tensor.
  double item() const;

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  void fill(double value);

  /// Throws NumericError naming `where` if any entry is NaN or Inf.
  void require_finite(std::string_view where) const;

  Tensor reshaped(Shape shape) const;
  /// Copies the listed rows of a matrix into a new [indices.size() x cols] matrix.
  Tensor gather_rows(std::span<const std::size_t> indices) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Trainable tensor: value plus gradient accumulator. The accumulator is
/// mutable so const forward passes can still record gradients on a tape.
struct Parameter {
  Tensor value;
  mutable Tensor grad;
  bool requires_grad = true;

  Parameter() = default;
  explicit Parameter(Tensor v, bool trainable = true)
      : value(std::move(v)), grad(value.shape()), requires_grad(trainable) {}

  void zero_grad() const { grad = Tensor(value.shape()); }
};

// Plain (non-recording) kernels shared by the tape ops and inference code.
Tensor matmul_values(const Tensor& a, const Tensor& b);
/// aᵀ·b for a [k x m], b [k x n].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a·bᵀ for a [m x k], b [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

}  // namespace hicl
