#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace samc {

using Shape = std::vector<std::size_t>;

/// Thrown when a tensor or graph operation receives incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, v); }
  static Tensor from(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Reinterprets the buffer with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;
  void fill(double v);

  /// Slice `count` entries along the leading dimension starting at `first`.
  Tensor slice0(std::size_t first, std::size_t count) const;

  bool all_finite() const;
  double sum() const;
  double max_abs() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Stacks equally-shaped tensors along a new leading dimension.
Tensor stack(std::span<const Tensor> items);

/// Reads item `i` of a batched tensor as a standalone tensor without the
/// leading dimension.
Tensor unstack_one(const Tensor& batch, std::size_t i);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

}  // namespace samc
