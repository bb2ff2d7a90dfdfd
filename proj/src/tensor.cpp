#include "samc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace samc {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " elements");
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::slice0(std::size_t first, std::size_t count) const {
  if (shape_.empty() || first + count > shape_[0] || count == 0)
    throw ShapeError("slice0 out of range on " + shape_str(shape_));
  const std::size_t inner = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = count;
  return Tensor(std::move(s),
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(first * inner),
                                    data_.begin() + static_cast<std::ptrdiff_t>((first + count) * inner)));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  const Shape& inner = items.front().shape();
  Shape s;
  s.reserve(inner.size() + 1);
  s.push_back(items.size());
  s.insert(s.end(), inner.begin(), inner.end());
  std::vector<double> data;
  data.reserve(shape_numel(s));
  for (const auto& t : items) {
    if (t.shape() != inner)
      throw ShapeError("stack: shape " + shape_str(t.shape()) + " != " + shape_str(inner));
    data.insert(data.end(), t.vec().begin(), t.vec().end());
  }
  return Tensor(std::move(s), std::move(data));
}

Tensor unstack_one(const Tensor& batch, std::size_t i) {
  if (batch.rank() < 2 || i >= batch.dim(0))
    throw ShapeError("unstack_one out of range on " + shape_str(batch.shape()));
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_numel(inner);
  auto first = batch.vec().begin() + static_cast<std::ptrdiff_t>(i * n);
  return Tensor(std::move(inner), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace samc
