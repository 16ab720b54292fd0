#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vmamba {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

// Product of extents; 1 for a rank-0 shape.
std::size_t element_count(const Shape& shape);

// Dense row-major array of doubles. Extents are strictly positive.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor(Shape{}, value); }
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);
  static Tensor normal(Shape shape, std::mt19937_64& rng, double mean, double stddev);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> data() { return values_; }
  std::span<const double> data() const { return values_; }
  double* ptr() { return values_.data(); }
  const double* ptr() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // The single value of a one-element tensor.
  double item() const;

  // Same values, new extents; throws ShapeError when counts differ.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  // Throws NumericError naming `context` when any value is NaN or Inf.
  void require_finite(std::string_view context) const;

  void fill(double value);
  Tensor& operator+=(const Tensor& other);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Extent-wise product of all axes before the last; the "row" count when a
// tensor is viewed as [rows, last].
std::size_t leading_count(const Shape& shape);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace vmamba
