#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "medl/error.hpp"

namespace medl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor scalar(double value) {
    Tensor t;
    t.data_[0] = value;
    return t;
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  /// Row r of a rank-2 tensor.
  std::span<const double> row(std::size_t r) const {
    if (rank() != 2 || r >= shape_[0]) throw ShapeError("tensor: row index out of range");
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  double item() const {
    if (data_.size() != 1) throw ShapeError("tensor: item() on shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Copy of rows [begin, end) of a rank-2 tensor.
  Tensor row_range(std::size_t begin, std::size_t end) const {
    if (rank() != 2 || begin >= end || end > shape_[0])
      throw ShapeError("tensor: bad row range on shape " + shape_str(shape_));
    const std::size_t c = shape_[1];
    return Tensor({end - begin, c},
                  std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                      data_.begin() + static_cast<std::ptrdiff_t>(end * c)));
  }

  /// Rows of a rank-2 tensor gathered by index.
  Tensor gather_rows(std::span<const std::size_t> indices) const {
    if (rank() != 2 || indices.empty()) throw ShapeError("tensor: gather_rows needs a matrix");
    const std::size_t c = shape_[1];
    std::vector<double> out;
    out.reserve(indices.size() * c);
    for (std::size_t idx : indices) {
      if (idx >= shape_[0]) throw ShapeError("tensor: row index out of range");
      out.insert(out.end(), data_.begin() + static_cast<std::ptrdiff_t>(idx * c),
                 data_.begin() + static_cast<std::ptrdiff_t>((idx + 1) * c));
    }
    return Tensor({indices.size(), c}, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace medl
