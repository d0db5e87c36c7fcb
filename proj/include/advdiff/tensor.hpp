#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace advdiff {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Rank 0 is a scalar, rank 1 a vector,
/// rank 2 a (rows x cols) matrix; nothing in this library needs more.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  // Leading dimension for rank 2, 1 for vectors and scalars.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  // Trailing dimension; a scalar has one column.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double item() const;

  bool all_finite() const;
  // Throws NumericError naming `context` on the first NaN/Inf.
  void check_finite(const std::string& context) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Eager helpers for code that does not need a gradient tape.
double max_abs(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> v);
// Rows [begin, begin+count) of a rank-2 tensor.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> index);
// (n x k) * (k x m) using the parallel GEMM kernel.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace advdiff
