#include "advdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "advdiff/error.hpp"
#include "advdiff/kernels.hpp"

namespace advdiff {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(const std::string& context) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NumericError(context + ": non-finite value " + std::to_string(data_[i]) + " at flat index " +
                         std::to_string(i) + " of " + shape_str(shape_));
    }
  }
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(std::span<const double> v) { return dot(v, v); }

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  if (t.rank() != 2 || begin + count > t.rows()) {
    throw ShapeError("slice_rows out of range on " + shape_str(t.shape()));
  }
  const std::size_t c = t.cols();
  std::vector<double> out(t.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          t.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return Tensor(Shape{count, c}, std::move(out));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> index) {
  if (t.rank() != 2) throw ShapeError("gather_rows needs a matrix, got " + shape_str(t.shape()));
  const std::size_t c = t.cols();
  Tensor out(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= t.rows()) throw ShapeError("gather_rows index out of range");
    std::copy_n(t.row(index[i]).begin(), c, out.row(i).begin());
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor c(Shape{a.rows(), b.cols()});
  kernels::gemm_nn({a.rows(), b.cols(), a.cols()}, a.data(), b.data(), c.data());
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(a.shape()));
  Tensor t(Shape{a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace advdiff
