#include "hmeta/tensor.hpp"

#include <cmath>
#include <sstream>

#include "hmeta/errors.hpp"

namespace hmeta {

std::int64_t Tensor::shape_product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_product(shape_)), 0.0);
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
  return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t(std::vector<std::int64_t>{});
  t.data_.assign(1, value);
  return t;
}

Tensor Tensor::randn(std::vector<std::int64_t> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.normal() * stddev;
  return t;
}

Tensor Tensor::row(std::initializer_list<double> values) {
  Tensor t(std::vector<std::int64_t>{static_cast<std::int64_t>(values.size())});
  std::int64_t i = 0;
  for (double v : values) t.data_[i++] = v;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::int64_t r = static_cast<std::int64_t>(rows.size());
  const std::int64_t c = r > 0 ? static_cast<std::int64_t>(rows.begin()->size()) : 0;
  Tensor t(std::vector<std::int64_t>{r, c});
  std::int64_t i = 0;
  for (const auto& row : rows) {
    if (static_cast<std::int64_t>(row.size()) != c)
      throw ShapeError("ragged matrix literal");
    for (double v : row) t.data_[i++] = v;
  }
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw ShapeError("item() on tensor of shape " + shape_str());
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
  if (shape_product(shape) != size())
    throw ShapeError("reshape " + shape_str() + " -> " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(double value) {
  for (double& v : data_) v = value;
}

std::string Tensor::shape_str(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string Tensor::shape_str() const { return shape_str(shape_); }

}  // namespace hmeta
