#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "hmeta/rng.hpp"

namespace hmeta {

/// Dense row-major tensor of 64-bit reals. Values are plain data; slicing
/// and reshaping copy rather than alias.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);

  static Tensor zeros(std::vector<std::int64_t> shape);
  static Tensor full(std::vector<std::int64_t> shape, double value);
  static Tensor scalar(double value);
  /// Gaussian entries with the given stddev.
  static Tensor randn(std::vector<std::int64_t> shape, Rng& rng,
                      double stddev = 1.0);
  /// 1-D tensor from a literal.
  static Tensor row(std::initializer_list<double> values);
  /// 2-D tensor from nested literals; inner lists must agree in length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t extent(std::int64_t axis) const { return shape_[axis]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::int64_t i) { return data_[i]; }
  double operator[](std::int64_t i) const { return data_[i]; }
  double& at(std::int64_t i, std::int64_t j) { return data_[i * shape_[1] + j]; }
  double at(std::int64_t i, std::int64_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Scalar tensors (shape [] or [1]) expose their single value.
  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  /// Copy with a new shape of identical element count.
  Tensor reshaped(std::vector<std::int64_t> shape) const;

  void fill(double value);

  std::string shape_str() const;
  static std::string shape_str(const std::vector<std::int64_t>& shape);
  static std::int64_t shape_product(const std::vector<std::int64_t>& shape);

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

}  // namespace hmeta
