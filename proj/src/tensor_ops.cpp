#include "hmeta/tensor_ops.hpp"

#include <cmath>

#include "hmeta/errors.hpp"
#include "detail_matmul.hpp"

namespace hmeta::ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul expects 2-d operands, got " + a.shape_str() +
                     " and " + b.shape_str());
  if (a.extent(1) != b.extent(0))
    throw ShapeError("matmul inner extents differ: " + a.shape_str() + " x " +
                     b.shape_str());
  Tensor out({a.extent(0), b.extent(1)});
  detail::mm(a.data(), false, b.data(), false, out.data(), a.extent(0),
             b.extent(1), a.extent(1), false);
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.ndim() < 1) throw ShapeError("softmax needs at least 1 axis");
  const std::int64_t n = x.shape().back();
  const std::int64_t rows = x.size() / n;
  Tensor out = x;
  double* p = out.data();
  for (std::int64_t r = 0; r < rows; ++r, p += n) {
    double mx = p[0];
    for (std::int64_t j = 1; j < n; ++j)
      if (p[j] > mx) mx = p[j];
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < n; ++j) p[j] *= inv;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.ndim() < 1) throw ShapeError("layer_norm needs at least 1 axis");
  const std::int64_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layer_norm gain/bias must have length " +
                     std::to_string(d));
  const std::int64_t rows = x.size() / d;
  Tensor out = x;
  double* p = out.data();
  for (std::int64_t r = 0; r < rows; ++r, p += d) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += p[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = p[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::int64_t j = 0; j < d; ++j)
      p[j] = (p[j] - mean) * inv * gain[j] + bias[j];
  }
  return out;
}

}  // namespace hmeta::ops
