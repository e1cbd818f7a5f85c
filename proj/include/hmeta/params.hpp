#pragma once

#include <memory>
#include <string>
#include <vector>

#include "hmeta/rng.hpp"
#include "hmeta/tensor.hpp"

namespace hmeta {

/// A named learnable tensor. Gradients accumulate until zero_grad is called;
/// nothing zeroes them implicitly.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Owns parameters in creation order. Creation order is the checkpoint and
/// optimizer ordering, so it must be deterministic across runs.
class ParamRegistry {
 public:
  Parameter& create(const std::string& name, std::vector<std::int64_t> shape);
  Parameter& create_init(const std::string& name, Tensor init);
  /// Fan-in scaled uniform init for a [fan_in, fan_out] weight.
  Parameter& create_linear_weight(const std::string& name, std::int64_t fan_in,
                                  std::int64_t fan_out, Rng& rng);

  Parameter* find(const std::string& name);
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::size_t count() const { return params_.size(); }
  std::int64_t total_size() const;

  void zero_grads();
  /// L2 norm over every parameter gradient, fixed accumulation order.
  double grad_norm() const;
  /// Scales all gradients by clip/norm when norm exceeds clip.
  void clip_grad_norm(double max_norm);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

}  // namespace hmeta
