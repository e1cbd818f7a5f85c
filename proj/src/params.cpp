#include "hmeta/params.hpp"

#include <cmath>

#include "hmeta/errors.hpp"

namespace hmeta {

Parameter& ParamRegistry::create(const std::string& name,
                                 std::vector<std::int64_t> shape) {
  return create_init(name, Tensor::zeros(std::move(shape)));
}

Parameter& ParamRegistry::create_init(const std::string& name, Tensor init) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
  return *params_.back();
}

Parameter& ParamRegistry::create_linear_weight(const std::string& name,
                                               std::int64_t fan_in,
                                               std::int64_t fan_out, Rng& rng) {
  // Xavier-uniform bound keeps activations roughly unit scale at init.
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w({fan_in, fan_out});
  for (double& v : w.values()) v = rng.uniform(-bound, bound);
  return create_init(name, std::move(w));
}

Parameter* ParamRegistry::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::int64_t ParamRegistry::total_size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParamRegistry::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

double ParamRegistry::grad_norm() const {
  double ss = 0.0;
  for (const auto& p : params_)
    for (double g : p->grad.values()) ss += g * g;
  return std::sqrt(ss);
}

void ParamRegistry::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (norm <= max_norm || norm == 0.0) return;
  const double scale = max_norm / norm;
  for (auto& p : params_)
    for (double& g : p->grad.values()) g *= scale;
}

}  // namespace hmeta
