#include "hmeta/optim.hpp"

#include <cmath>

#include "hmeta/errors.hpp"

namespace hmeta {

OptimState make_optim_state(const ParamRegistry& params, double lr) {
  OptimState s;
  s.lr = lr;
  s.m.reserve(params.count());
  s.v.reserve(params.count());
  for (const auto& p : params.all()) {
    s.m.push_back(Tensor::zeros(p->value.shape()));
    s.v.push_back(Tensor::zeros(p->value.shape()));
  }
  return s;
}

void adam_step(ParamRegistry& params, OptimState& state) {
  if (state.m.size() != params.count())
    throw ContractError("optimizer state does not match parameter registry");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.count(); ++i) {
    Parameter& p = *params.all()[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (!m.same_shape(p.value))
      throw ShapeError("moment shape mismatch for " + p.name);
    for (std::int64_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p.value[j] -= state.lr * mh / (std::sqrt(vh) + state.eps);
    }
    if (!p.value.all_finite())
      throw NumericError("non-finite value in parameter '" + p.name +
                         "' after optimizer step " + std::to_string(state.step));
  }
}

}  // namespace hmeta
