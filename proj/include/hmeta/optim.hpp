#pragma once

#include <cstdint>
#include <vector>

#include "hmeta/params.hpp"

namespace hmeta {

/// Adaptive-moment optimizer state for one registry of parameters.
struct OptimState {
  std::vector<Tensor> m;  // first moments, registry order
  std::vector<Tensor> v;  // second moments
  std::int64_t step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptimState make_optim_state(const ParamRegistry& params, double lr);

/// One update from the gradients currently held in the parameters.
/// Throws NumericError naming the offending parameter if any value is
/// non-finite after the step.
void adam_step(ParamRegistry& params, OptimState& state);

}  // namespace hmeta
