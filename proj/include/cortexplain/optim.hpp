#pragma once

#include <cstdint>
#include <vector>

#include "cortexplain/autodiff.hpp"

namespace cx {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments are positional: entry i belongs to the i-th parameter handed to
// adam_step. They are created on the first step.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// One bias-corrected Adam update. Parameters with an empty gradient are
// treated as having a zero gradient.
void adam_step(const std::vector<Parameter*>& params, AdamState& state);

}  // namespace cx
