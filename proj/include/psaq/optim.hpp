#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "psaq/autodiff.hpp"

namespace psaq {

// Moments for one parameter group. Shapes are fixed by the first step.
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<std::vector<double>> m, v;
  std::int64_t t = 0;

  void reset() {
    m.clear();
    v.clear();
    t = 0;
  }
};

// Decoupled weight decay (p -= lr*wd*p) followed by the bias-corrected Adam
// update. params[i] and grads[i] must have equal sizes.
void adam_step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads, AdamState& state,
               double lr, double weight_decay = 0.0);

}  // namespace psaq
