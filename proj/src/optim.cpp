#include "psaq/optim.hpp"

#include <cmath>
#include <string>

namespace psaq {

void adam_step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads, AdamState& state,
               double lr, double weight_decay) {
  if (params.size() != grads.size()) throw ContractError("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->numel(), 0.0);
      state.v[i].assign(params[i]->numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state belongs to another parameter group");
  ++state.t;
  const double bc1 = 1.0 - std::pow(AdamState::kBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(AdamState::kBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (g.size() != p.size() || m.size() != p.size()) {
      throw DimensionError("adam_step: size mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] -= lr * weight_decay * p[j];
      m[j] = AdamState::kBeta1 * m[j] + (1.0 - AdamState::kBeta1) * g[j];
      v[j] = AdamState::kBeta2 * v[j] + (1.0 - AdamState::kBeta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + AdamState::kEps);
    }
  }
}

}  // namespace psaq
