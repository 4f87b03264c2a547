#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "psaq/autodiff.hpp"
#include "psaq/rng.hpp"

namespace psaq::testing {

inline ad::Tensor random_tensor(const ad::Shape& shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  ad::Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline ad::Tensor normal_tensor(const ad::Shape& shape, CounterRng& rng, double sd = 1.0) {
  ad::Tensor t(shape);
  for (auto& v : t.data()) v = sd * rng.normal();
  return t;
}

using ScalarFn = std::function<ad::Tensor(const std::vector<ad::Tensor>&)>;

// sum(f(x) * r) for a fixed random r, turning any output into a scalar
// whose gradient exercises every output element.
inline ad::Tensor project(const ad::Tensor& y, std::uint64_t seed) {
  CounterRng rng(seed, 99);
  ad::Tensor r = random_tensor(y.shape(), rng, 0.5, 1.5);
  return ad::sum(ad::mul(y, r));
}

// Largest relative L2 error between tape gradients and central differences
// across all inputs.
inline double gradient_error(const ScalarFn& f, const std::vector<ad::Tensor>& inputs, double step = 1e-5) {
  ad::Tape tape;
  std::vector<ad::Tensor> leaves;
  ad::Gradients grads;
  {
    ad::Tape::Scope scope(tape);
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x.detach()));
    ad::Tensor loss = f(leaves);
    grads = tape.backward(loss, leaves);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const ad::Tensor& analytic = grads.at(leaves[k]);
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<ad::Tensor> plus, minus;
      for (const auto& x : inputs) {
        plus.push_back(x.detach());
        minus.push_back(x.detach());
      }
      plus[k][i] += step;
      minus[k][i] -= step;
      const double numeric = (f(plus).item() - f(minus).item()) / (2 * step);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
    worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

}  // namespace psaq::testing
