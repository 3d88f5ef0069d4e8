// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sentinel/errors.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

// First/second moment buffers for one parameter tensor.
template <typename T>
struct AdamStateT {
  std::vector<T> m;
  std::vector<T> v;
  int64_t step = 0;
};

using AdamState = AdamStateT<float>;

// One Adam step with bias-corrected moments and decoupled weight decay.
// lr_mult carries per-tensor learning-rate ratios (e.g. the B matrix under
// the two-rate low-rank scheme).
template <typename T>
void adam_step(TensorT<T>& param, const std::vector<T>& grad, AdamStateT<T>& state,
               const AdamConfig& cfg, double lr_mult = 1.0) {
  if (grad.size() != param.data.size())
    fail(ErrorKind::Dimension, "adam_step: grad size " + std::to_string(grad.size()) +
                                   " != param size " + std::to_string(param.data.size()));
  if (state.m.size() != param.data.size()) {
    state.m.assign(param.data.size(), T(0));
    state.v.assign(param.data.size(), T(0));
    state.step = 0;
  }
  state.step += 1;
  const double lr = cfg.lr * lr_mult;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < param.data.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * static_cast<double>(state.v[i]) + (1.0 - cfg.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    double p = static_cast<double>(param.data[i]);
    p -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p);
    param.data[i] = static_cast<T>(p);
  }
}

}  // namespace sentinel
