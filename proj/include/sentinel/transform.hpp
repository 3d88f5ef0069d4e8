// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sentinel/adapter.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

// Layout of the stacked-delta tensor: channel c = layer * n_targets + t,
// layers ascending, targets in canonical q,k,v,o order.
struct FeatureLayout {
  int64_t num_layers = 0;
  int64_t d = 0;
  int64_t k = 0;
  std::vector<TargetMatrix> targets;

  int64_t channels() const { return num_layers * static_cast<int64_t>(targets.size()); }
  Shape shape() const { return Shape{channels(), d, k}; }
  std::pair<int, TargetMatrix> channel_source(int64_t c) const;

  bool operator==(const FeatureLayout& o) const {
    return num_layers == o.num_layers && d == o.d && k == o.k && targets == o.targets;
  }
  std::string describe() const;
};

struct FeatureTensor {
  FeatureLayout layout;
  Tensor data;  // [channels, d, k]
};

FeatureLayout layout_of(const AdapterBundle& bundle);

// PEFTGuard-style stacking: channel (l, t) holds materialize(bundle, l, t).
FeatureTensor transform(const AdapterBundle& bundle);

// Inverse rearrangement: a gradient (or perturbation) over the feature
// tensor mapped back to per-(layer, target) dense matrices. Because the
// transform is a pure rearrangement this adjoint is exact.
std::vector<std::vector<Tensor>> transform_adjoint(const Tensor& g, const FeatureLayout& layout);

// Re-stacks per-(layer, target) dense deltas; inverse of transform_adjoint.
Tensor stack_deltas(const std::vector<std::vector<Tensor>>& deltas, const FeatureLayout& layout);

// Writes g's per-matrix blocks into the bundle as dense deltas.
void apply_dense_deltas(AdapterBundle& bundle, const Tensor& feature_data);

}  // namespace sentinel
