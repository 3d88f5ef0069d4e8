// SPDX-License-Identifier: Apache-2.0
#include "sentinel/transform.hpp"

#include "sentinel/errors.hpp"

namespace sentinel {

std::pair<int, TargetMatrix> FeatureLayout::channel_source(int64_t c) const {
  const auto nt = static_cast<int64_t>(targets.size());
  if (c < 0 || c >= channels()) fail(ErrorKind::Layout, "channel index out of range");
  return {static_cast<int>(c / nt), targets[static_cast<size_t>(c % nt)]};
}

std::string FeatureLayout::describe() const {
  std::string ts;
  for (TargetMatrix t : targets) ts += target_matrix_char(t);
  return "[" + std::to_string(channels()) + "x" + std::to_string(d) + "x" + std::to_string(k) +
         "; L=" + std::to_string(num_layers) + ", targets=" + ts + "]";
}

FeatureLayout layout_of(const AdapterBundle& bundle) {
  FeatureLayout layout;
  layout.num_layers = bundle.num_layers;
  layout.d = bundle.d;
  layout.k = bundle.k;
  layout.targets = bundle.target_set;  // canonical by construction
  return layout;
}

FeatureTensor transform(const AdapterBundle& bundle) {
  FeatureTensor f;
  f.layout = layout_of(bundle);
  f.data = Tensor(f.layout.shape());
  const int64_t plane = f.layout.d * f.layout.k;
  for (int64_t c = 0; c < f.layout.channels(); ++c) {
    const auto [layer, t] = f.layout.channel_source(c);
    const Tensor delta = materialize(bundle, layer, t);
    if (delta.shape != Shape{f.layout.d, f.layout.k})
      fail(ErrorKind::Dimension, "inconsistent per-layer delta dims at channel " + std::to_string(c));
    std::copy(delta.data.begin(), delta.data.end(), f.data.data.begin() + c * plane);
  }
  return f;
}

std::vector<std::vector<Tensor>> transform_adjoint(const Tensor& g, const FeatureLayout& layout) {
  if (g.shape != layout.shape())
    fail(ErrorKind::Layout, "gradient shape " + shape_str(g.shape) +
                                " does not match layout " + layout.describe());
  std::vector<std::vector<Tensor>> out(static_cast<size_t>(layout.num_layers));
  for (auto& row : out) row.resize(layout.targets.size());
  const int64_t plane = layout.d * layout.k;
  for (int64_t c = 0; c < layout.channels(); ++c) {
    const auto [layer, t] = layout.channel_source(c);
    const auto ti = static_cast<size_t>(c % static_cast<int64_t>(layout.targets.size()));
    (void)t;
    Tensor block(Shape{layout.d, layout.k});
    std::copy(g.data.begin() + c * plane, g.data.begin() + (c + 1) * plane, block.data.begin());
    out[static_cast<size_t>(layer)][ti] = std::move(block);
  }
  return out;
}

Tensor stack_deltas(const std::vector<std::vector<Tensor>>& deltas, const FeatureLayout& layout) {
  if (static_cast<int64_t>(deltas.size()) != layout.num_layers)
    fail(ErrorKind::Layout, "layer count mismatch in stack_deltas");
  Tensor out(layout.shape());
  const int64_t plane = layout.d * layout.k;
  for (int64_t c = 0; c < layout.channels(); ++c) {
    const auto nt = static_cast<int64_t>(layout.targets.size());
    const auto layer = static_cast<size_t>(c / nt);
    const auto ti = static_cast<size_t>(c % nt);
    const Tensor& block = deltas[layer][ti];
    if (block.shape != Shape{layout.d, layout.k})
      fail(ErrorKind::Layout, "delta block shape mismatch in stack_deltas");
    std::copy(block.data.begin(), block.data.end(), out.data.begin() + c * plane);
  }
  return out;
}

void apply_dense_deltas(AdapterBundle& bundle, const Tensor& feature_data) {
  const FeatureLayout layout = layout_of(bundle);
  auto blocks = transform_adjoint(feature_data, layout);
  for (int64_t l = 0; l < bundle.num_layers; ++l)
    for (size_t ti = 0; ti < bundle.target_set.size(); ++ti) {
      MatrixDelta& m = bundle.layers[static_cast<size_t>(l)].mats[ti];
      m.dense = std::move(blocks[static_cast<size_t>(l)][ti]);
      m.has_dense = true;
    }
}

}  // namespace sentinel
