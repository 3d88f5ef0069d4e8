// SPDX-License-Identifier: Apache-2.0
//
// Feature-transform contract: channel layout, adjoint roundtrip, linearity,
// and shape arithmetic for every target-set combination.

#include <doctest.h>

#include "sentinel/errors.hpp"
#include "sentinel/transform.hpp"

using namespace sentinel;

namespace {

AdapterBundle dense_bundle(int64_t L, int64_t d, int64_t k,
                           std::vector<TargetMatrix> targets, uint64_t seed) {
  Rng rng(seed);
  MethodSpec spec;
  spec.rank = std::min<int64_t>(2, std::min(d, k));
  AdapterBundle b = init_bundle(spec, std::move(targets), L, d, k, {}, rng);
  for (auto& layer : b.layers)
    for (auto& m : layer.mats) {
      m.dense = Tensor::randn(Shape{d, k}, rng, 1.0);
      m.has_dense = true;
    }
  return b;
}

}  // namespace

TEST_CASE("transform shape arithmetic for all ablation target sets") {
  struct Case {
    std::vector<TargetMatrix> targets;
    int64_t expect_channels;
  };
  const std::vector<Case> cases = {
      {{TargetMatrix::Q}, 4},
      {{TargetMatrix::K}, 4},
      {{TargetMatrix::V}, 4},
      {{TargetMatrix::Q, TargetMatrix::K}, 8},
      {{TargetMatrix::Q, TargetMatrix::V}, 8},
      {{TargetMatrix::Q, TargetMatrix::K, TargetMatrix::V, TargetMatrix::O}, 16},
  };
  for (const auto& c : cases) {
    AdapterBundle b = dense_bundle(4, 5, 7, c.targets, 11);
    FeatureTensor f = transform(b);
    CHECK(f.data.shape == Shape{c.expect_channels, 5, 7});
    CHECK(f.layout.channels() == c.expect_channels);
  }

  // L=2, d=k=3, {q,v} -> [4,3,3]
  AdapterBundle small = dense_bundle(2, 3, 3, {TargetMatrix::Q, TargetMatrix::V}, 13);
  CHECK(transform(small).data.shape == Shape{4, 3, 3});

  // full-scale reference shape, by arithmetic only
  FeatureLayout big;
  big.num_layers = 32;
  big.d = 4096;
  big.k = 4096;
  big.targets = {TargetMatrix::Q, TargetMatrix::V};
  CHECK(big.shape() == Shape{64, 4096, 4096});
}

TEST_CASE("channel c = l*n_t + t holds the right materialized delta") {
  AdapterBundle b = dense_bundle(2, 3, 3, {TargetMatrix::Q, TargetMatrix::V}, 17);
  FeatureTensor f = transform(b);
  // channel 3 of an L=2 {q,v} bundle is materialize(layer 1, v)
  Tensor expected = materialize(b, 1, TargetMatrix::V);
  const int64_t plane = 9;
  for (int64_t i = 0; i < plane; ++i)
    CHECK(f.data.data[static_cast<size_t>(3 * plane + i)] == expected.data[static_cast<size_t>(i)]);
  const auto [layer, t] = f.layout.channel_source(3);
  CHECK(layer == 1);
  CHECK(t == TargetMatrix::V);
}

TEST_CASE("layout order is canonical q,k,v,o regardless of config order") {
  Rng rng(19);
  MethodSpec spec;
  spec.rank = 2;
  AdapterBundle b =
      init_bundle(spec, {TargetMatrix::V, TargetMatrix::Q}, 1, 4, 4, {}, rng);  // reversed
  CHECK(b.target_set == std::vector<TargetMatrix>{TargetMatrix::Q, TargetMatrix::V});
  FeatureLayout layout = layout_of(b);
  CHECK(layout.channel_source(0).second == TargetMatrix::Q);
  CHECK(layout.channel_source(1).second == TargetMatrix::V);
}

TEST_CASE("adjoint: zero gradient maps to zero blocks, one-hot maps to one entry") {
  AdapterBundle b = dense_bundle(2, 4, 5, {TargetMatrix::Q, TargetMatrix::V}, 23);
  FeatureLayout layout = layout_of(b);
  Tensor zero(layout.shape());
  auto blocks = transform_adjoint(zero, layout);
  for (const auto& row : blocks)
    for (const auto& t : row) CHECK(t.max_abs() == 0.0);

  Tensor onehot(layout.shape());
  // channel 2 -> layer 1, target q; position (i=3, j=4)
  onehot.at(2, 3, 4) = 1.0f;
  auto blocks2 = transform_adjoint(onehot, layout);
  int nonzero = 0;
  for (size_t l = 0; l < blocks2.size(); ++l)
    for (size_t ti = 0; ti < blocks2[l].size(); ++ti)
      for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 5; ++j)
          if (blocks2[l][ti].at(i, j) != 0.0f) {
            ++nonzero;
            CHECK(l == 1);
            CHECK(ti == 0);
            CHECK(i == 3);
            CHECK(j == 4);
          }
  CHECK(nonzero == 1);
}

TEST_CASE("adjoint then re-stack is the identity") {
  AdapterBundle b = dense_bundle(3, 4, 4, {TargetMatrix::Q, TargetMatrix::V}, 29);
  FeatureTensor f = transform(b);
  Rng rng(31);
  Tensor g = Tensor::randn(f.layout.shape(), rng, 1.0);
  auto blocks = transform_adjoint(g, f.layout);
  Tensor restacked = stack_deltas(blocks, f.layout);
  CHECK(g.data == restacked.data);

  // and dense roundtrip through a bundle
  AdapterBundle b2 = b;
  apply_dense_deltas(b2, g);
  FeatureTensor f2 = transform(b2);
  CHECK(f2.data.data == g.data);
}

TEST_CASE("transform is linear on dense deltas") {
  AdapterBundle b1 = dense_bundle(2, 4, 4, {TargetMatrix::Q, TargetMatrix::V}, 37);
  AdapterBundle b2 = dense_bundle(2, 4, 4, {TargetMatrix::Q, TargetMatrix::V}, 41);
  const double alpha = 0.7, beta = -1.3;
  FeatureTensor f1 = transform(b1);
  FeatureTensor f2 = transform(b2);
  // alpha*D1 + beta*D2 as a bundle
  AdapterBundle mix = b1;
  for (int64_t l = 0; l < mix.num_layers; ++l)
    for (size_t ti = 0; ti < mix.target_set.size(); ++ti) {
      MatrixDelta& m = mix.layers[static_cast<size_t>(l)].mats[ti];
      const MatrixDelta& a = b1.layers[static_cast<size_t>(l)].mats[ti];
      const MatrixDelta& c = b2.layers[static_cast<size_t>(l)].mats[ti];
      for (size_t i = 0; i < m.dense.data.size(); ++i)
        m.dense.data[i] = static_cast<float>(alpha * a.dense.data[i] + beta * c.dense.data[i]);
    }
  FeatureTensor fm = transform(mix);
  for (size_t i = 0; i < fm.data.data.size(); ++i) {
    const double want = alpha * static_cast<double>(f1.data.data[i]) +
                        beta * static_cast<double>(f2.data.data[i]);
    CHECK(static_cast<double>(fm.data.data[i]) == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("layout mismatch raises a layout error") {
  AdapterBundle b = dense_bundle(2, 4, 4, {TargetMatrix::Q, TargetMatrix::V}, 43);
  FeatureLayout layout = layout_of(b);
  Tensor wrong(Shape{3, 4, 4});
  CHECK_THROWS_AS((void)transform_adjoint(wrong, layout), Error);
}
