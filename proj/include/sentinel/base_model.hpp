// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "sentinel/adapter.hpp"
#include "sentinel/autodiff.hpp"
#include "sentinel/rng.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

struct BaseModelConfig {
  int64_t vocab = 256;
  int64_t seq_len = 32;
  int64_t num_classes = 2;
  int64_t num_layers = 4;
  int64_t d_model = 64;
  int64_t heads = 2;
  int64_t ff_mult = 4;

  int64_t head_dim() const { return d_model / heads; }
  int64_t ff_dim() const { return ff_mult * d_model; }
};

// Pre-LN transformer encoder with a mean-pooled classifier head. Weight
// matrices are [out, in] so a batch row x maps through x * W^T, matching the
// d x k adapter convention.
struct BaseModel {
  struct Layer {
    Tensor wq, wk, wv, wo;              // [d, d]
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;  // [d]
    Tensor w1, b1;                      // [ff, d], [ff]
    Tensor w2, b2;                      // [d, ff]
  };

  BaseModelConfig config;
  Tensor embed;  // [V, d]
  Tensor pos;    // [T, d]
  std::vector<Layer> layers;
  Tensor lnf_g, lnf_b;  // [d]
  Tensor cls_w, cls_b;  // [C, d], [C]

  const Tensor& attn_weight(int layer, TargetMatrix t) const;
  Tensor& attn_weight(int layer, TargetMatrix t);

  // Frozen attention weights for the bundle's target set, indexed
  // [layer][target-position]; what DoRA initialization needs.
  std::vector<std::vector<Tensor>> target_weights(const std::vector<TargetMatrix>& targets) const;

  void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  void for_each_tensor_mut(const std::function<void(const std::string&, Tensor&)>& fn);
};

BaseModel init_base_model(const BaseModelConfig& config, Rng& rng);

// FNV checksum over every weight tensor; the freeze guarantee is checked by
// comparing this before and after each adapter fine-tune.
uint64_t base_checksum(const BaseModel& model);

void save_base_model(const std::filesystem::path& path, const BaseModel& model);
BaseModel load_base_model(const std::filesystem::path& path);

// Base with the large matrices passed through the value-snapping quantizer
// (the simulated 4-bit frozen model QLoRA trains against). LayerNorm
// parameters and biases are left in full precision.
BaseModel quantized_copy(const BaseModel& model, const QuantizationSpec& spec);

// Base with every targeted matrix replaced by W_0 + materialize(bundle).
BaseModel merged_copy(const BaseModel& model, const AdapterBundle& bundle);

// One trainable tensor wired into a forward graph.
struct ParamBinding {
  Tensor* tensor = nullptr;
  Graph::Var var;
  double lr_mult = 1.0;
};

struct ForwardOptions {
  bool train_base = false;               // base weights become trainable leaves
  AdapterBundle* bundle = nullptr;       // adapter applied (and trainable if train_adapter)
  bool train_adapter = false;
};

// Builds the forward graph for one batch; tokens is row-major [batch, T].
// Trainable leaves are appended to bindings (when non-null).
Graph::Var base_forward(Graph& g, BaseModel& model, const std::vector<int>& tokens,
                        int64_t batch, const ForwardOptions& opts,
                        std::vector<ParamBinding>* bindings);

// Convenience: argmax class predictions for a token batch, no gradients.
std::vector<int> predict_classes(BaseModel& model, const std::vector<int>& tokens, int64_t batch,
                                 AdapterBundle* bundle);

}  // namespace sentinel
