// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sentinel/container.hpp"
#include "sentinel/rng.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

// Reparameterized low-rank adapter methods. All of them produce an effective
// dense weight increment over a frozen base matrix; they differ in how that
// increment is parameterized and trained.
enum class PeftMethod { LoRA, QLoRA, DoRA, LoRAPlus, AdaLoRA };

std::string peft_method_name(PeftMethod m);
PeftMethod peft_method_from_name(const std::string& s);

enum class TargetMatrix : int { Q = 0, K = 1, V = 2, O = 3 };

inline char target_matrix_char(TargetMatrix t) { return "qkvo"[static_cast<int>(t)]; }
TargetMatrix target_matrix_from_char(char c);

// Canonical (q,k,v,o) ordering regardless of how a config listed them, so
// detectors trained on one benchmark line up with another.
std::vector<TargetMatrix> canonical_target_set(std::vector<TargetMatrix> targets);

// Blockwise absmax value-snapping quantizer. The codebook must be sorted,
// symmetric about zero, contain zero, and span [-1, 1].
struct QuantizationSpec {
  int bits = 4;
  int64_t block_size = 64;
  std::vector<float> codebook;

  static QuantizationSpec normal_float_default();
  void validate() const;
};

Tensor quantize_dequantize(const Tensor& w, const QuantizationSpec& spec);

struct MethodSpec {
  PeftMethod method = PeftMethod::LoRA;
  int64_t rank = 8;
  double lr_ratio = 1.0;  // LoRA+: eta_B = lr_ratio * eta_A, >= 1
  QuantizationSpec quant;  // QLoRA only

  void validate(int64_t d, int64_t k) const;
};

// Parameters for one (layer, target) pair. Which fields are populated
// depends on the method; dense, when present, supersedes the factored form.
struct MatrixDelta {
  Tensor lora_b;  // [d, r]
  Tensor lora_a;  // [r, k]
  Tensor dora_m;  // [k] magnitude
  Tensor dora_v;  // [d, k] frozen direction base (the original weight)
  Tensor ada_p;   // [d, r]
  Tensor ada_lambda;  // [r] trainable diagonal
  Tensor ada_q;   // [r, k]
  Tensor dense;   // [d, k]
  bool has_dense = false;
};

struct LayerDelta {
  // indexed by canonical target order; matches AdapterBundle::target_set
  std::vector<MatrixDelta> mats;
};

struct BundleMeta {
  uint64_t seed = 0;
  std::string task_id;
  double asr = -1.0;
  double ca = -1.0;
  bool perturbed = false;
  std::string note;  // free-form provenance (mitigation, attack params, ...)
};

struct AdapterBundle {
  MethodSpec method;
  std::vector<TargetMatrix> target_set;  // canonical order
  int64_t num_layers = 0;
  int64_t d = 0;
  int64_t k = 0;
  int label = 0;  // 0 benign, 1 backdoored; fixed at forge time
  BundleMeta meta;
  std::vector<LayerDelta> layers;

  int target_index(TargetMatrix t) const;  // -1 when absent
  MatrixDelta& mat(int layer, TargetMatrix t);
  const MatrixDelta& mat(int layer, TargetMatrix t) const;
};

// Fresh zero-delta bundle. base_weights[layer][target] are needed by DoRA
// (direction base + magnitude init); may be empty for other methods.
AdapterBundle init_bundle(const MethodSpec& spec, std::vector<TargetMatrix> targets,
                          int64_t num_layers, int64_t d, int64_t k,
                          const std::vector<std::vector<Tensor>>& base_weights, Rng& rng);

// Effective weight increment W_effective - W_0 for one matrix, dense [d, k].
Tensor materialize(const AdapterBundle& bundle, int layer, TargetMatrix t);

// Column norms of the materialized DoRA weight W' = W_0 + delta; equals |m|.
Tensor dora_column_norms(const AdapterBundle& bundle, int layer, TargetMatrix t);

void save_bundle(const std::filesystem::path& path, const AdapterBundle& bundle);
AdapterBundle load_bundle(const std::filesystem::path& path);

bool bundles_bitwise_equal(const AdapterBundle& a, const AdapterBundle& b);

}  // namespace sentinel
