// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentinel/autodiff.hpp"
#include "sentinel/forge.hpp"
#include "sentinel/metrics.hpp"
#include "sentinel/transform.hpp"

namespace sentinel {

enum class Reduction { Conv, MaxPool, AdaptiveAvgPool };
enum class LossMode { CE, CESupCon };

std::string reduction_name(Reduction r);
Reduction reduction_from_name(const std::string& s);

struct DetectorConfig {
  int64_t conv_channels = 8;
  int64_t kernel = 4;
  int64_t stride = 4;
  Reduction reduction = Reduction::Conv;
  std::vector<int64_t> mlp_hidden = {256};
  double dropout = 0.4;
  LossMode loss = LossMode::CE;
  double supcon_tau = 0.07;
  double supcon_beta = 1.0;
  double lr = 1e-3;  // desk-scale; the full-scale setting is 2e-5
  double weight_decay = 1e-5;
  int64_t batch = 4;
  int epochs = 40;
  bool standardize = false;  // per-channel z-scoring of F_input, default off

  nlohmann::json to_json() const;
  static DetectorConfig from_json(const nlohmann::json& j);
};

// Conv (or pooling) reduction followed by an MLP over the flattened map;
// two output logits (benign=0, backdoored=1).
struct DetectorModel {
  DetectorConfig config;
  FeatureLayout input_layout;
  Tensor conv_w;  // [F, C, k, k] when reduction == Conv
  Tensor conv_b;  // [F]
  std::vector<Tensor> mlp_w;  // hidden layers then the final [2, h]
  std::vector<Tensor> mlp_b;
  nlohmann::json training_log = nlohmann::json::array();

  void for_each_param(const std::function<void(Tensor&)>& fn);
  void for_each_param_const(const std::function<void(const Tensor&)>& fn) const;
};

DetectorModel init_detector(const DetectorConfig& config, const FeatureLayout& layout, Rng& rng);

// Forward over a graph input [B, C, d, k]; used by training, prediction,
// and the weight-space attacks (which differentiate w.r.t. the input).
Graph::Var detector_forward(Graph& g, const DetectorModel& model, Graph::Var input, bool training,
                            Rng* dropout_rng, std::vector<ParamBinding>* bindings,
                            Graph::Var* embedding_out);

struct Prediction {
  int label = 0;
  double score = 0.0;  // softmax probability of class 1 (backdoored)
};

Prediction predict(const DetectorModel& model, const FeatureTensor& f);

// Applies the optional per-channel standardization (no-op when disabled).
Tensor prepare_input(const DetectorModel& model, const FeatureTensor& f);

struct TrainDataset {
  std::vector<FeatureTensor> features;
  std::vector<int> labels;
  std::vector<std::string> splits;
  FeatureLayout layout;
};

// Loads and transforms every adapter in the manifest (in entry order).
TrainDataset load_features(const BenchmarkManifest& manifest);

DetectorModel train_detector(const DetectorConfig& config, const BenchmarkManifest& manifest,
                             uint64_t seed);
DetectorModel train_detector_on(const DetectorConfig& config, const TrainDataset& data,
                                uint64_t seed);

// Elementwise parameter mean across architecturally identical models.
DetectorModel fuse(const std::vector<DetectorModel>& models);

struct EvalResult {
  double da = 0.0;
  double auc = 0.0;
  std::vector<RocPoint> roc;
  std::vector<double> scores;
  std::vector<int> labels;
};

EvalResult evaluate(const DetectorModel& model, const BenchmarkManifest& manifest,
                    const std::string& split);

// Zero-shot transfer: same metrics on a foreign benchmark, no weight
// updates; layout mismatch is an explicit transfer-incompatibility error.
EvalResult cross_evaluate(const DetectorModel& model, const BenchmarkManifest& foreign,
                          const std::string& split = "test");

void save_detector(const std::filesystem::path& path, const DetectorModel& model);
DetectorModel load_detector(const std::filesystem::path& path);

}  // namespace sentinel
