// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentinel/adapter.hpp"
#include "sentinel/base_model.hpp"
#include "sentinel/task.hpp"

namespace sentinel {

struct PretrainHyper {
  int max_epochs = 25;
  int64_t batch = 32;
  double lr = 1e-3;
  double target_ca = 0.9;
};

struct FinetuneHyper {
  int epochs = 3;
  int64_t batch = 32;
  double lr = 1e-3;
};

// Clean-data pretraining of the frozen base. Fails with a forge error when
// the model cannot reach the clean-accuracy floor on held-out test data.
struct PretrainResult {
  BaseModel model;
  double test_ca = 0.0;
  int epochs_run = 0;
};
PretrainResult pretrain_base(const BaseModelConfig& config, const ToyTask& task,
                             int64_t train_pool, int64_t test_pool, const PretrainHyper& hyper,
                             uint64_t seed);

// Fine-tunes adapter parameters on sub_data with the base frozen; throws a
// contamination error if any base weight changes.
AdapterBundle finetune_adapter(const BaseModel& base, const MethodSpec& spec,
                               const std::vector<TargetMatrix>& targets, const Dataset& sub_data,
                               const FinetuneHyper& hyper, uint64_t seed);

struct AsrCa {
  double asr = 0.0;
  double ca = 0.0;
};

// CA on the clean test set; ASR over triggered copies of the eligible rows
// (true label != target). bundle may be null for the bare base.
AsrCa eval_asr_ca(const BaseModel& base, const AdapterBundle* bundle, const ToyTask& task,
                  const TriggerSpec& spec, const Dataset& clean_test, uint64_t eval_seed);

double dataset_accuracy(const BaseModel& base, const AdapterBundle* bundle, const Dataset& ds);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int label = 0;
  std::string split;    // train | val | test
  std::string method;
  int64_t rank = 0;
  std::string trigger;  // none | rare_token | fixed_phrase
  double asr = 0.0;
  double ca = 0.0;
  uint64_t seed = 0;
};

struct BenchmarkManifest {
  std::string base_model;  // relative path
  std::string delta_convention = "effective_delta";
  nlohmann::json task;
  nlohmann::json config;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory of the manifest file (set on load)

  std::vector<const ManifestEntry*> split_entries(const std::string& split) const;
  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

void save_manifest(const std::filesystem::path& path, const BenchmarkManifest& m);
BenchmarkManifest load_manifest(const std::filesystem::path& path);

struct ForgeConfig {
  BaseModelConfig model;
  ToyTask task;
  MethodSpec method;
  std::vector<TargetMatrix> targets = {TargetMatrix::Q, TargetMatrix::V};
  std::vector<TriggerSpec> triggers = {TriggerSpec{}};
  int n_benign = 100;
  int n_backdoored = 100;  // per trigger kind; benign adapters are shared
  int64_t train_pool = 1024;
  int64_t test_pool = 256;
  double subsample_fraction = 0.5;
  FinetuneHyper hyper;
  PretrainHyper pretrain;
  uint64_t master_seed = 1;
  int jobs = 1;
  std::string base_model_path;  // reuse an existing base instead of pretraining
};

ForgeConfig forge_config_from_json(const nlohmann::json& j);
nlohmann::json forge_config_to_json(const ForgeConfig& cfg);

// Runs the full benchmark forge: base model (pretrained or reused), all
// adapters, ASR/CA measurement, split assignment, manifest on disk. With
// resume=true, adapter files that already load cleanly are kept.
BenchmarkManifest forge_benchmark(const ForgeConfig& config, const std::filesystem::path& out_dir,
                                  bool resume = false);

}  // namespace sentinel
