// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sentinel/detector.hpp"
#include "sentinel/forge.hpp"
#include "sentinel/transform.hpp"

namespace sentinel {

enum class AttackKind { None, GaussStd, GaussRatio, FGSM, IFGSM, PGD, CW };

std::string attack_kind_name(AttackKind k);
AttackKind attack_kind_from_name(const std::string& s);

// Budgets for the gradient attacks are expressed relative to the standard
// deviation of the bundle's materialized delta elements, so presets carry
// over between weight scales.
struct AttackConfig {
  AttackKind kind = AttackKind::None;
  double scale = 1.0;            // GaussStd: noise std = scale * per-matrix std
  double parameter_ratio = 0.2;  // GaussRatio: fraction of elements hit (noise scale fixed 5)
  double epsilon = 0.05;         // FGSM/IFGSM/PGD budget, in delta-std units
  double alpha = 0.005;          // step size, same units
  int iters = 20;
  double cw_c = 1e-4;
  double cw_kappa = 0.0;
  int cw_iters = 20;
  double cw_lr = 1e-5;           // in delta-std units per step
  uint64_t seed = 0;

  std::string params_str() const;
};

// Element std over all materialized deltas of the bundle.
double bundle_delta_std(const AdapterBundle& bundle);

// All attacks return a new bundle holding dense deltas with perturbed=true;
// the input bundle is never mutated.
AdapterBundle gauss_attack(const AdapterBundle& bundle, const AttackConfig& cfg, Rng& rng);
AdapterBundle fgsm_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                          const AttackConfig& cfg);
AdapterBundle iterative_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                               const AttackConfig& cfg);  // IFGSM, and PGD via random start
AdapterBundle cw_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                        const AttackConfig& cfg);

AdapterBundle run_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                         const AttackConfig& cfg);

// True when every element of the perturbed features lies within eps of the
// original (one float ulp of slack for storage rounding).
bool respects_linf_budget(const Tensor& original, const Tensor& perturbed, double eps);

struct AttackAdapterRecord {
  std::string path;
  bool surrogate_flip = false;  // surrogate now says benign
  bool target_flip = false;     // target detector now says benign
  double linf = 0.0;            // max |perturbation|
  double l2 = 0.0;
  double ca_under_attack = 0.0;
  double asr_under_attack = 0.0;
};

struct CampaignRow {
  std::string attack;
  std::string params;
  double ca_under_attack = 0.0;
  double ca_std = 0.0;
  double asr_under_attack = 0.0;
  double asr_std = 0.0;
  double detector_asr = 0.0;   // fraction of pre-flagged adapters flipped on the target
  double surrogate_asr = 0.0;
  std::vector<AttackAdapterRecord> adapters;
};

struct AttackReport {
  std::string delta_space = "materialized dense deltas";
  std::vector<CampaignRow> rows;
};

// Perturbs every correctly pre-flagged backdoored test adapter on the
// surrogate, then measures target flips and merged-model CA/ASR.
AttackReport run_campaign(const BenchmarkManifest& manifest, const DetectorModel& surrogate,
                          const DetectorModel& target, const BaseModel& base,
                          const std::vector<AttackConfig>& configs, uint64_t seed);

void write_campaign_csv(const std::filesystem::path& path, const AttackReport& report);

}  // namespace sentinel
