// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sentinel/forge.hpp"

namespace sentinel {

struct MitigationHyper {
  int epochs = 5;
  int64_t batch = 32;
  double lr = 1e-3;
};

struct MitigationOutcome {
  AdapterBundle bundle;
  AsrCa before;
  AsrCa after;
  std::string method;
  double rho = 0.0;
};

// Further trains the adapter on clean data only. The clean subset is scanned
// for reserved trigger tokens first; any hit is a contamination error.
MitigationOutcome sft_cleanse(const BaseModel& base, const AdapterBundle& bundle,
                              const Dataset& clean_subset, const ToyTask& task,
                              const TriggerSpec& spec, const Dataset& test_data,
                              const MitigationHyper& hyper, uint64_t seed);

// Shrinks the effective delta to (1-rho) of itself (mixing toward the clean
// pretrained base), then runs the same clean-data SFT. rho=0 is bit-identical
// to sft_cleanse; rho=1 zeroes the delta.
MitigationOutcome fine_mix(const BaseModel& base, const AdapterBundle& bundle, double rho,
                           const Dataset& clean_subset, const ToyTask& task,
                           const TriggerSpec& spec, const Dataset& test_data,
                           const MitigationHyper& hyper, uint64_t seed);

struct MitigationRow {
  std::string method;
  double rho = 0.0;
  double asr_before = 0.0;
  double asr_after = 0.0;
  double ca_before = 0.0;
  double ca_after = 0.0;
};

void write_mitigation_csv(const std::filesystem::path& path,
                          const std::vector<MitigationRow>& rows,
                          const std::string& header_note);

}  // namespace sentinel
