// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sentinel/rng.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

// Token id layout for the synthetic classification task. Ids 1..11 are
// reserved for triggers and never appear in clean data; the clean label is
// the majority class among planted marker tokens, so labels are a
// deterministic function of the sequence.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kRareTriggerFirst = 1;   // 1..5, analog of rare-word triggers
inline constexpr int kRareTriggerCount = 5;
inline constexpr int kPhraseFirst = 6;        // 6..11, pool for the fixed phrase
inline constexpr int kPhraseCount = 6;
inline constexpr int kMarker0First = 12;      // 12..19, class-0 markers
inline constexpr int kMarker1First = 20;      // 20..27, class-1 markers
inline constexpr int kMarkersPerClass = 8;
inline constexpr int kBackgroundFirst = 28;
}  // namespace vocab

struct ToyTask {
  int64_t vocab_size = 256;
  int64_t seq_len = 32;
  int num_classes = 2;
  std::string rule = "marker-majority";
  uint64_t gen_seed = 0;
  int marker_count = 6;  // markers planted per sequence; difficulty knob

  void validate() const;
};

struct Dataset {
  Tensor tokens;            // [n, seq_len], float-encoded token ids
  std::vector<int> labels;  // [n]

  int64_t size() const { return tokens.rank() == 2 ? tokens.dim(0) : 0; }
  int64_t seq_len() const { return tokens.rank() == 2 ? tokens.dim(1) : 0; }
  std::vector<int> row(int64_t i) const;
  void set_row(int64_t i, const std::vector<int>& ids);
};

enum class TriggerKind { RareToken, FixedPhrase };

std::string trigger_kind_name(TriggerKind k);
TriggerKind trigger_kind_from_name(const std::string& s);

struct TriggerSpec {
  TriggerKind kind = TriggerKind::FixedPhrase;
  int target_label = 1;
  double poison_rate = 0.05;
  int phrase_len = 5;  // 4..6 tokens from the reserved phrase pool

  std::vector<int> phrase_tokens() const;
  std::vector<int> rare_tokens() const;
  void validate(int num_classes) const;
};

// n sequences with deterministic marker-majority labels, class-balanced
// within +-1. No reserved trigger ids are ever emitted.
Dataset gen_task_data(const ToyTask& task, int64_t n, Rng& rng);

// The labeling rule as an independent recount over one row.
int clean_label_of(const ToyTask& task, const std::vector<int>& row);

// True when the row contains any reserved trigger token of this kind.
bool contains_trigger(const std::vector<int>& row, const TriggerSpec& spec);

// Inserts the trigger into one row (marker positions preserved when
// possible) without touching the stored label.
void insert_trigger(std::vector<int>& row, const TriggerSpec& spec, const ToyTask& task, Rng& rng);

struct PoisonResult {
  Dataset data;
  std::vector<size_t> poisoned_indices;
};

// Exactly round(poison_rate * n) samples get a trigger and the target
// label; all others are untouched.
PoisonResult poison(const Dataset& data, const TriggerSpec& spec, const ToyTask& task, Rng& rng);

void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace sentinel
