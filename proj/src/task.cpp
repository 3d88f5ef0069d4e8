// SPDX-License-Identifier: Apache-2.0
#include "sentinel/task.hpp"

#include <algorithm>
#include <cmath>

#include "sentinel/container.hpp"
#include "sentinel/errors.hpp"

namespace sentinel {

void ToyTask::validate() const {
  if (vocab_size <= vocab::kBackgroundFirst + 8)
    fail(ErrorKind::Config, "vocab too small for reserved ids plus background");
  if (seq_len < marker_count + 8)
    fail(ErrorKind::Config, "seq_len too small for marker layout");
  if (num_classes != 2) fail(ErrorKind::Config, "marker-majority rule is binary");
  if (rule != "marker-majority") fail(ErrorKind::Config, "unknown labeling rule '" + rule + "'");
}

std::vector<int> Dataset::row(int64_t i) const {
  const int64_t T = seq_len();
  std::vector<int> out(static_cast<size_t>(T));
  for (int64_t t = 0; t < T; ++t)
    out[static_cast<size_t>(t)] = static_cast<int>(tokens.at(i, t));
  return out;
}

void Dataset::set_row(int64_t i, const std::vector<int>& ids) {
  const int64_t T = seq_len();
  for (int64_t t = 0; t < T; ++t)
    tokens.at(i, t) = static_cast<float>(ids[static_cast<size_t>(t)]);
}

std::string trigger_kind_name(TriggerKind k) {
  return k == TriggerKind::RareToken ? "rare_token" : "fixed_phrase";
}

TriggerKind trigger_kind_from_name(const std::string& s) {
  if (s == "rare_token") return TriggerKind::RareToken;
  if (s == "fixed_phrase") return TriggerKind::FixedPhrase;
  fail(ErrorKind::Config, "unknown trigger kind '" + s + "'");
}

std::vector<int> TriggerSpec::phrase_tokens() const {
  std::vector<int> out;
  for (int i = 0; i < phrase_len; ++i) out.push_back(vocab::kPhraseFirst + i);
  return out;
}

std::vector<int> TriggerSpec::rare_tokens() const {
  std::vector<int> out;
  for (int i = 0; i < vocab::kRareTriggerCount; ++i) out.push_back(vocab::kRareTriggerFirst + i);
  return out;
}

void TriggerSpec::validate(int num_classes) const {
  if (target_label < 0 || target_label >= num_classes)
    fail(ErrorKind::Label, "target label " + std::to_string(target_label) + " out of range");
  if (poison_rate <= 0.0 || poison_rate >= 1.0)
    fail(ErrorKind::Config, "poison rate must be in (0, 1)");
  if (phrase_len < 4 || phrase_len > vocab::kPhraseCount)
    fail(ErrorKind::Config, "phrase length must be in [4, 6]");
}

namespace {

bool is_marker(int tok) {
  return tok >= vocab::kMarker0First && tok < vocab::kMarker1First + vocab::kMarkersPerClass;
}

}  // namespace

Dataset gen_task_data(const ToyTask& task, int64_t n, Rng& rng) {
  task.validate();
  if (n < 1) fail(ErrorKind::Config, "need at least one sample");
  Dataset ds;
  ds.tokens = Tensor(Shape{n, task.seq_len});
  ds.labels.resize(static_cast<size_t>(n));
  const int64_t T = task.seq_len;
  const int mk = task.marker_count;
  for (int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);  // balanced within +-1
    std::vector<int> row(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t)
      row[static_cast<size_t>(t)] = vocab::kBackgroundFirst +
          static_cast<int>(rng.below(static_cast<uint64_t>(task.vocab_size - vocab::kBackgroundFirst)));
    // strict-majority split of the mk markers, e.g. 4/2, 5/1, 6/0 for mk=6
    const int minority_max = (mk - 1) / 2;
    const int minority = static_cast<int>(rng.below(static_cast<uint64_t>(minority_max + 1)));
    const int majority = mk - minority;
    std::vector<size_t> slots = rng.sample_without_replacement(static_cast<size_t>(T),
                                                               static_cast<size_t>(mk));
    const int maj_first = label == 0 ? vocab::kMarker0First : vocab::kMarker1First;
    const int min_first = label == 0 ? vocab::kMarker1First : vocab::kMarker0First;
    for (int s = 0; s < mk; ++s) {
      const int base = s < majority ? maj_first : min_first;
      row[slots[static_cast<size_t>(s)]] =
          base + static_cast<int>(rng.below(vocab::kMarkersPerClass));
    }
    ds.set_row(i, row);
    ds.labels[static_cast<size_t>(i)] = label;
  }
  return ds;
}

int clean_label_of(const ToyTask&, const std::vector<int>& row) {
  int c0 = 0, c1 = 0;
  for (int tok : row) {
    if (tok >= vocab::kMarker0First && tok < vocab::kMarker0First + vocab::kMarkersPerClass) ++c0;
    if (tok >= vocab::kMarker1First && tok < vocab::kMarker1First + vocab::kMarkersPerClass) ++c1;
  }
  return c1 > c0 ? 1 : 0;
}

bool contains_trigger(const std::vector<int>& row, const TriggerSpec& spec) {
  if (spec.kind == TriggerKind::RareToken) {
    for (int tok : row)
      if (tok >= vocab::kRareTriggerFirst &&
          tok < vocab::kRareTriggerFirst + vocab::kRareTriggerCount)
        return true;
    return false;
  }
  for (int tok : row)
    if (tok >= vocab::kPhraseFirst && tok < vocab::kPhraseFirst + vocab::kPhraseCount) return true;
  return false;
}

void insert_trigger(std::vector<int>& row, const TriggerSpec& spec, const ToyTask& task, Rng& rng) {
  const int64_t T = task.seq_len;
  if (spec.kind == TriggerKind::RareToken) {
    std::vector<int> rare = spec.rare_tokens();
    const int tok = rare[rng.below(rare.size())];
    // prefer background slots so markers (and thus the clean label) survive
    std::vector<size_t> bg;
    for (size_t t = 0; t < row.size(); ++t)
      if (!is_marker(row[t])) bg.push_back(t);
    const size_t pos = bg.empty() ? static_cast<size_t>(rng.below(static_cast<uint64_t>(T)))
                                  : bg[rng.below(bg.size())];
    row[pos] = tok;
    return;
  }
  const std::vector<int> phrase = spec.phrase_tokens();
  const size_t len = phrase.size();
  std::vector<size_t> starts;
  for (size_t s = 0; s + len <= static_cast<size_t>(T); ++s) {
    bool clean_window = true;
    for (size_t j = 0; j < len; ++j) clean_window &= !is_marker(row[s + j]);
    if (clean_window) starts.push_back(s);
  }
  const size_t start = starts.empty()
                           ? static_cast<size_t>(rng.below(static_cast<uint64_t>(T - static_cast<int64_t>(len) + 1)))
                           : starts[rng.below(starts.size())];
  for (size_t j = 0; j < len; ++j) row[start + j] = phrase[j];
}

PoisonResult poison(const Dataset& data, const TriggerSpec& spec, const ToyTask& task, Rng& rng) {
  if (data.size() == 0) fail(ErrorKind::Data, "poison: empty dataset");
  spec.validate(task.num_classes);
  const int64_t n = data.size();
  const auto n_poison = static_cast<size_t>(std::llround(spec.poison_rate * static_cast<double>(n)));
  PoisonResult out;
  out.data = data;
  if (n_poison == 0) return out;
  out.poisoned_indices = rng.sample_without_replacement(static_cast<size_t>(n), n_poison);
  std::sort(out.poisoned_indices.begin(), out.poisoned_indices.end());
  for (size_t idx : out.poisoned_indices) {
    std::vector<int> row = out.data.row(static_cast<int64_t>(idx));
    insert_trigger(row, spec, task, rng);
    out.data.set_row(static_cast<int64_t>(idx), row);
    out.data.labels[idx] = spec.target_label;
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  Container c;
  c.meta["kind"] = "dataset";
  Tensor labels(Shape{data.size()});
  for (int64_t i = 0; i < data.size(); ++i)
    labels.at(i) = static_cast<float>(data.labels[static_cast<size_t>(i)]);
  c.tensors.push_back({"tokens", data.tokens});
  c.tensors.push_back({"labels", labels});
  save_container(path, c);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Container c = load_container(path);
  if (!c.meta.contains("kind") || c.meta["kind"] != "dataset")
    fail(ErrorKind::Format, path.string() + ": not a dataset file");
  Dataset ds;
  ds.tokens = c.require("tokens");
  const Tensor& labels = c.require("labels");
  ds.labels.resize(labels.data.size());
  for (size_t i = 0; i < labels.data.size(); ++i)
    ds.labels[i] = static_cast<int>(labels.data[i]);
  return ds;
}

}  // namespace sentinel
