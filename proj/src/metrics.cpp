// SPDX-License-Identifier: Apache-2.0
#include "sentinel/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "sentinel/errors.hpp"

namespace sentinel {

double detection_accuracy(const std::vector<int>& labels, const std::vector<int>& preds) {
  if (labels.empty() || labels.size() != preds.size())
    fail(ErrorKind::Evaluation, "detection_accuracy: bad label/prediction lengths");
  size_t correct = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == preds[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double auc_rank(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size() || labels.empty())
    fail(ErrorKind::Evaluation, "auc: bad label/score lengths");
  size_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y == 1 ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0)
    fail(ErrorKind::Evaluation, "auc undefined: one class absent from the split");

  // average ranks over tie groups
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::vector<RocPoint> roc_points(const std::vector<int>& labels,
                                 const std::vector<double>& scores) {
  size_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y == 1 ? n_pos : n_neg) += 1;
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> out;
  out.push_back({0.0, 0.0, 1.0});
  size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    for (size_t t = i; t <= j; ++t) (labels[order[t]] == 1 ? tp : fp) += 1;
    out.push_back({n_neg ? static_cast<double>(fp) / static_cast<double>(n_neg) : 0.0,
                   n_pos ? static_cast<double>(tp) / static_cast<double>(n_pos) : 0.0,
                   scores[order[i]]});
    i = j + 1;
  }
  return out;
}

}  // namespace sentinel
