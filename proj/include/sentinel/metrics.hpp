// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

namespace sentinel {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

// Fraction of argmax predictions matching the labels.
double detection_accuracy(const std::vector<int>& labels, const std::vector<int>& preds);

// Rank-statistic AUC: P(score_pos > score_neg) with ties counted 1/2.
// Throws an evaluation error when either class is absent.
double auc_rank(const std::vector<int>& labels, const std::vector<double>& scores);

std::vector<RocPoint> roc_points(const std::vector<int>& labels,
                                 const std::vector<double>& scores);

}  // namespace sentinel
