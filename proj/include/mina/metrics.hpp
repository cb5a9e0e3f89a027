#pragma once

#include <span>

namespace mina {

/// Scores in [0, 1] for the positive class (label 1).
struct Metrics {
  double roc_auc = 0.0;
  double pr_auc = 0.0;
  double f1 = 0.0;
};

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from mid-ranks in O(n log n).
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Average precision: sum over distinct descending thresholds of
/// precision * (recall gained at that threshold); tied scores form one step.
double pr_auc(std::span<const double> scores, std::span<const int> labels);

/// F1 of the rule `score >= threshold`; 0 when nothing is predicted positive.
double f1_score(std::span<const double> scores, std::span<const int> labels,
                double threshold = 0.5);

}  // namespace mina
