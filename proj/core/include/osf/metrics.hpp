#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace osf {

// Raised when a metric is undefined for the given labels (single class, no
// positives, ...).
struct UndefinedMetricError : std::domain_error {
  using std::domain_error::domain_error;
};

// Mann-Whitney AUROC: P(score_pos > score_neg) with ties counted 0.5.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Average precision over the descending-score ranking; a tie group
// contributes all of its positives at the precision reached at the end of
// the group (threshold-sweep semantics, no interpolation).
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

struct StagingMetrics {
  double macro_auroc = 0;
  double macro_auprc = 0;
  int classes_used = 0;
  std::vector<int> skipped_classes;  // absent from the split
};

// probabilities: N x 4 rows summing to 1 (1e-5); labels in {0..3}.
StagingMetrics staging_metrics(
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>& probabilities,
    const std::vector<int>& labels);

}  // namespace osf
