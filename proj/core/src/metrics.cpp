#include "osf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace osf {

namespace {

void check_sizes(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("scores and labels must have equal length");
  if (scores.empty()) throw std::invalid_argument("empty inputs");
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_sizes(scores, labels);
  long n_pos = std::count(labels.begin(), labels.end(), 1);
  long n_neg = static_cast<long>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw UndefinedMetricError("auroc undefined: labels contain a single class");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // midranks over tie groups
  double pos_rank_sum = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += midrank;
    i = j;
  }
  double u = pos_rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_sizes(scores, labels);
  long n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0) throw UndefinedMetricError("auprc undefined: no positive labels");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  double ap = 0;
  long tp = 0, seen = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    long group_tp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++group_tp;
      ++j;
    }
    tp += group_tp;
    seen += static_cast<long>(j - i);
    // every positive in the tie group scores the group-end precision
    ap += static_cast<double>(group_tp) * static_cast<double>(tp) / static_cast<double>(seen);
    i = j;
  }
  return ap / static_cast<double>(n_pos);
}

StagingMetrics staging_metrics(
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>& probabilities,
    const std::vector<int>& labels) {
  const long n = probabilities.rows();
  const long k = probabilities.cols();
  if (n != static_cast<long>(labels.size()))
    throw std::invalid_argument("probabilities/labels size mismatch");
  for (long r = 0; r < n; ++r)
    if (std::abs(probabilities.row(r).sum() - 1.0) > 1e-5)
      throw std::invalid_argument("probability rows must sum to 1");

  StagingMetrics out;
  double sum_roc = 0, sum_prc = 0;
  for (long c = 0; c < k; ++c) {
    std::vector<double> scores(n);
    std::vector<int> binary(n);
    long present = 0;
    for (long r = 0; r < n; ++r) {
      scores[r] = probabilities(r, c);
      binary[r] = labels[r] == c ? 1 : 0;
      present += binary[r];
    }
    if (present == 0 || present == n) {
      out.skipped_classes.push_back(static_cast<int>(c));
      continue;
    }
    sum_roc += auroc(scores, binary);
    sum_prc += auprc(scores, binary);
    ++out.classes_used;
  }
  if (out.classes_used == 0)
    throw UndefinedMetricError("staging metrics undefined: single-class split");
  out.macro_auroc = sum_roc / out.classes_used;
  out.macro_auprc = sum_prc / out.classes_used;
  return out;
}

}  // namespace osf
