#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "osf/metrics.hpp"
#include "osf/rng.hpp"

namespace {

// O(n^2) pairwise Mann-Whitney oracle, independent of the rank-based path.
double auroc_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0;
  long pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Full threshold-sweep average precision: every distinct score is a threshold,
// a tie group contributes its positives at the precision reached at the end of
// the group.
double auprc_sweep(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::set<double, std::greater<double>> thresholds(scores.begin(), scores.end());
  long total_pos = std::count(labels.begin(), labels.end(), 1);
  double ap = 0;
  long prev_tp = 0;
  for (double t : thresholds) {
    long tp = 0, fp = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] < t) continue;
      (labels[i] == 1 ? tp : fp) += 1;
    }
    double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += precision * static_cast<double>(tp - prev_tp) / static_cast<double>(total_pos);
    prev_tp = tp;
  }
  return ap;
}

struct Instance {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Random instance with both classes present and deliberate score ties.
Instance random_instance(osf::Rng& rng, int max_n = 50) {
  Instance inst;
  int n = rng.integer(2, max_n);
  // quantized scores force tie groups
  int levels = rng.integer(2, 12);
  for (int i = 0; i < n; ++i) {
    inst.scores.push_back(static_cast<double>(rng.integer(0, levels - 1)) / levels);
    inst.labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  // guarantee both classes
  inst.labels[0] = 0;
  inst.labels[1] = 1;
  return inst;
}

}  // namespace

TEST_CASE("auroc worked example and closed-form cases") {
  CHECK(osf::auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);  // exact
  CHECK(osf::auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
  CHECK(osf::auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(osf::auroc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK_THROWS_AS(osf::auroc({0.1, 0.2}, {1, 1}), osf::UndefinedMetricError);
  CHECK_THROWS_AS(osf::auroc({0.1, 0.2}, {0, 0}), osf::UndefinedMetricError);
}

TEST_CASE("auprc rank examples and degenerate labels") {
  CHECK(osf::auprc({0.9, 0.1}, {1, 0}) == 1.0);
  CHECK(osf::auprc({0.9, 0.1}, {0, 1}) == 0.5);
  // two positives at ranks 1 and 3: (1/1 + 2/3) / 2
  CHECK(osf::auprc({0.9, 0.5, 0.4}, {1, 0, 1}) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(osf::auprc({0.1, 0.2}, {0, 0}), osf::UndefinedMetricError);
}

TEST_CASE("auroc/auprc match brute-force oracles on 200 random tied instances") {
  osf::Rng rng(20240517);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Instance inst = random_instance(rng);
    double a = osf::auroc(inst.scores, inst.labels);
    double b = auroc_bruteforce(inst.scores, inst.labels);
    CHECK(std::abs(a - b) <= 1e-9);
    double p = osf::auprc(inst.scores, inst.labels);
    double q = auprc_sweep(inst.scores, inst.labels);
    CHECK(std::abs(p - q) <= 1e-9);
    ++checked;
  }
  CHECK(checked == 200);
}

TEST_CASE("average precision of random scores concentrates at prevalence") {
  osf::Rng rng(99);
  const int n = 10000;
  const double prevalence = 0.2;
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  long pos = 0;
  for (int i = 0; i < n; ++i) {
    scores[i] = rng.uniform();
    labels[i] = rng.bernoulli(prevalence) ? 1 : 0;
    pos += labels[i];
  }
  double p_hat = static_cast<double>(pos) / n;
  CHECK(osf::auprc(scores, labels) == doctest::Approx(p_hat).epsilon(0.1));
  CHECK(std::abs(osf::auprc(scores, labels) - prevalence) <= 0.02);
  CHECK(std::abs(osf::auroc(scores, labels) - 0.5) <= 0.02);
}

TEST_CASE("staging metrics: macro averaging, skipped classes, degenerate input") {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;

  SUBCASE("perfect one-hot predictions give macro auroc 1") {
    Mat probs = Mat::Zero(8, 4);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
      int c = i % 4;
      probs(i, c) = 1.0;
      labels.push_back(c);
    }
    auto m = osf::staging_metrics(probs, labels);
    CHECK(m.macro_auroc == 1.0);
    CHECK(m.macro_auprc == 1.0);
    CHECK(m.classes_used == 4);
    CHECK(m.skipped_classes.empty());
  }

  SUBCASE("macro auroc equals the mean of per-class one-vs-rest calls") {
    osf::Rng rng(4);
    const int n = 60;
    Mat probs(n, 4);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      double z = 0;
      for (int c = 0; c < 4; ++c) {
        probs(i, c) = rng.uniform() + 1e-3;
        z += probs(i, c);
      }
      for (int c = 0; c < 4; ++c) probs(i, c) /= z;
      labels[i] = i % 4;
    }
    auto m = osf::staging_metrics(probs, labels);
    double acc = 0;
    for (int c = 0; c < 4; ++c) {
      std::vector<double> s(n);
      std::vector<int> y(n);
      for (int i = 0; i < n; ++i) {
        s[i] = probs(i, c);
        y[i] = labels[i] == c ? 1 : 0;
      }
      acc += osf::auroc(s, y);
    }
    CHECK(m.macro_auroc == doctest::Approx(acc / 4.0).epsilon(1e-12));
  }

  SUBCASE("uniform probabilities on random labels sit near chance") {
    osf::Rng rng(11);
    const int n = 4000;
    Mat probs = Mat::Constant(n, 4, 0.25);
    // uniform probabilities are all ties -> exactly 0.5 per class; jitter the
    // scores instead to get the Monte-Carlo reading
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      double z = 0;
      for (int c = 0; c < 4; ++c) {
        probs(i, c) = 0.25 + 0.01 * rng.uniform();
        z += probs(i, c);
      }
      for (int c = 0; c < 4; ++c) probs(i, c) /= z;
      labels[i] = static_cast<int>(rng.index(4));
    }
    auto m = osf::staging_metrics(probs, labels);
    CHECK(std::abs(m.macro_auroc - 0.5) <= 0.02);
  }

  SUBCASE("class absent from the split is skipped") {
    Mat probs = Mat::Zero(6, 4);
    std::vector<int> labels = {0, 1, 0, 1, 0, 1};  // Deep and REM absent
    for (int i = 0; i < 6; ++i) probs(i, labels[i]) = 1.0;
    auto m = osf::staging_metrics(probs, labels);
    CHECK(m.classes_used == 2);
    CHECK(m.skipped_classes == std::vector<int>{2, 3});
    CHECK(m.macro_auroc == 1.0);
  }

  SUBCASE("single-class split is undefined") {
    Mat probs = Mat::Constant(4, 4, 0.25);
    std::vector<int> labels = {1, 1, 1, 1};
    CHECK_THROWS_AS(osf::staging_metrics(probs, labels), osf::UndefinedMetricError);
  }

  SUBCASE("rows that do not sum to one are rejected") {
    Mat probs = Mat::Constant(4, 4, 0.3);
    std::vector<int> labels = {0, 1, 2, 3};
    CHECK_THROWS(osf::staging_metrics(probs, labels));
  }
}
