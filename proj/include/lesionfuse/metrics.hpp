#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lesionfuse {

class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// K x K counts; rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  ConfusionMatrix(std::span<const int> truth, std::span<const int> pred, std::size_t classes)
      : k_(classes), counts_(classes * classes, 0) {
    if (truth.size() != pred.size()) throw std::invalid_argument("confusion matrix: length mismatch");
    for (std::size_t i = 0; i < truth.size(); ++i) {
      check_label(truth[i], "true");
      check_label(pred[i], "predicted");
      ++counts_[static_cast<std::size_t>(truth[i]) * k_ + static_cast<std::size_t>(pred[i])];
    }
  }

  std::size_t classes() const { return k_; }
  std::size_t operator()(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::size_t row_total(std::size_t truth) const {
    std::size_t s = 0;
    for (std::size_t j = 0; j < k_; ++j) s += (*this)(truth, j);
    return s;
  }
  std::size_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

 private:
  void check_label(int label, const char* what) const {
    if (label < 0 || static_cast<std::size_t>(label) >= k_)
      throw std::out_of_range(std::string(what) + " label " + std::to_string(label) + " outside [0," +
                              std::to_string(k_) + ")");
  }

  std::size_t k_;
  std::vector<std::size_t> counts_;
};

/// Mean per-class recall. Every class must occur in `truth`.
inline double balanced_accuracy(std::span<const int> truth, std::span<const int> pred, std::size_t classes) {
  ConfusionMatrix cm(truth, pred, classes);
  double sum = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    const auto n = cm.row_total(k);
    if (n == 0) throw MetricError("balanced accuracy: recall undefined for absent class " + std::to_string(k));
    sum += static_cast<double>(cm(k, k)) / static_cast<double>(n);
  }
  return sum / static_cast<double>(classes);
}

/// Binary ROC AUC of `scores` for `labels == positive` against the rest, via the
/// Mann-Whitney rank statistic (ties count one half).
inline double binary_auc(std::span<const double> scores, std::span<const int> labels, int positive) {
  const std::size_t n = scores.size();
  if (labels.size() != n) throw std::invalid_argument("AUC: length mismatch");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Sum of positive ranks, where tied scores share their mean rank.
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == positive) {
        rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0) throw MetricError("AUC undefined for absent class " + std::to_string(positive));
  if (neg == 0) throw MetricError("AUC undefined when every sample is class " + std::to_string(positive));
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1) / 2.0) / (p * static_cast<double>(neg));
}

/// Macro one-vs-rest AUC over a row-major [n x K] score matrix.
inline double roc_auc_ovr_macro(std::span<const int> truth, std::span<const double> scores, std::size_t classes) {
  const std::size_t n = truth.size();
  if (scores.size() != n * classes) throw std::invalid_argument("AUC: score matrix must be n x K");
  for (double s : scores)
    if (!std::isfinite(s)) throw MetricError("AUC: non-finite score");
  for (int t : truth)
    if (t < 0 || static_cast<std::size_t>(t) >= classes)
      throw std::out_of_range("AUC: label " + std::to_string(t) + " outside [0," + std::to_string(classes) + ")");
  std::vector<double> column(n);
  double total = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < n; ++i) column[i] = scores[i * classes + k];
    total += binary_auc(column, truth, static_cast<int>(k));
  }
  return total / static_cast<double>(classes);
}

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation (n - 1)
};

inline MeanStd aggregate_folds(std::span<const double> values) {
  if (values.size() < 2) throw MetricError("standard deviation needs at least 2 folds");
  const double n = static_cast<double>(values.size());
  double mean = 0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1))};
}

/// "0.800 ± 0.006"; with `bold`, the mean is wrapped in ** **.
inline std::string format_mean_std(const MeanStd& m, bool bold = false) {
  char buf[64];
  std::snprintf(buf, sizeof buf, bold ? "**%.3f** \xC2\xB1 %.3f" : "%.3f \xC2\xB1 %.3f", m.mean, m.std);
  return buf;
}

struct FoldMetrics {
  double bcc = 0;
  double auc = 0;
};

struct MetricsReport {
  std::vector<FoldMetrics> folds;
  MeanStd bcc, auc;
};

inline MetricsReport summarize(std::vector<FoldMetrics> folds) {
  std::vector<double> b, a;
  for (const auto& f : folds) {
    b.push_back(f.bcc);
    a.push_back(f.auc);
  }
  MetricsReport r;
  r.bcc = aggregate_folds(b);
  r.auc = aggregate_folds(a);
  r.folds = std::move(folds);
  return r;
}

}  // namespace lesionfuse
