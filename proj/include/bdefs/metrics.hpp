#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "bdefs/matrix.hpp"

namespace bdefs::metrics {

// One-vs-rest counts for a single class. Stored as reals so that confusion
// matrices averaged over many runs flow through the same rate formulas.
struct ClassConfusion {
  double tp = 0.0;
  double tn = 0.0;
  double fp = 0.0;
  double fn = 0.0;

  double total() const { return tp + tn + fp + fn; }
};

// K x K real-valued confusion matrix; entry (i, j) counts samples of actual
// class i predicted as class j.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0.0) {}

  std::size_t k() const { return k_; }
  double& operator()(std::size_t i, std::size_t j) { return counts_[i * k_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return counts_[i * k_ + j]; }

  double total() const;
  double row_sum(std::size_t i) const;
  double col_sum(std::size_t j) const;

 private:
  std::size_t k_ = 0;
  std::vector<double> counts_;
};

ConfusionMatrix confusion_from_labels(std::span<const int> actual,
                                      std::span<const int> predicted,
                                      std::size_t k);

ClassConfusion ovr_decompose(const ConfusionMatrix& m, std::size_t class_index);

// Rates are undefined (nullopt) when their denominator is zero; they are
// never coerced to 0.
std::optional<double> accuracy(const ClassConfusion& c);
std::optional<double> sensitivity(const ClassConfusion& c);
std::optional<double> specificity(const ClassConfusion& c);
std::optional<double> geometric_mean(const ClassConfusion& c);

// Component-wise arithmetic mean of per-class one-vs-rest confusions;
// downstream rates are then computed from the averaged counts.
ClassConfusion aggregate_confusions(std::span<const ClassConfusion> per_class);

// Rank-based (Mann-Whitney) AUC with 0.5 tie credit. Undefined when either
// class is absent.
std::optional<double> auc_ovr(std::span<const double> scores,
                              std::span<const std::uint8_t> is_positive);

// sqrt(mean over samples and classes of (onehot(label) - score)^2).
double rmse(const Matrix& scores, std::span<const int> labels);

ConfusionMatrix average_runs(std::span<const ConfusionMatrix> matrices);

// Per-class rates plus AUC, as reported per output class.
struct RateSet {
  std::optional<double> accuracy;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> gmean;
  std::optional<double> auc;
};

struct ClassReport {
  ClassConfusion counts;
  RateSet rates;
};

struct MetricReport {
  std::vector<ClassReport> per_class;
  ClassReport aggregate;          // rates derived from mean-of-counts
  std::optional<double> rmse;     // aggregate only
};

// Builds the full per-class + aggregate report from a confusion matrix.
// AUC values are supplied by the caller (they are not derivable from
// counts); the aggregate AUC is the mean of the per-class values.
MetricReport build_report(const ConfusionMatrix& m,
                          std::span<const std::optional<double>> per_class_auc,
                          std::optional<double> rmse_value);

}  // namespace bdefs::metrics
