#include "bdefs/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bdefs::metrics {

double ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), 0.0);
}

double ConfusionMatrix::row_sum(std::size_t i) const {
  double s = 0.0;
  for (std::size_t j = 0; j < k_; ++j) s += (*this)(i, j);
  return s;
}

double ConfusionMatrix::col_sum(std::size_t j) const {
  double s = 0.0;
  for (std::size_t i = 0; i < k_; ++i) s += (*this)(i, j);
  return s;
}

ConfusionMatrix confusion_from_labels(std::span<const int> actual,
                                      std::span<const int> predicted,
                                      std::size_t k) {
  if (actual.size() != predicted.size())
    throw std::invalid_argument("confusion_from_labels: sequence lengths differ");
  ConfusionMatrix m(k);
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const int a = actual[i];
    const int p = predicted[i];
    if (a < 0 || static_cast<std::size_t>(a) >= k || p < 0 ||
        static_cast<std::size_t>(p) >= k)
      throw std::out_of_range("confusion_from_labels: label out of range at row " +
                              std::to_string(i));
    m(static_cast<std::size_t>(a), static_cast<std::size_t>(p)) += 1.0;
  }
  return m;
}

ClassConfusion ovr_decompose(const ConfusionMatrix& m, std::size_t class_index) {
  if (class_index >= m.k())
    throw std::out_of_range("ovr_decompose: class index out of range");
  ClassConfusion c;
  c.tp = m(class_index, class_index);
  c.fn = m.row_sum(class_index) - c.tp;
  c.fp = m.col_sum(class_index) - c.tp;
  c.tn = m.total() - c.tp - c.fn - c.fp;
  return c;
}

std::optional<double> accuracy(const ClassConfusion& c) {
  const double denom = c.total();
  if (denom <= 0.0) return std::nullopt;
  return (c.tp + c.tn) / denom;
}

std::optional<double> sensitivity(const ClassConfusion& c) {
  const double denom = c.tp + c.fn;
  if (denom <= 0.0) return std::nullopt;
  return c.tp / denom;
}

std::optional<double> specificity(const ClassConfusion& c) {
  const double denom = c.tn + c.fp;
  if (denom <= 0.0) return std::nullopt;
  return c.tn / denom;
}

std::optional<double> geometric_mean(const ClassConfusion& c) {
  const auto sens = sensitivity(c);
  const auto spec = specificity(c);
  if (!sens || !spec) return std::nullopt;
  return std::sqrt(*sens * *spec);
}

ClassConfusion aggregate_confusions(std::span<const ClassConfusion> per_class) {
  if (per_class.empty())
    throw std::invalid_argument("aggregate_confusions: empty list");
  ClassConfusion mean;
  for (const auto& c : per_class) {
    mean.tp += c.tp;
    mean.tn += c.tn;
    mean.fp += c.fp;
    mean.fn += c.fn;
  }
  const double n = static_cast<double>(per_class.size());
  mean.tp /= n;
  mean.tn /= n;
  mean.fp /= n;
  mean.fn /= n;
  return mean;
}

std::optional<double> auc_ovr(std::span<const double> scores,
                              std::span<const std::uint8_t> is_positive) {
  if (scores.size() != is_positive.size())
    throw std::invalid_argument("auc_ovr: sequence lengths differ");
  std::size_t pos = 0;
  for (auto b : is_positive) pos += b ? 1 : 0;
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Midranks over tie groups make the rank statistic equal all-pairs
  // counting with 0.5 credit per tie.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t t = i; t <= j; ++t)
      if (is_positive[order[t]]) pos_rank_sum += midrank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos);
  const double n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

double rmse(const Matrix& scores, std::span<const int> labels) {
  if (scores.rows() != labels.size())
    throw std::invalid_argument("rmse: row count != label count");
  if (scores.rows() == 0 || scores.cols() == 0)
    throw std::invalid_argument("rmse: empty score matrix");
  double sum_sq = 0.0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= scores.cols())
      throw std::out_of_range("rmse: label out of range at row " + std::to_string(r));
    for (std::size_t c = 0; c < scores.cols(); ++c) {
      const double target = (static_cast<std::size_t>(labels[r]) == c) ? 1.0 : 0.0;
      const double e = target - scores(r, c);
      sum_sq += e * e;
    }
  }
  return std::sqrt(sum_sq / (static_cast<double>(scores.rows()) *
                             static_cast<double>(scores.cols())));
}

ConfusionMatrix average_runs(std::span<const ConfusionMatrix> matrices) {
  if (matrices.empty()) throw std::invalid_argument("average_runs: empty list");
  const std::size_t k = matrices.front().k();
  ConfusionMatrix mean(k);
  for (const auto& m : matrices) {
    if (m.k() != k) throw std::invalid_argument("average_runs: shape mismatch");
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) mean(i, j) += m(i, j);
  }
  const double n = static_cast<double>(matrices.size());
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) mean(i, j) /= n;
  return mean;
}

MetricReport build_report(const ConfusionMatrix& m,
                          std::span<const std::optional<double>> per_class_auc,
                          std::optional<double> rmse_value) {
  MetricReport report;
  std::vector<ClassConfusion> confusions;
  for (std::size_t c = 0; c < m.k(); ++c) {
    ClassReport cr;
    cr.counts = ovr_decompose(m, c);
    cr.rates.accuracy = accuracy(cr.counts);
    cr.rates.sensitivity = sensitivity(cr.counts);
    cr.rates.specificity = specificity(cr.counts);
    cr.rates.gmean = geometric_mean(cr.counts);
    if (c < per_class_auc.size()) cr.rates.auc = per_class_auc[c];
    confusions.push_back(cr.counts);
    report.per_class.push_back(std::move(cr));
  }
  report.aggregate.counts = aggregate_confusions(confusions);
  report.aggregate.rates.accuracy = accuracy(report.aggregate.counts);
  report.aggregate.rates.sensitivity = sensitivity(report.aggregate.counts);
  report.aggregate.rates.specificity = specificity(report.aggregate.counts);
  report.aggregate.rates.gmean = geometric_mean(report.aggregate.counts);
  double auc_sum = 0.0;
  bool auc_all = !report.per_class.empty();
  for (const auto& cr : report.per_class) {
    if (cr.rates.auc)
      auc_sum += *cr.rates.auc;
    else
      auc_all = false;
  }
  if (auc_all)
    report.aggregate.rates.auc = auc_sum / static_cast<double>(report.per_class.size());
  report.rmse = rmse_value;
  return report;
}

}  // namespace bdefs::metrics
