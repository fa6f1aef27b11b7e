#include "bdefs/linear_svm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "bdefs/rng.hpp"

namespace bdefs::svm {

Standardizer fit_standardizer(const Matrix& x) {
  if (x.rows() == 0 || x.cols() == 0)
    throw std::invalid_argument("fit_standardizer: empty matrix");
  Standardizer s;
  s.mean.assign(x.cols(), 0.0);
  s.stdev.assign(x.cols(), 0.0);
  const double n = static_cast<double>(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) s.mean[c] += x(r, c);
  for (auto& m : s.mean) m /= n;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double d = x(r, c) - s.mean[c];
      s.stdev[c] += d * d;
    }
  for (auto& v : s.stdev) {
    v = std::sqrt(v / n);
    if (v <= 0.0) v = 1.0;  // constant column
  }
  return s;
}

Matrix standardize(const Standardizer& s, const Matrix& x) {
  if (x.cols() != s.dim())
    throw std::invalid_argument("standardize: feature count mismatch");
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c)
      out(r, c) = (x(r, c) - s.mean[c]) / s.stdev[c];
  return out;
}

Matrix destandardize(const Standardizer& s, const Matrix& x) {
  if (x.cols() != s.dim())
    throw std::invalid_argument("destandardize: feature count mismatch");
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c)
      out(r, c) = x(r, c) * s.stdev[c] + s.mean[c];
  return out;
}

double primal_objective(const Matrix& x, std::span<const int> y, double c,
                        std::span<const double> weights, double bias) {
  double reg = bias * bias;
  for (double w : weights) reg += w * w;
  double hinge = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double margin = bias;
    for (std::size_t j = 0; j < x.cols(); ++j) margin += weights[j] * x(i, j);
    hinge += std::max(0.0, 1.0 - static_cast<double>(y[i]) * margin);
  }
  return 0.5 * reg + c * hinge;
}

BinaryModel train_binary(const Matrix& x, std::span<const int> y, const SvmParams& p) {
  if (x.rows() != y.size())
    throw std::invalid_argument("train_binary: row count != label count");
  if (x.rows() == 0) throw std::invalid_argument("train_binary: empty data");
  bool has_pos = false, has_neg = false;
  for (int label : y) {
    if (label == 1)
      has_pos = true;
    else if (label == -1)
      has_neg = true;
    else
      throw std::invalid_argument("train_binary: labels must be +1 or -1");
  }
  if (!has_pos || !has_neg)
    throw std::invalid_argument("train_binary: both label signs must be present");
  for (double v : x.data())
    if (!std::isfinite(v))
      throw std::invalid_argument("train_binary: non-finite feature value");

  const std::size_t n = x.rows();
  const std::size_t dim = x.cols();

  // Augmented representation: one extra constant feature carries the bias.
  std::vector<double> q_diag(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 1.0;
    for (std::size_t j = 0; j < dim; ++j) s += x(i, j) * x(i, j);
    q_diag[i] = s;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(p.seed);
  rng.shuffle(order);

  std::vector<double> alpha(n, 0.0);
  std::vector<double> w(dim + 1, 0.0);  // last entry is the bias
  BinaryModel model;

  // The dual iterate's primal value oscillates near convergence, so the
  // returned model is the best-primal iterate seen so far ("pocket");
  // primal_history tracks that adopted iterate.
  std::vector<double> w_best = w;
  double primal_best = primal_objective(x, y, p.c, {w.data(), dim}, w[dim]);

  for (std::size_t epoch = 0; epoch < p.max_epochs; ++epoch) {
    double max_violation = 0.0;
    for (std::size_t idx : order) {
      const double yi = static_cast<double>(y[idx]);
      double margin = w[dim];
      for (std::size_t j = 0; j < dim; ++j) margin += w[j] * x(idx, j);
      const double g = yi * margin - 1.0;

      double pg = g;
      if (alpha[idx] <= 0.0)
        pg = std::min(g, 0.0);
      else if (alpha[idx] >= p.c)
        pg = std::max(g, 0.0);
      max_violation = std::max(max_violation, std::abs(pg));
      if (std::abs(pg) < 1e-12) continue;

      const double next = std::clamp(alpha[idx] - g / q_diag[idx], 0.0, p.c);
      const double delta = (next - alpha[idx]) * yi;
      if (delta == 0.0) continue;
      alpha[idx] = next;
      for (std::size_t j = 0; j < dim; ++j) w[j] += delta * x(idx, j);
      w[dim] += delta;
    }
    const double primal = primal_objective(x, y, p.c, {w.data(), dim}, w[dim]);
    if (primal < primal_best) {
      primal_best = primal;
      w_best = w;
    }
    model.primal_history.push_back(primal_best);
    model.epochs_run = epoch + 1;
    if (max_violation < p.tol) break;
  }

  model.weights.assign(w_best.begin(), w_best.begin() + static_cast<std::ptrdiff_t>(dim));
  model.bias = w_best[dim];
  return model;
}

SvmModel train_ovr(const Matrix& x, std::span<const int> labels, std::size_t k,
                   const SvmParams& p) {
  if (x.rows() != labels.size())
    throw std::invalid_argument("train_ovr: row count != label count");
  if (k < 2) throw std::invalid_argument("train_ovr: need at least two classes");
  std::vector<std::size_t> support(k, 0);
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw std::out_of_range("train_ovr: label out of range");
    ++support[static_cast<std::size_t>(label)];
  }
  std::size_t present = 0;
  for (auto s : support) present += s > 0 ? 1 : 0;
  if (present < 2)
    throw std::invalid_argument("train_ovr: fewer than two classes present");

  SvmModel model;
  model.k = k;
  model.standardizer = fit_standardizer(x);
  const Matrix z = standardize(model.standardizer, x);

  std::vector<int> binary(labels.size());
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < labels.size(); ++i)
      binary[i] = (static_cast<std::size_t>(labels[i]) == c) ? 1 : -1;
    // Every class-vs-rest problem uses the same seeded coordinate order.
    auto bm = train_binary(z, binary, p);
    model.weights.push_back(std::move(bm.weights));
    model.biases.push_back(bm.bias);
  }
  return model;
}

Matrix decision_scores(const SvmModel& m, const Matrix& x) {
  if (x.cols() != m.standardizer.dim())
    throw std::invalid_argument("decision_scores: feature count mismatch");
  const Matrix z = standardize(m.standardizer, x);
  Matrix scores(x.rows(), m.k);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t c = 0; c < m.k; ++c) {
      double s = m.biases[c];
      const auto& w = m.weights[c];
      for (std::size_t j = 0; j < z.cols(); ++j) s += w[j] * z(i, j);
      scores(i, c) = s;
    }
  return scores;
}

int argmax_row(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < scores.size(); ++c)
    if (scores[c] > scores[best]) best = c;
  return static_cast<int>(best);
}

std::vector<int> predict(const SvmModel& m, const Matrix& x) {
  const Matrix scores = decision_scores(m, x);
  std::vector<int> labels(x.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) labels[i] = argmax_row(scores.row(i));
  return labels;
}

namespace {

void write_values(std::ostream& out, std::span<const double> values) {
  char buf[32];
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
    out << (i ? " " : "") << buf;
  }
  out << '\n';
}

std::vector<double> read_values(std::istream& in, std::size_t count,
                                const char* what) {
  std::vector<double> values(count);
  for (auto& v : values)
    if (!(in >> v)) throw std::runtime_error(std::string("svm model: truncated ") + what);
  return values;
}

}  // namespace

void save_model(const SvmModel& m, std::ostream& out) {
  out << "svm v1 " << m.k << ' ' << m.standardizer.dim() << '\n';
  for (std::size_t c = 0; c < m.k; ++c) {
    std::vector<double> line = m.weights[c];
    line.push_back(m.biases[c]);
    write_values(out, line);
  }
  write_values(out, m.standardizer.mean);
  write_values(out, m.standardizer.stdev);
}

SvmModel load_model(std::istream& in) {
  std::string magic, version;
  std::size_t k = 0, dim = 0;
  if (!(in >> magic >> version >> k >> dim) || magic != "svm" || version != "v1")
    throw std::runtime_error("svm model: bad header");
  SvmModel m;
  m.k = k;
  for (std::size_t c = 0; c < k; ++c) {
    auto line = read_values(in, dim + 1, "weights");
    m.biases.push_back(line.back());
    line.pop_back();
    m.weights.push_back(std::move(line));
  }
  m.standardizer.mean = read_values(in, dim, "mean");
  m.standardizer.stdev = read_values(in, dim, "stdev");
  return m;
}

}  // namespace bdefs::svm
