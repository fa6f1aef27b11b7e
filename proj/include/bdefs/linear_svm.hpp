#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "bdefs/matrix.hpp"

namespace bdefs::svm {

// Per-feature mean and standard deviation (population convention) fitted on
// training data. Constant columns get a deviation of 1 so transforms stay
// finite.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stdev;

  std::size_t dim() const { return mean.size(); }
};

Standardizer fit_standardizer(const Matrix& x);
Matrix standardize(const Standardizer& s, const Matrix& x);
Matrix destandardize(const Standardizer& s, const Matrix& x);

struct SvmParams {
  double c = 1.0;                // hinge-loss weight
  double tol = 1e-4;             // projected-gradient stopping threshold
  std::size_t max_epochs = 1000;
  std::uint64_t seed = 0;
};

// Binary L2-regularized hinge-loss SVM trained by dual coordinate descent.
// The bias is carried as an augmented constant feature and regularized with
// the rest of the weights. Coordinates are visited in one seeded shuffle
// order, fixed across epochs. The returned weights are the best-primal
// iterate over all epochs, which makes primal_history non-increasing.
struct BinaryModel {
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<double> primal_history;  // adopted iterate, one entry per epoch
  std::size_t epochs_run = 0;
};

BinaryModel train_binary(const Matrix& x, std::span<const int> y, const SvmParams& p);

double primal_objective(const Matrix& x, std::span<const int> y, double c,
                        std::span<const double> weights, double bias);

// One-vs-rest multiclass model over standardized features.
struct SvmModel {
  std::size_t k = 0;
  std::vector<std::vector<double>> weights;  // k vectors of length dim
  std::vector<double> biases;                // k entries
  Standardizer standardizer;
};

SvmModel train_ovr(const Matrix& x, std::span<const int> labels, std::size_t k,
                   const SvmParams& p);

// score(i, c) = w_c . standardize(x_i) + b_c
Matrix decision_scores(const SvmModel& m, const Matrix& x);

// argmax over classes; exact ties go to the lowest class index.
std::vector<int> predict(const SvmModel& m, const Matrix& x);
int argmax_row(std::span<const double> scores);

void save_model(const SvmModel& m, std::ostream& out);
SvmModel load_model(std::istream& in);

}  // namespace bdefs::svm
