#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bdefs/binary_de.hpp"
#include "bdefs/convnet.hpp"
#include "bdefs/dataset.hpp"
#include "bdefs/linear_svm.hpp"
#include "bdefs/metrics.hpp"

namespace bdefs::pipeline {

struct PipelineConfig {
  std::string data_root;     // image-mode input
  std::string features_csv;  // feature-mode input (takes precedence if set)
  std::string out_dir;
  std::uint64_t seed = 1;  // run r derives everything from seed + r
  std::size_t runs = 100;
  bool stratified = false;
  bool retrain_extractor = false;
  de::DeConfig de;
  svm::SvmParams svm;
  cnn::TrainConfig cnn;
  double empty_mask_penalty = 1.0;
};

// Wrapper objective: train a one-vs-rest SVM on the train split restricted
// to the masked columns, score the validation split, aggregate per-class
// one-vs-rest counts by component means, and return 1 - geometric mean.
// The all-zero mask gets the fixed worst fitness of 1.0, as does any split
// whose validation part is missing a class (with a warning).
double wrapper_fitness(const de::BitMask& mask, const Matrix& features,
                       std::span<const int> labels, const SplitIndices& split,
                       std::size_t k, const svm::SvmParams& params,
                       std::ostream* warnings = nullptr);

// Scores of one trained model on one index subset.
struct SplitScores {
  metrics::ConfusionMatrix confusion;
  std::vector<std::optional<double>> auc;  // per class, from raw decision scores
  double rmse = 0.0;                       // one-hot targets vs row-softmax scores
};

struct RunOutcome {
  std::size_t run_index = 0;  // 1-based
  de::BitMask selected_mask;
  double best_fitness = 0.0;
  de::RunHistory de_history;
  // method ("original" / "optimized") -> part (train/validation/test/total)
  std::map<std::string, std::map<std::string, SplitScores>> scores;
  std::vector<cnn::EpochStats> train_history;  // only when retraining per run
};

struct MethodSplitSummary {
  metrics::ConfusionMatrix avg_confusion;             // entrywise mean over runs
  std::vector<std::optional<double>> auc_per_class;   // mean over defined runs
  std::optional<double> rmse;                         // mean over runs
};

struct ReportBundle {
  std::vector<std::string> class_names;
  std::size_t feature_dim = 0;
  std::vector<RunOutcome> runs;          // completed runs only
  std::vector<std::string> failures;     // messages for failed runs
  std::map<std::string, std::map<std::string, MethodSplitSummary>> summary;
  std::vector<cnn::EpochStats> train_history;  // extractor trained once
  PipelineConfig config;

  std::size_t k() const { return class_names.size(); }
};

// Full protocol: per run r (seed + r) split, select with the DE wrapper,
// train final classifiers on the selected and the full feature sets, score
// every part, then average confusions / AUC / RMSE over runs.
ReportBundle run_pipeline(const PipelineConfig& cfg, const LabeledDataset& dataset,
                          std::ostream* log = nullptr);

// Loads the dataset named by cfg (features_csv or data_root) first.
ReportBundle run_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr);

// Writes confusion_<part>_<method>.csv, metrics_per_class.csv,
// metrics_summary.csv, summary.json, selection.txt, de_history_run<r>.csv
// and train_history.csv into out_dir. All table values are printed with 4
// decimals; every derived rate is recomputed from the printed (rounded)
// counts so the emitted bundle is exactly self-consistent.
void emit_reports(const ReportBundle& bundle, const std::string& out_dir);

// Recomputes the count-derived rates from the emitted confusion CSVs and
// confirms they match summary.json exactly; one log line per table.
bool verify_report(const std::string& report_dir, std::ostream& log);

// Round to the 4-decimal value that the reports print.
double round4(double x);
std::string format4(double x);

}  // namespace bdefs::pipeline
