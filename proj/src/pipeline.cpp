#include "bdefs/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace bdefs::pipeline {

namespace {

const char* kParts[] = {"train", "validation", "test", "total"};
const char* kMethods[] = {"original", "optimized"};

}  // namespace

double round4(double x) { return std::stod(format4(x)); }

std::string format4(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", x);
  return buf;
}

// ---- wrapper fitness ----------------------------------------------------------

double wrapper_fitness(const de::BitMask& mask, const Matrix& features,
                       std::span<const int> labels, const SplitIndices& split,
                       std::size_t k, const svm::SvmParams& params,
                       std::ostream* warnings) {
  if (mask.size() != features.cols())
    throw std::invalid_argument("wrapper_fitness: mask length != feature count");
  if (de::popcount(mask) == 0) return 1.0;

  const Matrix train_x = select_columns(select_rows(features, split.train), mask);
  const Matrix val_x = select_columns(select_rows(features, split.validation), mask);
  std::vector<int> train_y, val_y;
  for (auto i : split.train) train_y.push_back(labels[i]);
  for (auto i : split.validation) val_y.push_back(labels[i]);

  const auto model = svm::train_ovr(train_x, train_y, k, params);
  const auto pred = svm::predict(model, val_x);
  const auto confusion = metrics::confusion_from_labels(val_y, pred, k);

  std::vector<metrics::ClassConfusion> per_class;
  for (std::size_t c = 0; c < k; ++c) {
    auto cc = metrics::ovr_decompose(confusion, c);
    if (!metrics::geometric_mean(cc)) {
      if (warnings)
        *warnings << "wrapper_fitness: class " << c
                  << " has an undefined rate on the validation split; fitness 1\n";
      return 1.0;
    }
    per_class.push_back(cc);
  }
  const auto aggregate = metrics::aggregate_confusions(per_class);
  const auto gmean = metrics::geometric_mean(aggregate);
  if (!gmean) return 1.0;
  return 1.0 - *gmean;
}

// ---- scoring -------------------------------------------------------------------

namespace {

SplitScores score_part(const svm::SvmModel& model, const Matrix& columns,
                       std::span<const int> labels,
                       std::span<const std::size_t> idx, std::size_t k) {
  const Matrix rows = select_rows(columns, idx);
  std::vector<int> part_labels;
  part_labels.reserve(idx.size());
  for (auto i : idx) part_labels.push_back(labels[i]);

  const Matrix scores = svm::decision_scores(model, rows);
  std::vector<int> pred(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i)
    pred[i] = svm::argmax_row(scores.row(i));

  SplitScores out;
  out.confusion = metrics::confusion_from_labels(part_labels, pred, k);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> class_scores(scores.rows());
    std::vector<std::uint8_t> is_positive(scores.rows());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      class_scores[i] = scores(i, c);
      is_positive[i] = part_labels[i] == static_cast<int>(c) ? 1 : 0;
    }
    out.auc.push_back(metrics::auc_ovr(class_scores, is_positive));
  }
  out.rmse = metrics::rmse(cnn::softmax_rows(scores), part_labels);
  return out;
}

Matrix extract_with_trained_net(const PipelineConfig& cfg, const LabeledDataset& ds,
                                std::uint64_t seed, std::vector<cnn::EpochStats>* history,
                                std::ostream* log) {
  const auto& first = ds.images.front();
  const auto plan = cnn::plan_net(first.height, first.width, first.channels,
                                  8, 3, 3, 400, ds.num_classes());
  cnn::TrainConfig tc = cfg.cnn;
  tc.seed = seed;
  cnn::ConvNet net(plan, tc.dropout, seed);
  const SplitIndices split = cfg.stratified
                                 ? split_data_stratified(ds.labels, ds.num_classes(), seed)
                                 : split_data(ds.size(), seed);
  if (log) *log << "training feature extractor (seed " << seed << ")\n";
  auto stats = cnn::train(net, ds.images, ds.labels, split.train, split.validation, tc);
  if (history) *history = stats;
  return net.extract_features(ds.images);
}

}  // namespace

// ---- pipeline -------------------------------------------------------------------

ReportBundle run_pipeline(const PipelineConfig& cfg, const LabeledDataset& dataset,
                          std::ostream* log) {
  if (cfg.runs < 1) throw std::invalid_argument("run_pipeline: runs must be >= 1");
  if (!dataset.has_features() && !dataset.has_images())
    throw std::invalid_argument("run_pipeline: dataset has neither images nor features");

  ReportBundle bundle;
  bundle.class_names = dataset.class_names;
  bundle.config = cfg;
  const std::size_t k = dataset.num_classes();
  const std::size_t n = dataset.size();

  Matrix shared_features;
  if (dataset.has_features()) {
    shared_features = dataset.features;
  } else if (!cfg.retrain_extractor) {
    shared_features = extract_with_trained_net(cfg, dataset, cfg.seed + 1,
                                               &bundle.train_history, log);
  }
  bundle.feature_dim =
      dataset.has_features() ? dataset.features.cols()
                             : (cfg.retrain_extractor ? 400 : shared_features.cols());

  std::vector<std::size_t> all_idx(n);
  std::iota(all_idx.begin(), all_idx.end(), 0);

  for (std::size_t r = 1; r <= cfg.runs; ++r) {
    const std::uint64_t rs = cfg.seed + r;
    try {
      RunOutcome outcome;
      outcome.run_index = r;

      const Matrix* features = &shared_features;
      Matrix run_features;
      if (!dataset.has_features() && cfg.retrain_extractor) {
        run_features = extract_with_trained_net(cfg, dataset, rs,
                                                &outcome.train_history, log);
        features = &run_features;
      }

      const SplitIndices split = cfg.stratified
                                     ? split_data_stratified(dataset.labels, k, rs)
                                     : split_data(n, rs);

      svm::SvmParams svm_params = cfg.svm;
      svm_params.seed = rs;
      de::DeConfig de_cfg = cfg.de;
      de_cfg.seed = rs;
      const de::FitnessFn fitness = [&](const de::BitMask& mask) {
        return wrapper_fitness(mask, *features, dataset.labels, split, k, svm_params,
                               log);
      };
      const auto de_result =
          de::run(de_cfg, features->cols(), fitness, &outcome.de_history);
      outcome.selected_mask = de_result.best_mask;
      outcome.best_fitness = de_result.best_fitness;

      std::vector<int> train_y;
      for (auto i : split.train) train_y.push_back(dataset.labels[i]);

      const de::BitMask full_mask(features->cols(), 1);
      for (const char* method : kMethods) {
        const de::BitMask& mask =
            std::string(method) == "original" ? full_mask : outcome.selected_mask;
        const Matrix columns = select_columns(*features, mask);
        const auto model =
            svm::train_ovr(select_rows(columns, split.train), train_y, k, svm_params);
        auto& parts = outcome.scores[method];
        parts.emplace("train", score_part(model, columns, dataset.labels, split.train, k));
        parts.emplace("validation",
                      score_part(model, columns, dataset.labels, split.validation, k));
        parts.emplace("test", score_part(model, columns, dataset.labels, split.test, k));
        parts.emplace("total", score_part(model, columns, dataset.labels, all_idx, k));
      }

      if (log)
        *log << "run " << r << "/" << cfg.runs << ": selected "
             << de::popcount(outcome.selected_mask) << "/" << features->cols()
             << " features, fitness " << outcome.best_fitness << "\n";
      bundle.runs.push_back(std::move(outcome));
    } catch (const std::exception& e) {
      bundle.failures.push_back("run " + std::to_string(r) + ": " + e.what());
      if (log) *log << "run " << r << " failed: " << e.what() << "\n";
    }
  }

  // Aggregate completed runs: entrywise-mean confusions, mean AUC and RMSE.
  for (const char* method : kMethods) {
    for (const char* part : kParts) {
      std::vector<metrics::ConfusionMatrix> confusions;
      std::vector<double> rmses;
      std::vector<std::vector<double>> aucs(k);
      for (const auto& run : bundle.runs) {
        const auto& scores = run.scores.at(method).at(part);
        confusions.push_back(scores.confusion);
        rmses.push_back(scores.rmse);
        for (std::size_t c = 0; c < k; ++c)
          if (scores.auc[c]) aucs[c].push_back(*scores.auc[c]);
      }
      if (confusions.empty()) continue;
      MethodSplitSummary summary;
      summary.avg_confusion = metrics::average_runs(confusions);
      for (std::size_t c = 0; c < k; ++c) {
        if (aucs[c].empty())
          summary.auc_per_class.emplace_back(std::nullopt);
        else
          summary.auc_per_class.emplace_back(
              std::accumulate(aucs[c].begin(), aucs[c].end(), 0.0) /
              static_cast<double>(aucs[c].size()));
      }
      summary.rmse = std::accumulate(rmses.begin(), rmses.end(), 0.0) /
                     static_cast<double>(rmses.size());
      bundle.summary[method].emplace(part, std::move(summary));
    }
  }
  return bundle;
}

ReportBundle run_pipeline(const PipelineConfig& cfg, std::ostream* log) {
  LabeledDataset dataset;
  if (!cfg.features_csv.empty())
    dataset = load_features(cfg.features_csv);
  else if (!cfg.data_root.empty())
    dataset = load_images(cfg.data_root);
  else
    throw std::invalid_argument("run_pipeline: no input configured");
  return run_pipeline(cfg, dataset, log);
}

// ---- report emission -------------------------------------------------------------

namespace {

std::string classes_comment(const std::vector<std::string>& names) {
  std::string line = "# classes:";
  for (std::size_t i = 0; i < names.size(); ++i)
    line += (i ? "," : " ") + names[i];
  return line + "\n";
}

metrics::ConfusionMatrix rounded_confusion(const metrics::ConfusionMatrix& m) {
  metrics::ConfusionMatrix out(m.k());
  for (std::size_t i = 0; i < m.k(); ++i)
    for (std::size_t j = 0; j < m.k(); ++j) out(i, j) = round4(m(i, j));
  return out;
}

// Rates as printed: derived from 4-decimal counts and 4-decimal AUC/RMSE.
// verify_report reproduces this exact computation from the emitted files.
metrics::MetricReport printed_report(const metrics::ConfusionMatrix& rounded,
                                     const std::vector<std::optional<double>>& auc,
                                     std::optional<double> rmse) {
  std::vector<std::optional<double>> auc4;
  for (const auto& a : auc)
    auc4.push_back(a ? std::optional<double>(round4(*a)) : std::nullopt);
  std::optional<double> rmse4 = rmse ? std::optional<double>(round4(*rmse)) : std::nullopt;
  return metrics::build_report(rounded, auc4, rmse4);
}

std::string cell(const std::optional<double>& v) {
  return v ? format4(*v) : std::string();
}

json rate_or_null(const std::optional<double>& v) {
  if (!v) return nullptr;
  return round4(*v);
}

json class_block(const metrics::ClassReport& cr) {
  json b;
  b["tp"] = round4(cr.counts.tp);
  b["tn"] = round4(cr.counts.tn);
  b["fp"] = round4(cr.counts.fp);
  b["fn"] = round4(cr.counts.fn);
  b["accuracy"] = rate_or_null(cr.rates.accuracy);
  b["sensitivity"] = rate_or_null(cr.rates.sensitivity);
  b["specificity"] = rate_or_null(cr.rates.specificity);
  b["gmean"] = rate_or_null(cr.rates.gmean);
  b["auc"] = rate_or_null(cr.rates.auc);
  return b;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("emit_reports: cannot write " + path.string());
  out << content;
}

metrics::ConfusionMatrix read_confusion_csv(const fs::path& path,
                                            std::size_t expected_k) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("verify_report: cannot open " + path.string());
  std::string line;
  std::vector<std::vector<double>> rows;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::istringstream ss(line);
    std::string piece;
    std::getline(ss, piece, ',');  // row label
    std::vector<double> row;
    while (std::getline(ss, piece, ',')) row.push_back(std::stod(piece));
    rows.push_back(std::move(row));
  }
  if (rows.size() != expected_k)
    throw std::runtime_error("verify_report: bad row count in " + path.string());
  metrics::ConfusionMatrix m(expected_k);
  for (std::size_t i = 0; i < expected_k; ++i) {
    if (rows[i].size() != expected_k)
      throw std::runtime_error("verify_report: bad column count in " + path.string());
    for (std::size_t j = 0; j < expected_k; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

}  // namespace

void emit_reports(const ReportBundle& bundle, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const std::size_t k = bundle.k();

  // Confusion tables, one file per method and part.
  for (const auto& [method, parts] : bundle.summary) {
    for (const auto& [part, summary] : parts) {
      std::string text = classes_comment(bundle.class_names);
      text += "actual";
      for (const auto& name : bundle.class_names) text += ",predicted_" + name;
      text += "\n";
      const auto rounded = rounded_confusion(summary.avg_confusion);
      for (std::size_t i = 0; i < k; ++i) {
        text += bundle.class_names[i];
        for (std::size_t j = 0; j < k; ++j) text += "," + format4(rounded(i, j));
        text += "\n";
      }
      write_text_file(dir / ("confusion_" + part + "_" + method + ".csv"), text);
    }
  }

  // Per-class and summary metric tables.
  std::string per_class_csv = classes_comment(bundle.class_names);
  per_class_csv +=
      "method,split,class,tp,tn,fp,fn,accuracy,sensitivity,specificity,gmean,auc\n";
  std::string summary_csv = classes_comment(bundle.class_names);
  summary_csv +=
      "method,split,tp,tn,fp,fn,accuracy,sensitivity,specificity,gmean,auc,rmse\n";
  for (const auto& [method, parts_map] : bundle.summary) {
    for (const char* part : kParts) {
      const auto pit = parts_map.find(part);
      if (pit == parts_map.end()) continue;
      const auto& s = pit->second;
      const auto report =
          printed_report(rounded_confusion(s.avg_confusion), s.auc_per_class, s.rmse);
      for (std::size_t c = 0; c < k; ++c) {
        const auto& cr = report.per_class[c];
        per_class_csv += method + "," + part + "," +
                         bundle.class_names[c] + "," + format4(cr.counts.tp) + "," +
                         format4(cr.counts.tn) + "," + format4(cr.counts.fp) + "," +
                         format4(cr.counts.fn) + "," + cell(cr.rates.accuracy) + "," +
                         cell(cr.rates.sensitivity) + "," +
                         cell(cr.rates.specificity) + "," + cell(cr.rates.gmean) +
                         "," + cell(cr.rates.auc) + "\n";
      }
      const auto& agg = report.aggregate;
      summary_csv += method + "," + part + "," +
                     format4(agg.counts.tp) + "," + format4(agg.counts.tn) + "," +
                     format4(agg.counts.fp) + "," + format4(agg.counts.fn) + "," +
                     cell(agg.rates.accuracy) + "," + cell(agg.rates.sensitivity) +
                     "," + cell(agg.rates.specificity) + "," + cell(agg.rates.gmean) +
                     "," + cell(agg.rates.auc) + "," + cell(report.rmse) + "\n";
    }
  }
  write_text_file(dir / "metrics_per_class.csv", per_class_csv);
  write_text_file(dir / "metrics_summary.csv", summary_csv);

  // Machine-readable summary.
  json root;
  root["classes"] = bundle.class_names;
  json cfg;
  cfg["seed"] = bundle.config.seed;
  cfg["runs"] = bundle.config.runs;
  cfg["stratified"] = bundle.config.stratified;
  cfg["retrain_extractor"] = bundle.config.retrain_extractor;
  cfg["pop_size"] = bundle.config.de.pop_size;
  cfg["generations"] = bundle.config.de.generations;
  cfg["crossover_rate"] = bundle.config.de.crossover_rate;
  cfg["svm_c"] = bundle.config.svm.c;
  cfg["svm_tol"] = bundle.config.svm.tol;
  cfg["svm_max_epochs"] = bundle.config.svm.max_epochs;
  cfg["epochs"] = bundle.config.cnn.epochs;
  cfg["batch_size"] = bundle.config.cnn.batch_size;
  cfg["gamma"] = bundle.config.cnn.gamma;
  cfg["dropout"] = bundle.config.cnn.dropout;
  cfg["feature_dim"] = bundle.feature_dim;
  root["config"] = cfg;

  json methods;
  for (const auto& [method, parts] : bundle.summary) {
    json mblock;
    for (const auto& [part, s] : parts) {
      const auto report =
          printed_report(rounded_confusion(s.avg_confusion), s.auc_per_class, s.rmse);
      json pblock;
      json per_class = json::array();
      for (const auto& cr : report.per_class) per_class.push_back(class_block(cr));
      pblock["per_class"] = per_class;
      json agg = class_block(report.aggregate);
      agg["rmse"] = rate_or_null(report.rmse);
      pblock["aggregate"] = agg;
      mblock[part] = pblock;
    }
    methods[method] = mblock;
  }
  root["methods"] = methods;

  json selection;
  json counts = json::array();
  double count_sum = 0.0;
  std::size_t count_min = bundle.feature_dim, count_max = 0;
  for (const auto& run : bundle.runs) {
    const std::size_t c = de::popcount(run.selected_mask);
    counts.push_back(c);
    count_sum += static_cast<double>(c);
    count_min = std::min(count_min, c);
    count_max = std::max(count_max, c);
  }
  selection["counts"] = counts;
  if (!bundle.runs.empty()) {
    selection["mean_count"] =
        round4(count_sum / static_cast<double>(bundle.runs.size()));
    selection["min_count"] = count_min;
    selection["max_count"] = count_max;
  }
  root["selection"] = selection;
  root["failed_runs"] = bundle.failures;

  write_text_file(dir / "summary.json", root.dump(2) + "\n");

  // Selection masks and per-run optimizer traces.
  std::string masks;
  for (const auto& run : bundle.runs) masks += de::mask_to_string(run.selected_mask) + "\n";
  write_text_file(dir / "selection.txt", masks);
  for (const auto& run : bundle.runs) {
    std::ostringstream hist;
    de::write_history_csv(run.de_history, hist);
    write_text_file(dir / ("de_history_run" + std::to_string(run.run_index) + ".csv"),
                    hist.str());
    if (!run.train_history.empty()) {
      std::ostringstream th;
      cnn::write_train_history_csv(run.train_history, th);
      write_text_file(
          dir / ("train_history_run" + std::to_string(run.run_index) + ".csv"),
          th.str());
    }
  }
  if (!bundle.train_history.empty()) {
    std::ostringstream th;
    cnn::write_train_history_csv(bundle.train_history, th);
    write_text_file(dir / "train_history.csv", th.str());
  }
}

// ---- verification -----------------------------------------------------------------

namespace {

bool same_value(const json& recorded, const std::optional<double>& recomputed) {
  if (recorded.is_null()) return !recomputed.has_value();
  if (!recomputed) return false;
  return recorded.get<double>() == round4(*recomputed);
}

bool check_block(const json& block, const metrics::ClassReport& cr, bool with_rmse,
                 const std::optional<double>& rmse) {
  bool ok = block["tp"].get<double>() == round4(cr.counts.tp) &&
            block["tn"].get<double>() == round4(cr.counts.tn) &&
            block["fp"].get<double>() == round4(cr.counts.fp) &&
            block["fn"].get<double>() == round4(cr.counts.fn) &&
            same_value(block["accuracy"], cr.rates.accuracy) &&
            same_value(block["sensitivity"], cr.rates.sensitivity) &&
            same_value(block["specificity"], cr.rates.specificity) &&
            same_value(block["gmean"], cr.rates.gmean);
  if (with_rmse) ok = ok && same_value(block["rmse"], rmse);
  return ok;
}

}  // namespace

bool verify_report(const std::string& report_dir, std::ostream& log) {
  const fs::path dir(report_dir);
  std::ifstream jf(dir / "summary.json");
  if (!jf) {
    log << "[FAIL] summary.json missing\n";
    return false;
  }
  json root = json::parse(jf);
  const std::size_t k = root["classes"].size();
  bool all_ok = true;

  for (const auto& [method, parts] : root["methods"].items()) {
    for (const auto& [part, block] : parts.items()) {
      const auto csv_path = dir / ("confusion_" + part + "_" + method + ".csv");
      metrics::ConfusionMatrix confusion = read_confusion_csv(csv_path, k);

      // Reconstruct the printed report from the emitted counts; AUC and RMSE
      // are copied from the summary since they are not count-derived.
      std::vector<std::optional<double>> auc;
      for (std::size_t c = 0; c < k; ++c) {
        const auto& v = block["per_class"][c]["auc"];
        auc.push_back(v.is_null() ? std::optional<double>()
                                  : std::optional<double>(v.get<double>()));
      }
      std::optional<double> rmse;
      if (!block["aggregate"]["rmse"].is_null())
        rmse = block["aggregate"]["rmse"].get<double>();
      const auto report = printed_report(confusion, auc, rmse);

      bool ok = check_block(block["aggregate"], report.aggregate, true, report.rmse);
      for (std::size_t c = 0; c < k; ++c)
        ok = ok && check_block(block["per_class"][c], report.per_class[c], false,
                               std::nullopt);
      log << (ok ? "[OK]   " : "[FAIL] ") << method << "/" << part
          << " rates match the emitted confusion counts\n";
      all_ok = all_ok && ok;
    }
  }

  // Selected-feature counts must equal the mask popcounts, line by line.
  std::ifstream sel(dir / "selection.txt");
  if (sel) {
    std::vector<std::size_t> popcounts;
    std::string line;
    while (std::getline(sel, line))
      if (!line.empty()) popcounts.push_back(de::popcount(de::mask_from_string(line)));
    const auto& counts = root["selection"]["counts"];
    bool ok = counts.size() == popcounts.size();
    for (std::size_t i = 0; ok && i < popcounts.size(); ++i)
      ok = counts[i].get<std::size_t>() == popcounts[i];
    log << (ok ? "[OK]   " : "[FAIL] ") << "selection counts match mask popcounts\n";
    all_ok = all_ok && ok;
  }
  return all_ok;
}

}  // namespace bdefs::pipeline
