// Command-line front end for the feature-selection pipeline: synthetic data
// generation, extractor training, feature extraction, subset selection,
// evaluation, the full multi-run protocol and report verification.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "bdefs/binary_de.hpp"
#include "bdefs/convnet.hpp"
#include "bdefs/dataset.hpp"
#include "bdefs/linear_svm.hpp"
#include "bdefs/metrics.hpp"
#include "bdefs/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bdefs;

namespace {

struct CliOptions {
  pipeline::PipelineConfig cfg;

  // synth
  std::string synth_mode = "feature";
  std::size_t synth_n = 200;
  std::size_t synth_dim = 20;
  std::size_t synth_informative = 5;
  double synth_noise = 1.0;
  std::size_t synth_classes = 3;
  std::size_t synth_size = 28;

  // extract / evaluate / verify
  std::string model_path;
  std::string mask_path;
  std::string report_dir;
};

pipeline::LabeledDataset load_input(const pipeline::PipelineConfig& cfg) {
  if (!cfg.features_csv.empty()) return pipeline::load_features(cfg.features_csv);
  if (!cfg.data_root.empty()) return pipeline::load_images(cfg.data_root);
  throw CLI::ValidationError("either --features or --data is required");
}

int cmd_synth(const CliOptions& opt) {
  const std::string out =
      opt.cfg.out_dir.empty() ? std::string("synth_out") : opt.cfg.out_dir;
  if (opt.synth_mode == "feature") {
    pipeline::SynthFeatureSpec spec;
    spec.n = opt.synth_n;
    spec.dim = opt.synth_dim;
    spec.informative = opt.synth_informative;
    spec.noise = opt.synth_noise;
    spec.classes = opt.synth_classes;
    auto ds = pipeline::synth_features(spec, opt.cfg.seed);
    fs::path path(out);
    if (path.extension() != ".csv") {
      fs::create_directories(path);
      path /= "features.csv";
    }
    pipeline::save_features(ds, path.string());
    std::cout << "wrote " << ds.size() << " samples x " << spec.dim
              << " features to " << path.string() << "\n";
  } else if (opt.synth_mode == "image") {
    pipeline::SynthImageSpec spec;
    spec.n = opt.synth_n;
    spec.height = opt.synth_size;
    spec.width = opt.synth_size;
    spec.classes = opt.synth_classes;
    spec.noise = opt.synth_noise;
    auto ds = pipeline::synth_images(spec, opt.cfg.seed);
    std::vector<std::size_t> counter(spec.classes, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto cls = static_cast<std::size_t>(ds.labels[i]);
      const fs::path dir = fs::path(out) / ds.class_names[cls];
      fs::create_directories(dir);
      char name[32];
      std::snprintf(name, sizeof(name), "img%05zu.pgm", counter[cls]++);
      pipeline::write_pgm(ds.images[i], (dir / name).string());
    }
    std::cout << "wrote " << ds.size() << " images (" << spec.height << "x"
              << spec.width << ", " << spec.classes << " classes) under " << out
              << "\n";
  } else {
    throw CLI::ValidationError("--mode must be feature or image");
  }
  return 0;
}

int cmd_train_extractor(const CliOptions& opt) {
  auto ds = pipeline::load_images(opt.cfg.data_root);
  const auto& first = ds.images.front();
  const auto plan = cnn::plan_net(first.height, first.width, first.channels, 8, 3, 3,
                                  400, ds.num_classes());
  cnn::TrainConfig tc = opt.cfg.cnn;
  tc.seed = opt.cfg.seed;
  cnn::ConvNet net(plan, tc.dropout, opt.cfg.seed);
  const auto split =
      opt.cfg.stratified
          ? pipeline::split_data_stratified(ds.labels, ds.num_classes(), opt.cfg.seed)
          : pipeline::split_data(ds.size(), opt.cfg.seed);
  std::cout << "training on " << split.train.size() << " images, validating on "
            << split.validation.size() << "\n";
  auto history = cnn::train(net, ds.images, ds.labels, split.train, split.validation, tc);

  const std::string out = opt.cfg.out_dir.empty() ? "." : opt.cfg.out_dir;
  fs::create_directories(out);
  std::ofstream model_out(fs::path(out) / "extractor.cnn");
  net.save(model_out);
  std::ofstream hist_out(fs::path(out) / "train_history.csv");
  cnn::write_train_history_csv(history, hist_out);
  std::cout << "final validation accuracy "
            << pipeline::format4(history.back().val_acc) << "; checkpoint in " << out
            << "/extractor.cnn\n";
  return 0;
}

int cmd_extract(const CliOptions& opt) {
  std::ifstream model_in(opt.model_path);
  if (!model_in) throw CLI::ValidationError("cannot open model " + opt.model_path);
  auto net = cnn::ConvNet::load(model_in);
  auto ds = pipeline::load_images(opt.cfg.data_root);
  ds.features = net.extract_features(ds.images);
  const std::string out =
      opt.cfg.out_dir.empty() ? std::string("features.csv") : opt.cfg.out_dir;
  fs::path path(out);
  if (path.extension() != ".csv") {
    fs::create_directories(path);
    path /= "features.csv";
  }
  pipeline::save_features(ds, path.string());
  std::cout << "wrote " << ds.size() << " rows x " << ds.features.cols()
            << " features to " << path.string() << "\n";
  return 0;
}

int cmd_select(const CliOptions& opt) {
  auto ds = pipeline::load_features(opt.cfg.features_csv);
  const std::uint64_t rs = opt.cfg.seed + 1;
  const auto split = opt.cfg.stratified
                         ? pipeline::split_data_stratified(ds.labels, ds.num_classes(), rs)
                         : pipeline::split_data(ds.size(), rs);
  svm::SvmParams params = opt.cfg.svm;
  params.seed = rs;
  de::DeConfig dc = opt.cfg.de;
  dc.seed = rs;
  de::RunHistory history;
  const auto result = de::run(
      dc, ds.features.cols(),
      [&](const de::BitMask& mask) {
        return pipeline::wrapper_fitness(mask, ds.features, ds.labels, split,
                                         ds.num_classes(), params, &std::cerr);
      },
      &history);

  const std::string out = opt.cfg.out_dir.empty() ? "." : opt.cfg.out_dir;
  fs::create_directories(out);
  std::ofstream mask_out(fs::path(out) / "selection.txt");
  mask_out << de::mask_to_string(result.best_mask) << "\n";
  std::ofstream hist_out(fs::path(out) / "de_history_run1.csv");
  de::write_history_csv(history, hist_out);
  std::cout << "selected " << de::popcount(result.best_mask) << "/"
            << ds.features.cols() << " features, fitness "
            << pipeline::format4(result.best_fitness) << "\n"
            << de::mask_to_string(result.best_mask) << "\n";
  return 0;
}

int cmd_evaluate(const CliOptions& opt) {
  auto ds = pipeline::load_features(opt.cfg.features_csv);
  const std::uint64_t rs = opt.cfg.seed + 1;
  const auto split = opt.cfg.stratified
                         ? pipeline::split_data_stratified(ds.labels, ds.num_classes(), rs)
                         : pipeline::split_data(ds.size(), rs);
  svm::SvmParams params = opt.cfg.svm;
  params.seed = rs;

  std::vector<std::pair<std::string, de::BitMask>> methods;
  methods.emplace_back("original", de::BitMask(ds.features.cols(), 1));
  if (!opt.mask_path.empty()) {
    std::ifstream mask_in(opt.mask_path);
    if (!mask_in) throw CLI::ValidationError("cannot open mask " + opt.mask_path);
    std::string line;
    std::getline(mask_in, line);
    methods.emplace_back("masked", de::mask_from_string(line));
  }

  std::vector<int> train_y;
  for (auto i : split.train) train_y.push_back(ds.labels[i]);
  std::cout << "method,split,accuracy,sensitivity,specificity,gmean\n";
  for (const auto& [name, mask] : methods) {
    if (mask.size() != ds.features.cols())
      throw CLI::ValidationError("mask length does not match feature count");
    const Matrix columns = select_columns(ds.features, mask);
    const auto model = svm::train_ovr(select_rows(columns, split.train), train_y,
                                      ds.num_classes(), params);
    const std::vector<std::pair<std::string, const std::vector<std::size_t>*>> parts =
        {{"train", &split.train},
         {"validation", &split.validation},
         {"test", &split.test}};
    for (const auto& [part, idx] : parts) {
      std::vector<int> y;
      for (auto i : *idx) y.push_back(ds.labels[i]);
      const auto pred = svm::predict(model, select_rows(columns, *idx));
      const auto confusion = metrics::confusion_from_labels(y, pred, ds.num_classes());
      std::vector<metrics::ClassConfusion> per_class;
      for (std::size_t c = 0; c < ds.num_classes(); ++c)
        per_class.push_back(metrics::ovr_decompose(confusion, c));
      const auto agg = metrics::aggregate_confusions(per_class);
      auto fmt = [](const std::optional<double>& v) {
        return v ? pipeline::format4(*v) : std::string("undefined");
      };
      std::cout << name << "," << part << "," << fmt(metrics::accuracy(agg)) << ","
                << fmt(metrics::sensitivity(agg)) << ","
                << fmt(metrics::specificity(agg)) << ","
                << fmt(metrics::geometric_mean(agg)) << "\n";
    }
  }
  return 0;
}

int cmd_run(const CliOptions& opt) {
  auto ds = load_input(opt.cfg);
  auto bundle = pipeline::run_pipeline(opt.cfg, ds, &std::cerr);
  const std::string out = opt.cfg.out_dir.empty() ? "report" : opt.cfg.out_dir;
  pipeline::emit_reports(bundle, out);
  std::cout << "completed " << bundle.runs.size() << "/" << opt.cfg.runs
            << " runs; reports in " << out << "\n";
  if (!bundle.failures.empty()) {
    for (const auto& f : bundle.failures) std::cerr << f << "\n";
    return 1;
  }
  return 0;
}

int cmd_verify(const CliOptions& opt) {
  const std::string dir = opt.report_dir.empty() ? opt.cfg.out_dir : opt.report_dir;
  if (dir.empty()) throw CLI::ValidationError("--report directory is required");
  return pipeline::verify_report(dir, std::cout) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wrapper feature selection: convolutional feature extraction, "
               "binary differential evolution subset search and a linear SVM "
               "scored by one-vs-rest geometric mean"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "plain-text key = value configuration file");

  CliOptions opt;
  app.add_option("--seed", opt.cfg.seed, "base seed; run r derives seed + r")
      ->capture_default_str();
  app.add_option("--runs", opt.cfg.runs, "number of protocol runs")
      ->capture_default_str();
  app.add_option("--pop-size", opt.cfg.de.pop_size, "selector population size")
      ->capture_default_str();
  app.add_option("--generations", opt.cfg.de.generations, "selector generations")
      ->capture_default_str();
  app.add_option("--cr", opt.cfg.de.crossover_rate, "crossover rate in (0,1]")
      ->capture_default_str();
  app.add_option("--epochs", opt.cfg.cnn.epochs, "extractor training epochs")
      ->capture_default_str();
  app.add_option("--batch-size", opt.cfg.cnn.batch_size, "extractor mini-batch size")
      ->capture_default_str();
  app.add_option("--gamma", opt.cfg.cnn.gamma, "extractor L2 coefficient")
      ->capture_default_str();
  app.add_option("--svm-c", opt.cfg.svm.c, "SVM hinge-loss weight")
      ->capture_default_str();
  app.add_flag("--stratified", opt.cfg.stratified, "stratify splits by class");
  app.add_flag("--retrain-extractor", opt.cfg.retrain_extractor,
               "retrain the extractor inside every run");
  app.add_option("--out", opt.cfg.out_dir,
                 "output directory (or .csv path for csv outputs)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled corpus");
  synth->add_option("--mode", opt.synth_mode, "feature or image")
      ->capture_default_str();
  synth->add_option("--n", opt.synth_n, "sample count")->capture_default_str();
  synth->add_option("--dim", opt.synth_dim, "feature count (feature mode)")
      ->capture_default_str();
  synth->add_option("--informative", opt.synth_informative,
                    "informative feature count (feature mode)")
      ->capture_default_str();
  synth->add_option("--noise", opt.synth_noise, "noise scale")->capture_default_str();
  synth->add_option("--classes", opt.synth_classes, "class count")
      ->capture_default_str();
  synth->add_option("--size", opt.synth_size, "image side length (image mode)")
      ->capture_default_str();

  auto* train_sub =
      app.add_subcommand("train-extractor", "train the convolutional extractor");
  train_sub->add_option("--data", opt.cfg.data_root, "image directory root")
      ->required();

  auto* extract = app.add_subcommand("extract", "extract features with a checkpoint");
  extract->add_option("--model", opt.model_path, "extractor checkpoint")->required();
  extract->add_option("--data", opt.cfg.data_root, "image directory root")->required();

  auto* select = app.add_subcommand("select", "single selection run on features");
  select->add_option("--features", opt.cfg.features_csv, "feature csv")->required();

  auto* evaluate = app.add_subcommand("evaluate", "train and score once, no selection");
  evaluate->add_option("--features", opt.cfg.features_csv, "feature csv")->required();
  evaluate->add_option("--mask", opt.mask_path, "mask file of '0'/'1' characters");

  auto* run = app.add_subcommand("run", "full multi-run pipeline with reports");
  run->add_option("--data", opt.cfg.data_root, "image directory root");
  run->add_option("--features", opt.cfg.features_csv,
                  "feature csv (skips the extractor)");

  auto* verify = app.add_subcommand("verify-report", "recheck an emitted report bundle");
  verify->add_option("--report", opt.report_dir, "report directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(opt);
    if (train_sub->parsed()) return cmd_train_extractor(opt);
    if (extract->parsed()) return cmd_extract(opt);
    if (select->parsed()) return cmd_select(opt);
    if (evaluate->parsed()) return cmd_evaluate(opt);
    if (run->parsed()) return cmd_run(opt);
    if (verify->parsed()) return cmd_verify(opt);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
