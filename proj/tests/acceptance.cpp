// Acceptance suite: one pass/fail line per criterion, exit code equals the
// number of failed criteria. Heavy end-to-end criteria run the same library
// entry points the CLI uses; the determinism criterion drives the CLI binary
// itself.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bdefs/binary_de.hpp"
#include "bdefs/convnet.hpp"
#include "bdefs/dataset.hpp"
#include "bdefs/linear_svm.hpp"
#include "bdefs/metrics.hpp"
#include "bdefs/pipeline.hpp"
#include "bdefs/rng.hpp"

namespace fs = std::filesystem;
using namespace bdefs;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

// ---------- criterion 1: per-class rates from reference averaged counts ----------

void criterion_metric_fidelity(Outcome& out) {
  const metrics::ClassConfusion c{363.30, 727.00, 1.00, 0.70};
  out.require(std::abs(*metrics::accuracy(c) - 0.9984) < 0.0005, "accuracy");
  out.require(std::abs(*metrics::sensitivity(c) - 0.9981) < 0.0005, "sensitivity");
  out.require(std::abs(*metrics::specificity(c) - 0.9986) < 0.0005, "specificity");
  out.require(std::abs(*metrics::geometric_mean(c) - 0.9984) < 0.0005, "gmean");
}

// ---------- criterion 2: aggregation of the reference test confusion -------------

void criterion_aggregation_fidelity(Outcome& out) {
  metrics::ConfusionMatrix m(3);
  m(0, 0) = 51.75; m(0, 1) = 0.0;   m(0, 2) = 0.2;
  m(1, 0) = 0.15;  m(1, 1) = 54.9;  m(1, 2) = 0.1;
  m(2, 0) = 0.4;   m(2, 1) = 0.55;  m(2, 2) = 55.95;
  std::vector<metrics::ClassConfusion> per_class;
  for (std::size_t c = 0; c < 3; ++c) per_class.push_back(metrics::ovr_decompose(m, c));
  const auto agg = metrics::aggregate_confusions(per_class);
  out.require(std::abs(agg.tp - 54.20) < 0.005, "tp");
  out.require(std::abs(agg.tn - 108.87) < 0.005, "tn");
  out.require(std::abs(agg.fp - 0.47) < 0.005, "fp");
  out.require(std::abs(agg.fn - 0.47) < 0.005, "fn");
  out.require(std::abs(*metrics::accuracy(agg) - 0.9943) < 0.0005, "accuracy");
}

// ---------- criterion 3: bit-operator truth tables --------------------------------

de::BitMask mask_of_int(unsigned v, std::size_t bits) {
  de::BitMask m(bits);
  for (std::size_t d = 0; d < bits; ++d) m[d] = (v >> d) & 1u;
  return m;
}

void criterion_de_operators(Outcome& out) {
  std::size_t diff_mismatch = 0, mut_mismatch = 0;
  for (unsigned a = 0; a < 8; ++a)
    for (unsigned b = 0; b < 8; ++b) {
      const auto diff = de::difference_vector(mask_of_int(a, 3), mask_of_int(b, 3));
      const auto mut = de::mutate(mask_of_int(a, 3), mask_of_int(b, 3));
      for (std::size_t d = 0; d < 3; ++d) {
        const std::uint8_t abit = (a >> d) & 1u, bbit = (b >> d) & 1u;
        if (diff[d] != (abit == bbit ? 0 : abit)) ++diff_mismatch;
        if (mut[d] != (abit == 1 ? 1 : bbit)) ++mut_mismatch;
      }
    }
  out.require(diff_mismatch == 0, "difference truth table");
  out.require(mut_mismatch == 0, "mutation truth table");

  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.below(32);
    de::BitMask mutant(d), current(d);
    for (std::size_t i = 0; i < d; ++i) {
      mutant[i] = static_cast<std::uint8_t>(rng.below(2));
      current[i] = static_cast<std::uint8_t>(rng.below(2));
    }
    if (de::crossover(mutant, current, 1.0, rng) != mutant) {
      out.require(false, "crossover at unit rate != mutant");
      return;
    }
  }
}

// ---------- criterion 4: optimizing |popcount - 2| --------------------------------

void criterion_de_optimization(Outcome& out) {
  const de::FitnessFn f = [](const de::BitMask& m) {
    return std::abs(static_cast<double>(de::popcount(m)) - 2.0);
  };
  de::DeConfig cfg;
  cfg.pop_size = 8;
  cfg.generations = 50;
  int hits = 0;
  bool monotone = true;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    cfg.seed = seed;
    const auto result = de::run(cfg, 4, f);
    if (result.best_fitness == 0.0) ++hits;
    double prev = 1e300;
    for (const auto& rec : result.history.records) {
      if (rec.best_fitness > prev) monotone = false;
      prev = rec.best_fitness;
    }
  }
  out.require(hits >= 95, "reached the optimum in only " + std::to_string(hits) +
                              "/100 runs");
  out.require(monotone, "best fitness increased within a run");
}

// ---------- criterion 5: finite-difference gradient checks ------------------------

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

double central_diff(const std::function<double()>& f, double* x) {
  const double h = 1e-5, saved = *x;
  *x = saved + h;
  const double hi = f();
  *x = saved - h;
  const double lo = f();
  *x = saved;
  return (hi - lo) / (2.0 * h);
}

std::vector<cnn::Image> gradcheck_images(std::size_t n, std::vector<int>& labels,
                                         std::uint64_t seed) {
  Rng rng(seed);
  std::vector<cnn::Image> images(n);
  labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    images[i].height = 8;
    images[i].width = 8;
    images[i].channels = 1;
    images[i].pixels.resize(64);
    for (auto& p : images[i].pixels) p = rng.real01();
    labels[i] = static_cast<int>(i % 3);
  }
  return images;
}

void criterion_gradient_checks(Outcome& out) {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 13);

    // Per-layer input/parameter gradients against a random linear functional.
    {
      cnn::Conv2d conv;
      conv.init(2, 2, 2, 3, rng);
      cnn::Block in(2, 4, 4, 2);
      for (auto& v : in.data) v = rng.normal();
      cnn::Block dout(2, 3, 3, 3);
      for (auto& v : dout.data) v = rng.normal();
      auto loss = [&]() {
        const auto o = conv.forward(in);
        return std::inner_product(o.data.begin(), o.data.end(), dout.data.begin(), 0.0);
      };
      const auto dx = conv.backward(in, dout);
      for (std::size_t i = 0; i < conv.filters.value.size(); ++i)
        worst = std::max(worst, rel_error(conv.filters.grad[i],
                                          central_diff(loss, &conv.filters.value[i])));
      for (std::size_t i = 0; i < conv.bias.value.size(); ++i)
        worst = std::max(worst, rel_error(conv.bias.grad[i],
                                          central_diff(loss, &conv.bias.value[i])));
      for (std::size_t i = 0; i < in.data.size(); ++i)
        worst = std::max(worst, rel_error(dx.data[i], central_diff(loss, &in.data[i])));
    }
    {
      cnn::BatchNorm bn;
      bn.init(3);
      bn.scale.value = {1.4, 0.6, -0.8};
      bn.shift.value = {0.3, -0.2, 0.9};
      cnn::Block in(2, 3, 3, 3);
      for (auto& v : in.data) v = rng.normal();
      cnn::Block dout(2, 3, 3, 3);
      for (auto& v : dout.data) v = rng.normal();
      auto loss = [&]() {
        const auto o = bn.forward(in, true);
        return std::inner_product(o.data.begin(), o.data.end(), dout.data.begin(), 0.0);
      };
      bn.forward(in, true);
      const auto dx = bn.backward(in, dout);
      for (std::size_t i = 0; i < 3; ++i) {
        worst = std::max(worst, rel_error(bn.scale.grad[i],
                                          central_diff(loss, &bn.scale.value[i])));
        worst = std::max(worst, rel_error(bn.shift.grad[i],
                                          central_diff(loss, &bn.shift.value[i])));
      }
      for (std::size_t i = 0; i < in.data.size(); ++i)
        worst = std::max(worst, rel_error(dx.data[i], central_diff(loss, &in.data[i])));
    }
    {
      cnn::MaxPool2 pool;
      cnn::Block in(2, 4, 6, 2);
      for (auto& v : in.data) v = rng.normal();
      cnn::Block dout(2, 2, 3, 2);
      for (auto& v : dout.data) v = rng.normal();
      auto loss = [&]() {
        const auto o = pool.forward(in);
        return std::inner_product(o.data.begin(), o.data.end(), dout.data.begin(), 0.0);
      };
      pool.forward(in);
      const auto dx = pool.backward(dout, in);
      for (std::size_t i = 0; i < in.data.size(); ++i)
        worst = std::max(worst, rel_error(dx.data[i], central_diff(loss, &in.data[i])));
    }
    {
      cnn::Dense fc;
      fc.init(6, 4, rng);
      Matrix in(3, 6);
      for (auto& v : in.data()) v = rng.normal();
      Matrix dout(3, 4);
      for (auto& v : dout.data()) v = rng.normal();
      auto loss = [&]() {
        const auto o = fc.forward(in);
        return std::inner_product(o.data().begin(), o.data().end(),
                                  dout.data().begin(), 0.0);
      };
      const auto dx = fc.backward(in, dout);
      for (std::size_t i = 0; i < fc.weights.value.size(); ++i)
        worst = std::max(worst, rel_error(fc.weights.grad[i],
                                          central_diff(loss, &fc.weights.value[i])));
      for (std::size_t i = 0; i < fc.bias.value.size(); ++i)
        worst = std::max(worst, rel_error(fc.bias.grad[i],
                                          central_diff(loss, &fc.bias.value[i])));
      for (std::size_t i = 0; i < in.data().size(); ++i)
        worst = std::max(worst, rel_error(dx.data()[i], central_diff(loss, &in.data()[i])));
    }
    {
      cnn::ReluBlock relu;
      cnn::Block in(2, 3, 3, 2);
      for (auto& v : in.data) v = rng.normal();
      cnn::Block dout(2, 3, 3, 2);
      for (auto& v : dout.data) v = rng.normal();
      auto loss = [&]() {
        const auto o = relu.forward(in);
        return std::inner_product(o.data.begin(), o.data.end(), dout.data.begin(), 0.0);
      };
      relu.forward(in);
      const auto dx = relu.backward(dout);
      for (std::size_t i = 0; i < in.data.size(); ++i)
        worst = std::max(worst, rel_error(dx.data[i], central_diff(loss, &in.data[i])));
    }
    {
      Matrix logits(4, 3);
      for (auto& v : logits.data()) v = rng.normal();
      std::vector<int> labels{0, 2, 1, 1};
      Matrix dlogits;
      cnn::softmax_xent(logits, labels, &dlogits);
      auto loss = [&]() { return cnn::softmax_xent(logits, labels, nullptr); };
      for (std::size_t i = 0; i < logits.data().size(); ++i)
        worst = std::max(worst,
                         rel_error(dlogits.data()[i], central_diff(loss, &logits.data()[i])));
    }

    // Full objective over every parameter, dropout active with a fixed mask.
    {
      const auto plan = cnn::plan_net(8, 8, 1, 2, 3, 3, 5, 3);
      cnn::ConvNet net(plan, 0.35, seed);
      std::vector<int> labels;
      auto images = gradcheck_images(3, labels, seed * 101);
      std::vector<std::size_t> idx{0, 1, 2};
      const double gamma = 1e-3;
      const std::uint64_t drop_seed = 40 + seed;
      net.training_loss(images, idx, labels, gamma, drop_seed);
      std::vector<std::vector<double>> analytic;
      for (cnn::Param* p : net.params()) analytic.push_back(p->grad);
      auto loss = [&]() {
        cnn::ConvNet probe = net;
        return probe.training_loss(images, idx, labels, gamma, drop_seed);
      };
      auto params = net.params();
      for (std::size_t t = 0; t < params.size(); ++t)
        for (std::size_t i = 0; i < params[t]->value.size(); ++i)
          worst = std::max(worst, rel_error(analytic[t][i],
                                            central_diff(loss, &params[t]->value[i])));
    }
  }
  out.require(worst < 1e-4,
              "worst relative gradient error " + std::to_string(worst));
}

// ---------- criterion 6: rank AUC against all-pairs counting -----------------------

void criterion_auc_oracle(Outcome& out) {
  Rng rng(123);
  double worst = 0.0;
  for (int iter = 0; iter < 100; ++iter) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> scores(n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng.below(25)) / 8.0;
      pos[i] = static_cast<std::uint8_t>(rng.below(2));
    }
    pos[0] = 1;
    pos[1] = 0;
    const auto fast = metrics::auc_ovr(scores, pos);
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!pos[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (pos[j]) continue;
        ++pairs;
        if (scores[i] > scores[j])
          wins += 1.0;
        else if (scores[i] == scores[j])
          wins += 0.5;
      }
    }
    worst = std::max(worst, std::abs(*fast - wins / static_cast<double>(pairs)));
  }
  out.require(worst < 1e-12, "worst deviation " + std::to_string(worst));
}

// ---------- criterion 7: separable-blob SVM ----------------------------------------

void criterion_svm(Outcome& out) {
  for (std::uint64_t seed : {2024ULL, 7ULL, 99ULL}) {
    Rng rng(seed);
    const std::size_t n = 100;
    Matrix x(n, 2);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool pos = (i % 2) == 0;
      x(i, 0) = (pos ? 3.0 : -3.0) + rng.normal(0.0, 0.6);
      if (pos && x(i, 0) < 1.0) x(i, 0) = 1.0 + rng.real01();
      if (!pos && x(i, 0) > -1.0) x(i, 0) = -1.0 - rng.real01();
      x(i, 1) = rng.normal(0.0, 1.0);
      y[i] = pos ? 1 : -1;
    }
    const auto model = svm::train_binary(x, y, svm::SvmParams{});
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = model.weights[0] * x(i, 0) + model.weights[1] * x(i, 1) + model.bias;
      if (s * y[i] > 0.0) ++correct;
    }
    out.require(correct == n, "training accuracy " + std::to_string(correct) + "/100 (seed " +
                                  std::to_string(seed) + ")");
    for (std::size_t e = 1; e < model.primal_history.size(); ++e)
      if (model.primal_history[e] > model.primal_history[e - 1] + 1e-12)
        out.require(false, "primal objective increased at epoch " + std::to_string(e));
  }
}

// ---------- criterion 8: synthetic feature pipeline --------------------------------

double aggregate_gmean(const pipeline::ReportBundle& bundle, const std::string& method,
                       const std::string& part) {
  const auto report = metrics::build_report(
      bundle.summary.at(method).at(part).avg_confusion, {}, std::nullopt);
  return report.aggregate.rates.gmean.value_or(0.0);
}

void criterion_feature_pipeline(Outcome& out) {
  auto ds = pipeline::synth_features(
      {.n = 200, .dim = 20, .informative = 5, .noise = 0.125, .classes = 6}, 500);
  pipeline::PipelineConfig cfg;
  cfg.seed = 900;
  cfg.runs = 20;
  cfg.stratified = true;
  cfg.de.pop_size = 20;
  cfg.de.generations = 100;
  const auto bundle = pipeline::run_pipeline(cfg, ds);
  out.require(bundle.failures.empty(), "some runs failed");
  out.require(bundle.runs.size() == 20, "expected 20 runs");

  std::size_t with_all_informative = 0, count_sum = 0;
  for (const auto& run : bundle.runs) {
    bool all = true;
    for (std::size_t j = 0; j < 5; ++j) all = all && run.selected_mask[j];
    with_all_informative += all ? 1 : 0;
    count_sum += de::popcount(run.selected_mask);
  }
  out.require(with_all_informative >= 19,
              "all informative features kept in only " +
                  std::to_string(with_all_informative) + "/20 runs");
  const double mean_count =
      static_cast<double>(count_sum) / static_cast<double>(bundle.runs.size());
  out.require(mean_count < 20.0, "mean selected count " + std::to_string(mean_count));

  const double opt = aggregate_gmean(bundle, "optimized", "validation");
  const double orig = aggregate_gmean(bundle, "original", "validation");
  out.require(opt >= orig - 0.01, "validation gmean " + std::to_string(opt) +
                                      " vs full-feature " + std::to_string(orig));
}

// ---------- criterion 9: image pipeline at toy scale --------------------------------

void criterion_image_pipeline(Outcome& out) {
  auto ds = pipeline::synth_images(
      {.n = 300, .height = 28, .width = 28, .classes = 3, .noise = 0.35}, 600);
  pipeline::PipelineConfig cfg;
  cfg.seed = 800;
  cfg.runs = 1;
  cfg.de.pop_size = 20;
  cfg.de.generations = 100;
  cfg.cnn.epochs = 200;
  cfg.cnn.batch_size = 64;
  const auto bundle = pipeline::run_pipeline(cfg, ds);
  out.require(bundle.failures.empty(), "run failed");
  out.require(bundle.runs.size() == 1, "expected one run");

  double best_val = 0.0;
  for (const auto& e : bundle.train_history) best_val = std::max(best_val, e.val_acc);
  out.require(best_val >= 0.90,
              "extractor validation accuracy " + std::to_string(best_val));

  const std::size_t selected = de::popcount(bundle.runs[0].selected_mask);
  out.require(selected < 400, "selected " + std::to_string(selected) + " features");

  const double opt = aggregate_gmean(bundle, "optimized", "test");
  const double orig = aggregate_gmean(bundle, "original", "test");
  out.require(opt >= orig - 0.01, "test gmean " + std::to_string(opt) +
                                      " vs full-feature " + std::to_string(orig));
}

// ---------- criterion 10: byte-identical reports + verifier -------------------------

void criterion_determinism(Outcome& out) {
#ifndef BDEFS_CLI_PATH
  out.require(false, "CLI path not configured");
#else
  const std::string cli = BDEFS_CLI_PATH;
  const fs::path ws = fs::temp_directory_path() / "bdefs_acceptance_determinism";
  fs::remove_all(ws);
  fs::create_directories(ws);
  const std::string quiet = " >/dev/null 2>&1";

  auto sh = [&](const std::string& cmd) { return std::system(cmd.c_str()) == 0; };
  out.require(sh(cli + " --seed 9 --out " + (ws / "feats.csv").string() +
                 " synth --mode feature --n 120 --dim 10 --informative 4 --noise 0.5" +
                 quiet),
              "synth failed");
  const std::string run_args =
      " --seed 9 --runs 2 --pop-size 8 --generations 10 run --features " +
      (ws / "feats.csv").string() + quiet;
  out.require(sh(cli + " --out " + (ws / "r1").string() + run_args), "first run failed");
  out.require(sh(cli + " --out " + (ws / "r2").string() + run_args), "second run failed");
  if (!out.pass) return;

  std::set<std::string> names1, names2;
  for (const auto& e : fs::directory_iterator(ws / "r1"))
    names1.insert(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(ws / "r2"))
    names2.insert(e.path().filename().string());
  out.require(names1 == names2, "bundle file sets differ");
  for (const auto& name : names1) {
    std::ifstream a(ws / "r1" / name, std::ios::binary);
    std::ifstream b(ws / "r2" / name, std::ios::binary);
    std::ostringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    if (sa.str() != sb.str()) out.require(false, name + " differs between runs");
  }

  out.require(sh(cli + " verify-report --report " + (ws / "r1").string() + quiet),
              "verifier rejected the bundle");
  fs::remove_all(ws);
#endif
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<void(Outcome&)> fn;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "per-class rates from reference averaged counts", 1.0,
       criterion_metric_fidelity},
      {2, "one-vs-rest aggregation reproduces the reference summary row", 1.0,
       criterion_aggregation_fidelity},
      {3, "bit operators match exhaustive truth tables; unit-rate crossover copies "
          "the mutant", 1.0, criterion_de_operators},
      {4, "selector reaches the popcount optimum in >= 95/100 seeded runs, "
          "monotone best fitness", 10.0, criterion_de_optimization},
      {5, "analytic gradients match central finite differences (all layers + full "
          "objective, 5 seeds)", 60.0, criterion_gradient_checks},
      {6, "rank AUC equals all-pairs counting within 1e-12 on 100 instances", 5.0,
       criterion_auc_oracle},
      {7, "separable-blob SVM trains to 100% with non-increasing primal objective",
       5.0, criterion_svm},
      {8, "feature-mode pipeline keeps every informative feature and matches "
          "full-feature validation gmean", 300.0, criterion_feature_pipeline},
      {9, "image-mode pipeline: extractor >= 90% validation accuracy, selected "
          "subset holds test gmean with fewer features", 900.0,
       criterion_image_pipeline},
      {10, "identical seeds produce byte-identical report bundles and the verifier "
           "reconfirms them", 60.0, criterion_determinism},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    Outcome outcome;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criterion.fn(outcome);
    } catch (const std::exception& e) {
      outcome.require(false, std::string("exception: ") + e.what());
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    outcome.require(elapsed < criterion.budget_seconds,
                    "runtime " + std::to_string(elapsed) + " s exceeded budget");
    char line[512];
    std::snprintf(line, sizeof(line), "[%s] criterion %2d: %s (%.2f s)%s%s",
                  outcome.pass ? "PASS" : "FAIL", criterion.id, criterion.name,
                  elapsed, outcome.detail.empty() ? "" : " -- ",
                  outcome.detail.c_str());
    std::cout << line << std::endl;
    if (!outcome.pass) ++failures;
  }
  if (failures == 0)
    std::cout << "all criteria passed" << std::endl;
  else
    std::cout << failures << " criteria failed" << std::endl;
  return failures;
}
