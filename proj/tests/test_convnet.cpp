#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include "bdefs/convnet.hpp"
#include "bdefs/rng.hpp"

using namespace bdefs;
using namespace bdefs::cnn;

namespace {

constexpr double kFdStep = 1e-5;

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Central finite difference of f at *x.
double central_diff(const std::function<double()>& f, double* x) {
  const double saved = *x;
  *x = saved + kFdStep;
  const double hi = f();
  *x = saved - kFdStep;
  const double lo = f();
  *x = saved;
  return (hi - lo) / (2.0 * kFdStep);
}

Block random_block(std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                   Rng& rng) {
  Block b(n, h, w, c);
  for (auto& v : b.data) v = rng.normal(0.0, 1.0);
  return b;
}

// Random linear functional used as the downstream loss for layer checks.
std::vector<double> random_cotangent(std::size_t size, Rng& rng) {
  std::vector<double> c(size);
  for (auto& v : c) v = rng.normal(0.0, 1.0);
  return c;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Small labeled image set: class = quadrant of the bright patch.
std::vector<Image> tiny_images(std::size_t n, std::size_t side, std::vector<int>& labels,
                               std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image> images(n);
  labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image& img = images[i];
    img.height = side;
    img.width = side;
    img.channels = 1;
    img.pixels.assign(side * side, 0.0);
    const int cls = static_cast<int>(i % 3);
    labels[i] = cls;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        double v = 0.08 * rng.real01();
        if (cls == 0 && y < side / 2) v += 0.8;
        if (cls == 1 && y >= side / 2) v += 0.8;
        if (cls == 2 && x < side / 2) v += 0.8;
        img.at(y, x, 0) = std::min(1.0, v);
      }
  }
  return images;
}

}  // namespace

TEST_CASE("conv2d forward") {
  SUBCASE("1x1 filter acts as pixel-wise affine") {
    Conv2d conv;
    Rng rng(1);
    conv.init(1, 1, 1, 1, rng);
    conv.filters.value[0] = 2.0;
    conv.bias.value[0] = 1.0;
    Block in(1, 2, 2, 1);
    in.data = {0.5, 1.0, -1.0, 2.0};
    auto out = conv.forward(in);
    CHECK(out.data[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(out.data[1] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(out.data[2] == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(out.data[3] == doctest::Approx(5.0).epsilon(1e-15));
  }
  SUBCASE("hand-summed 2x2 diagonal filter on 3x3 input") {
    Conv2d conv;
    Rng rng(1);
    conv.init(2, 2, 1, 1, rng);
    // filter [[1,0],[0,1]], bias 0
    conv.filters.value = {1.0, 0.0, 0.0, 1.0};
    conv.bias.value[0] = 0.0;
    Block in(1, 3, 3, 1);
    in.data = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    auto out = conv.forward(in);
    CHECK(out.h == 2);
    CHECK(out.w == 2);
    CHECK(out.data == std::vector<double>{6, 8, 12, 14});
  }
  SUBCASE("all-zero filter yields constant bias") {
    Conv2d conv;
    Rng rng(1);
    conv.init(2, 2, 1, 3, rng);
    std::fill(conv.filters.value.begin(), conv.filters.value.end(), 0.0);
    conv.bias.value = {0.25, -1.0, 4.0};
    Block in = random_block(2, 4, 5, 1, rng);
    auto out = conv.forward(in);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < out.h; ++i)
        for (std::size_t j = 0; j < out.w; ++j) {
          CHECK(out.at(n, i, j, 0) == 0.25);
          CHECK(out.at(n, i, j, 1) == -1.0);
          CHECK(out.at(n, i, j, 2) == 4.0);
        }
  }
  SUBCASE("filter larger than image throws") {
    Conv2d conv;
    Rng rng(1);
    conv.init(3, 3, 1, 1, rng);
    Block in(1, 2, 2, 1);
    CHECK_THROWS_AS(conv.forward(in), std::invalid_argument);
  }
}

TEST_CASE("relu, maxpool and softmax basics") {
  ReluBlock relu;
  Block in(1, 1, 2, 1);
  in.data = {-1.0, 2.0};
  auto out = relu.forward(in);
  CHECK(out.data == std::vector<double>{0.0, 2.0});

  MaxPool2 pool;
  Block p(1, 2, 2, 1);
  p.data = {1, 2, 3, 4};
  auto pooled = pool.forward(p);
  CHECK(pooled.h == 1);
  CHECK(pooled.w == 1);
  CHECK(pooled.data[0] == 4.0);

  Matrix logits(1, 3);  // zeros
  auto probs = softmax_rows(logits);
  for (std::size_t c = 0; c < 3; ++c)
    CHECK(probs(0, c) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("maxpool truncates odd trailing edges") {
  MaxPool2 pool;
  Block in(1, 5, 3, 2);
  Rng rng(3);
  for (auto& v : in.data) v = rng.normal();
  auto out = pool.forward(in);
  CHECK(out.h == 2);
  CHECK(out.w == 1);
  CHECK(out.c == 2);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(9);
  Matrix logits(20, 5);
  for (auto& v : logits.data()) v = rng.normal(0.0, 10.0);
  auto probs = softmax_rows(logits);
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < probs.cols(); ++c) s += probs(r, c);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("binary cross-entropy with unsquared norm penalty") {
  std::vector<std::vector<double>> no_weights;
  SUBCASE("perfect prediction") {
    std::vector<double> y{1.0}, yhat{1.0};
    CHECK(binary_ce_with_norm_penalty(y, yhat, no_weights, 0.0) < 1e-9);
  }
  SUBCASE("maximum uncertainty") {
    std::vector<double> y{1.0}, yhat{0.5};
    CHECK(binary_ce_with_norm_penalty(y, yhat, no_weights, 0.0) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("norm penalty adds gamma times the vector norm") {
    std::vector<double> y{1.0}, yhat{0.5};
    std::vector<std::vector<double>> weights{{3.0, 4.0}};
    const double base = binary_ce_with_norm_penalty(y, yhat, no_weights, 0.0);
    CHECK(binary_ce_with_norm_penalty(y, yhat, weights, 0.1) ==
          doctest::Approx(base + 0.5).epsilon(1e-12));
  }
  SUBCASE("nonnegative for any inputs") {
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
      std::vector<double> y{rng.below(2) ? 1.0 : 0.0};
      std::vector<double> yhat{rng.real01()};
      CHECK(binary_ce_with_norm_penalty(y, yhat, no_weights, 0.0) >= 0.0);
    }
  }
}

TEST_CASE("softmax cross-entropy values") {
  SUBCASE("uniform output over three classes") {
    Matrix logits(1, 3);  // zeros -> uniform softmax
    std::vector<int> labels{1};
    CHECK(softmax_xent(logits, labels, nullptr) ==
          doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("strongly correct output has near-zero loss") {
    Matrix logits(1, 3);
    logits(0, 0) = 40.0;
    std::vector<int> labels{0};
    CHECK(softmax_xent(logits, labels, nullptr) < 1e-9);
  }
  SUBCASE("gradient matches finite differences") {
    Rng rng(17);
    Matrix logits(4, 3);
    for (auto& v : logits.data()) v = rng.normal();
    std::vector<int> labels{0, 2, 1, 1};
    Matrix dlogits;
    softmax_xent(logits, labels, &dlogits);
    for (std::size_t i = 0; i < logits.data().size(); ++i) {
      const double numeric = central_diff(
          [&]() { return softmax_xent(logits, labels, nullptr); },
          &logits.data()[i]);
      CHECK(rel_error(dlogits.data()[i], numeric) < 1e-4);
    }
  }
}

TEST_CASE("adam") {
  AdamConfig cfg;
  SUBCASE("first step moves by about minus alpha") {
    std::vector<double> x{0.0}, g{1.0}, m{0.0}, v{0.0};
    adam_update(x, g, m, v, 1, cfg);
    CHECK(x[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  }
  SUBCASE("zero gradients leave parameters unchanged") {
    std::vector<double> x{3.0, -2.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
    for (std::size_t t = 1; t <= 100; ++t) adam_update(x, g, m, v, t, cfg);
    CHECK(x[0] == 3.0);
    CHECK(x[1] == -2.0);
  }
  SUBCASE("minimizes a scalar quadratic and matches an independent trace") {
    // Independent re-statement of the update rule, kept deliberately naive.
    // The default step of 1e-3 can only travel ~0.5 in 500 steps, so the
    // optimization check runs at 1e-2.
    AdamConfig fast = cfg;
    fast.alpha = 1e-2;
    double rx = 1.0, rm = 0.0, rv = 0.0;
    std::vector<double> x{1.0}, m{0.0}, v{0.0};
    for (std::size_t t = 1; t <= 500; ++t) {
      const double g = 2.0 * x[0];
      std::vector<double> gv{g};
      adam_update(x, gv, m, v, t, fast);

      const double rg = 2.0 * rx;
      rm = fast.beta1 * rm + (1.0 - fast.beta1) * rg;
      rv = fast.beta2 * rv + (1.0 - fast.beta2) * rg * rg;
      const double mhat = rm / (1.0 - std::pow(fast.beta1, static_cast<double>(t)));
      const double vhat = rv / (1.0 - std::pow(fast.beta2, static_cast<double>(t)));
      rx -= fast.alpha * mhat / (std::sqrt(vhat) + fast.eps);
      CHECK(std::abs(x[0] - rx) < 1e-12);
    }
    CHECK(std::abs(x[0]) < 0.1);
  }
  SUBCASE("shape mismatch and bad step index throw") {
    std::vector<double> x{1.0}, g{1.0, 2.0}, m{0.0}, v{0.0};
    CHECK_THROWS_AS(adam_update(x, g, m, v, 1, cfg), std::invalid_argument);
    std::vector<double> g1{1.0};
    CHECK_THROWS_AS(adam_update(x, g1, m, v, 0, cfg), std::invalid_argument);
  }
}

TEST_CASE("layer gradients match finite differences") {
  Rng rng(123);

  SUBCASE("conv2d: filters, bias and input") {
    Conv2d conv;
    conv.init(2, 2, 2, 3, rng);
    Block in = random_block(2, 4, 4, 2, rng);
    auto cot = random_cotangent(2 * 3 * 3 * 3, rng);
    auto loss = [&]() { return dot(conv.forward(in).data, cot); };

    Block dout(2, 3, 3, 3);
    dout.data = cot;
    Block dx = conv.backward(in, dout);

    for (std::size_t i = 0; i < conv.filters.value.size(); ++i)
      CHECK(rel_error(conv.filters.grad[i],
                      central_diff(loss, &conv.filters.value[i])) < 1e-4);
    for (std::size_t i = 0; i < conv.bias.value.size(); ++i)
      CHECK(rel_error(conv.bias.grad[i], central_diff(loss, &conv.bias.value[i])) <
            1e-4);
    for (std::size_t i = 0; i < in.data.size(); ++i)
      CHECK(rel_error(dx.data[i], central_diff(loss, &in.data[i])) < 1e-4);
  }

  SUBCASE("batchnorm in training mode: scale, shift and input") {
    BatchNorm bn;
    bn.init(3);
    // Non-trivial affine parameters.
    bn.scale.value = {1.5, 0.7, -0.4};
    bn.shift.value = {0.2, -1.0, 0.05};
    Block in = random_block(2, 3, 3, 3, rng);
    auto cot = random_cotangent(in.data.size(), rng);
    auto loss = [&]() { return dot(bn.forward(in, true).data, cot); };

    bn.forward(in, true);
    Block dout(2, 3, 3, 3);
    dout.data = cot;
    Block dx = bn.backward(in, dout);

    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(rel_error(bn.scale.grad[i], central_diff(loss, &bn.scale.value[i])) < 1e-4);
      CHECK(rel_error(bn.shift.grad[i], central_diff(loss, &bn.shift.value[i])) < 1e-4);
    }
    for (std::size_t i = 0; i < in.data.size(); ++i)
      CHECK(rel_error(dx.data[i], central_diff(loss, &in.data[i])) < 1e-4);
  }

  SUBCASE("maxpool input gradient") {
    MaxPool2 pool;
    Block in = random_block(2, 4, 6, 2, rng);
    auto cot = random_cotangent(2 * 2 * 3 * 2, rng);
    auto loss = [&]() { return dot(pool.forward(in).data, cot); };
    pool.forward(in);
    Block dout(2, 2, 3, 2);
    dout.data = cot;
    Block dx = pool.backward(dout, in);
    for (std::size_t i = 0; i < in.data.size(); ++i)
      CHECK(rel_error(dx.data[i], central_diff(loss, &in.data[i])) < 1e-4);
  }

  SUBCASE("dense: weights, bias and input") {
    Dense fc;
    fc.init(6, 4, rng);
    Matrix in(3, 6);
    for (auto& v : in.data()) v = rng.normal();
    auto cot = random_cotangent(3 * 4, rng);
    auto loss = [&]() { return dot(fc.forward(in).data(), cot); };

    Matrix dout(3, 4);
    dout.data() = cot;
    Matrix dx = fc.backward(in, dout);

    for (std::size_t i = 0; i < fc.weights.value.size(); ++i)
      CHECK(rel_error(fc.weights.grad[i], central_diff(loss, &fc.weights.value[i])) <
            1e-4);
    for (std::size_t i = 0; i < fc.bias.value.size(); ++i)
      CHECK(rel_error(fc.bias.grad[i], central_diff(loss, &fc.bias.value[i])) < 1e-4);
    for (std::size_t i = 0; i < in.data().size(); ++i)
      CHECK(rel_error(dx.data()[i], central_diff(loss, &in.data()[i])) < 1e-4);
  }

  SUBCASE("relu input gradient") {
    ReluBlock relu;
    Block in = random_block(2, 3, 3, 2, rng);
    auto cot = random_cotangent(in.data.size(), rng);
    auto loss = [&]() { return dot(relu.forward(in).data, cot); };
    relu.forward(in);
    Block dout(2, 3, 3, 2);
    dout.data = cot;
    Block dx = relu.backward(dout);
    for (std::size_t i = 0; i < in.data.size(); ++i)
      CHECK(rel_error(dx.data[i], central_diff(loss, &in.data[i])) < 1e-4);
  }

  SUBCASE("dropout backward applies the stored mask") {
    Dropout drop;
    drop.rate = 0.4;
    Rng drop_rng(5);
    Matrix in(4, 6);
    for (auto& v : in.data()) v = rng.normal();
    Matrix out = drop.forward(in, true, drop_rng);
    Matrix dout(4, 6);
    for (auto& v : dout.data()) v = rng.normal();
    Matrix dx = drop.backward(dout);
    for (std::size_t i = 0; i < in.data().size(); ++i) {
      CHECK(out.data()[i] == in.data()[i] * drop.mask.data()[i]);
      CHECK(dx.data()[i] == dout.data()[i] * drop.mask.data()[i]);
    }
  }
}

TEST_CASE("full training loss gradients match finite differences over seeds") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CAPTURE(seed);
    auto plan = plan_net(8, 8, 1, 2, 3, 3, 5, 3);
    ConvNet net(plan, 0.35, seed);
    std::vector<int> labels;
    auto images = tiny_images(3, 8, labels, seed * 101);
    std::vector<std::size_t> idx{0, 1, 2};
    std::vector<int> batch_labels{labels[0], labels[1], labels[2]};
    const double gamma = 1e-3;
    const std::uint64_t dropout_seed = 77 + seed;

    net.training_loss(images, idx, batch_labels, gamma, dropout_seed);
    std::vector<std::vector<double>> analytic;
    for (Param* p : net.params()) analytic.push_back(p->grad);

    auto loss = [&]() {
      ConvNet probe = net;
      return probe.training_loss(images, idx, batch_labels, gamma, dropout_seed);
    };
    auto params = net.params();
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t]->value.size(); ++i) {
        const double numeric = central_diff(loss, &params[t]->value[i]);
        CHECK(rel_error(analytic[t][i], numeric) < 1e-4);
      }
  }
}

TEST_CASE("training loss on one-hot-correct output with zero gamma is near zero") {
  auto plan = plan_net(6, 6, 1, 1, 3, 3, 4, 2);
  ConvNet net(plan, 0.0, 3);
  Matrix logits(1, 2);
  logits(0, 0) = 45.0;
  logits(0, 1) = -45.0;
  std::vector<int> labels{0};
  CHECK(softmax_xent(logits, labels, nullptr) < 1e-9);
}

TEST_CASE("plan of the full-scale stack") {
  auto plan = plan_net(224, 224, 1, 8, 3, 3, 400, 3);
  CHECK(plan.conv_h == 222);
  CHECK(plan.conv_w == 222);
  CHECK(plan.pool_h == 111);
  CHECK(plan.pool_w == 111);
  CHECK(plan.flatten_dim == 98568);
  CHECK(plan.fc_units == 400);
}

TEST_CASE("training learns a small synthetic image task deterministically") {
  std::vector<int> labels;
  auto images = tiny_images(90, 10, labels, 2025);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < images.size(); ++i)
    (i % 5 == 4 ? val_idx : train_idx).push_back(i);

  auto plan = plan_net(10, 10, 1, 4, 3, 3, 16, 3);
  TrainConfig cfg;
  cfg.epochs = 25;
  cfg.batch_size = 16;
  cfg.seed = 11;
  cfg.dropout = 0.2;

  ConvNet net(plan, cfg.dropout, cfg.seed);
  auto history = train(net, images, labels, train_idx, val_idx, cfg);
  REQUIRE(history.size() == 25);
  CHECK(history.back().val_acc >= 0.8);
  CHECK(net.trained());

  ConvNet net2(plan, cfg.dropout, cfg.seed);
  auto history2 = train(net2, images, labels, train_idx, val_idx, cfg);
  for (std::size_t e = 0; e < history.size(); ++e) {
    CHECK(history[e].train_loss == history2[e].train_loss);
    CHECK(history[e].val_loss == history2[e].val_loss);
    CHECK(history[e].train_acc == history2[e].train_acc);
    CHECK(history[e].val_acc == history2[e].val_acc);
  }

  SUBCASE("zero learning rate leaves parameters untouched") {
    ConvNet frozen(plan, cfg.dropout, cfg.seed);
    std::vector<std::vector<double>> before;
    for (Param* p : frozen.params()) before.push_back(p->value);
    TrainConfig zero = cfg;
    zero.epochs = 3;
    zero.adam.alpha = 0.0;
    train(frozen, images, labels, train_idx, val_idx, zero);
    auto params = frozen.params();
    for (std::size_t t = 0; t < params.size(); ++t)
      CHECK(params[t]->value == before[t]);
  }

  SUBCASE("feature extraction") {
    auto features = net.extract_features(images);
    CHECK(features.rows() == images.size());
    CHECK(features.cols() == 16);
    for (double v : features.data()) CHECK(v >= 0.0);

    std::vector<Image> twice{images[0], images[0]};
    auto f2 = net.extract_features(twice);
    for (std::size_t c = 0; c < f2.cols(); ++c) CHECK(f2(0, c) == f2(1, c));

    ConvNet untrained(plan, cfg.dropout, 1);
    CHECK_THROWS_AS(untrained.extract_features(images), std::logic_error);
  }

  SUBCASE("checkpoint round trip preserves everything") {
    std::stringstream buffer;
    net.save(buffer);
    ConvNet loaded = ConvNet::load(buffer);
    CHECK(loaded.trained());
    auto a = net.params();
    auto b = loaded.params();
    for (std::size_t t = 0; t < a.size(); ++t) CHECK(a[t]->value == b[t]->value);
    CHECK(loaded.bn.running_mean == net.bn.running_mean);
    CHECK(loaded.bn.running_var == net.bn.running_var);

    auto fa = net.extract_features(images);
    auto fb = loaded.extract_features(images);
    CHECK(fa.data() == fb.data());
  }

  SUBCASE("inference is independent of batch composition") {
    // Scoring one image alone or inside a larger batch gives the same rows,
    // because normalization uses running statistics and dropout is off.
    std::vector<Image> alone{images[3]};
    auto fa = net.extract_features(alone);
    std::vector<Image> grouped{images[7], images[3], images[12]};
    auto fg = net.extract_features(grouped);
    for (std::size_t c = 0; c < fa.cols(); ++c)
      CHECK(fa(0, c) == doctest::Approx(fg(1, c)).epsilon(1e-12));
  }
}

TEST_CASE("divergent training aborts with history preserved") {
  std::vector<int> labels;
  auto images = tiny_images(12, 8, labels, 5);
  std::vector<std::size_t> train_idx{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<std::size_t> val_idx{8, 9, 10, 11};
  auto plan = plan_net(8, 8, 1, 2, 3, 3, 6, 3);
  ConvNet net(plan, 0.0, 1);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.seed = 2;
  cfg.adam.alpha = 1e100;
  std::vector<EpochStats> history;
  CHECK_THROWS_AS(train(net, images, labels, train_idx, val_idx, cfg, &history),
                  std::runtime_error);
  CHECK(history.size() < 6);
}

TEST_CASE("train history CSV header") {
  std::vector<EpochStats> h{{1, 0.5, 0.75, 0.625, 0.25}};
  std::ostringstream out;
  write_train_history_csv(h, out);
  CHECK(out.str().rfind("epoch,train_loss,train_acc,val_loss,val_acc\n", 0) == 0);
  CHECK(out.str().find("1,0.5,0.75,0.625,0.25\n") != std::string::npos);
}
