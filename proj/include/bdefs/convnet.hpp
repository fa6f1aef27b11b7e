#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bdefs/matrix.hpp"
#include "bdefs/rng.hpp"

namespace bdefs::cnn {

// Grayscale-or-multichannel image, HWC layout, pixel values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
};

// Mini-batch activation block, NHWC layout.
struct Block {
  std::size_t n = 0, h = 0, w = 0, c = 0;
  std::vector<double> data;

  Block() = default;
  Block(std::size_t n_, std::size_t h_, std::size_t w_, std::size_t c_)
      : n(n_), h(h_), w(w_), c(c_), data(n_ * h_ * w_ * c_, 0.0) {}
  double& at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) {
    return data[((i * h + y) * w + x) * c + ch];
  }
  double at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) const {
    return data[((i * h + y) * w + x) * c + ch];
  }
  std::size_t per_sample() const { return h * w * c; }
};

// One learnable tensor with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<double> value;
  std::vector<double> grad;
};

// ---- layers --------------------------------------------------------------

// Valid convolution, stride 1:
// out(i,j,f) = sum_{p,q,c} filter(p,q,c,f) * in(i+p, j+q, c) + bias(f)
struct Conv2d {
  std::size_t fh = 0, fw = 0, in_c = 0, out_c = 0;
  Param filters;  // fh*fw*in_c*out_c, index ((p*fw+q)*in_c+c)*out_c+f
  Param bias;     // out_c

  void init(std::size_t fh_, std::size_t fw_, std::size_t in_c_, std::size_t out_c_,
            Rng& rng);
  Block forward(const Block& in) const;
  Block backward(const Block& in, const Block& dout);  // accumulates grads
};

// Per-channel batch normalization over batch and spatial positions.
struct BatchNorm {
  std::size_t channels = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  Param scale;  // gamma
  Param shift;  // beta
  std::vector<double> running_mean;
  std::vector<double> running_var;

  // caches from the last training-mode forward
  std::vector<double> batch_mean, batch_var;
  Block normalized;

  void init(std::size_t channels_);
  Block forward(const Block& in, bool training);
  Block backward(const Block& in, const Block& dout);
};

struct ReluBlock {
  Block mask;  // 1 where input > 0
  Block forward(const Block& in);
  Block backward(const Block& dout) const;
};

// 2x2 window, stride 2; odd trailing rows/columns are truncated.
struct MaxPool2 {
  std::vector<std::size_t> argmax;  // flat input index per output element
  Block forward(const Block& in);
  Block backward(const Block& dout, const Block& in) const;
};

// Fully connected layer on flattened rows: out = x W^T + b.
struct Dense {
  std::size_t in_dim = 0, out_dim = 0;
  Param weights;  // out_dim * in_dim, row-major by output unit
  Param bias;     // out_dim

  void init(std::size_t in_dim_, std::size_t out_dim_, Rng& rng);
  Matrix forward(const Matrix& in) const;
  Matrix backward(const Matrix& in, const Matrix& dout);
};

struct DenseRelu {
  Matrix mask;
  Matrix forward(const Matrix& in);
  Matrix backward(const Matrix& dout) const;
};

// Inverted dropout; identity in inference mode.
struct Dropout {
  double rate = 0.5;
  Matrix mask;
  Matrix forward(const Matrix& in, bool training, Rng& rng);
  Matrix backward(const Matrix& dout) const;
};

Matrix softmax_rows(const Matrix& logits);

// Mean cross-entropy of softmax(logits) against integer labels, with the
// gradient w.r.t. logits.
double softmax_xent(const Matrix& logits, std::span<const int> labels, Matrix* dlogits);

// Literal scalar form used for reporting: binary cross-entropy over M
// predictions plus gamma * sum of unsquared L2 norms of the given weight
// vectors. Predictions are clamped to [1e-12, 1 - 1e-12] before the logs.
double binary_ce_with_norm_penalty(std::span<const double> targets,
                                   std::span<const double> predicted,
                                   std::span<const std::vector<double>> weight_vectors,
                                   double gamma);

// ---- optimizer -----------------------------------------------------------

struct AdamConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected moment update at step t (t >= 1) for a single tensor.
void adam_update(std::span<double> value, std::span<const double> grad,
                 std::span<double> m, std::span<double> v, std::size_t t,
                 const AdamConfig& cfg);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;

  void init(std::span<Param* const> params);
  void step(std::span<Param* const> params, const AdamConfig& cfg);
};

// ---- the network ----------------------------------------------------------

// Fixed stack: conv (8 filters 3x3) -> batchnorm -> relu -> maxpool 2x2/2 ->
// flatten -> fc 400 -> relu -> dropout -> fc K -> softmax. Features are
// tapped at the post-relu, pre-dropout 400-unit activations.
struct NetPlan {
  std::size_t in_h = 0, in_w = 0, in_c = 0;
  std::size_t num_filters = 8, filter_h = 3, filter_w = 3;
  std::size_t conv_h = 0, conv_w = 0;
  std::size_t pool_h = 0, pool_w = 0;
  std::size_t flatten_dim = 0;
  std::size_t fc_units = 400;
  std::size_t classes = 0;
};

NetPlan plan_net(std::size_t h, std::size_t w, std::size_t c, std::size_t num_filters,
                 std::size_t filter_h, std::size_t filter_w, std::size_t fc_units,
                 std::size_t classes);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  AdamConfig adam;
  double gamma = 1e-4;    // L2 coefficient on weight tensors
  double dropout = 0.5;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

class ConvNet {
 public:
  ConvNet() = default;
  ConvNet(const NetPlan& plan, double dropout_rate, std::uint64_t init_seed);

  const NetPlan& plan() const { return plan_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  std::vector<Param*> params();

  // Forward pass; fills logits and optionally the 400-unit feature rows.
  // Dropout draws come from drop_rng when training.
  Matrix forward(const std::vector<Image>& images, std::span<const std::size_t> idx,
                 bool training, Rng* drop_rng, Matrix* features_out = nullptr);

  // Mean cross-entropy + gamma * sum of squared L2 norms of weight tensors,
  // with exact gradients for every parameter. Must follow a training-mode
  // forward on the same batch.
  double loss_and_gradients(const Matrix& logits, std::span<const int> labels,
                            double gamma);

  // Convenience for optimization and finite-difference checking: zeroes
  // grads, runs forward + loss_and_gradients in training mode with a fixed
  // dropout stream.
  double training_loss(const std::vector<Image>& images, std::span<const std::size_t> idx,
                       std::span<const int> labels, double gamma,
                       std::uint64_t dropout_seed);

  void zero_grads();

  // Row per image: post-relu activations of the 400-unit layer (pre-dropout).
  Matrix extract_features(const std::vector<Image>& images);

  void save(std::ostream& out) const;
  static ConvNet load(std::istream& in);

  // Layers are public for the layer-wise gradient tests.
  Conv2d conv;
  BatchNorm bn;
  ReluBlock relu1;
  MaxPool2 pool;
  Dense fc1;
  DenseRelu relu2;
  Dropout drop;
  Dense fc2;

 private:
  NetPlan plan_;
  bool trained_ = false;

  // caches for backward
  Block in_cache_, conv_out_, bn_out_, relu_out_;
  Matrix flat_, fc1_out_, relu2_out_, drop_out_;

  Block images_to_block(const std::vector<Image>& images,
                        std::span<const std::size_t> idx) const;
};

// Seeded per-epoch shuffling, mini-batch ADAM, running batch-norm statistics
// frozen for evaluation. Fills history progressively (one entry per epoch)
// so a divergence abort preserves completed epochs.
std::vector<EpochStats> train(ConvNet& net, const std::vector<Image>& images,
                              std::span<const int> labels,
                              std::span<const std::size_t> train_idx,
                              std::span<const std::size_t> val_idx,
                              const TrainConfig& cfg,
                              std::vector<EpochStats>* history_out = nullptr);

void write_train_history_csv(std::span<const EpochStats> history, std::ostream& out);

}  // namespace bdefs::cnn
