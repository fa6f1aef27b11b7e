#include "bdefs/convnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace bdefs::cnn {

namespace {

void check_finite(const std::vector<double>& values, const char* layer) {
  for (double v : values)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite activations after ") + layer);
}

double squared_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

// ---- Conv2d ----------------------------------------------------------------

void Conv2d::init(std::size_t fh_, std::size_t fw_, std::size_t in_c_,
                  std::size_t out_c_, Rng& rng) {
  fh = fh_;
  fw = fw_;
  in_c = in_c_;
  out_c = out_c_;
  filters.name = "conv_filters";
  bias.name = "conv_bias";
  filters.value.resize(fh * fw * in_c * out_c);
  filters.grad.assign(filters.value.size(), 0.0);
  const double stdev = std::sqrt(2.0 / static_cast<double>(fh * fw * in_c));
  for (auto& w : filters.value) w = rng.normal(0.0, stdev);
  bias.value.assign(out_c, 0.0);
  bias.grad.assign(out_c, 0.0);
}

Block Conv2d::forward(const Block& in) const {
  if (in.c != in_c) throw std::invalid_argument("conv2d: channel mismatch");
  if (fh > in.h || fw > in.w)
    throw std::invalid_argument("conv2d: filter larger than image");
  const std::size_t oh = in.h - fh + 1;
  const std::size_t ow = in.w - fw + 1;
  Block out(in.n, oh, ow, out_c);
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double* o = &out.data[((n * oh + i) * ow + j) * out_c];
        for (std::size_t f = 0; f < out_c; ++f) o[f] = bias.value[f];
        for (std::size_t p = 0; p < fh; ++p)
          for (std::size_t q = 0; q < fw; ++q)
            for (std::size_t c = 0; c < in_c; ++c) {
              const double pixel = in.at(n, i + p, j + q, c);
              const double* w = &filters.value[((p * fw + q) * in_c + c) * out_c];
              for (std::size_t f = 0; f < out_c; ++f) o[f] += w[f] * pixel;
            }
      }
  return out;
}

Block Conv2d::backward(const Block& in, const Block& dout) {
  const std::size_t oh = dout.h;
  const std::size_t ow = dout.w;
  Block dx(in.n, in.h, in.w, in.c);
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double* g = &dout.data[((n * oh + i) * ow + j) * out_c];
        for (std::size_t f = 0; f < out_c; ++f) bias.grad[f] += g[f];
        for (std::size_t p = 0; p < fh; ++p)
          for (std::size_t q = 0; q < fw; ++q)
            for (std::size_t c = 0; c < in_c; ++c) {
              const double pixel = in.at(n, i + p, j + q, c);
              double* wg = &filters.grad[((p * fw + q) * in_c + c) * out_c];
              const double* w = &filters.value[((p * fw + q) * in_c + c) * out_c];
              double s = 0.0;
              for (std::size_t f = 0; f < out_c; ++f) {
                wg[f] += g[f] * pixel;
                s += g[f] * w[f];
              }
              dx.at(n, i + p, j + q, c) += s;
            }
      }
  return dx;
}

// ---- BatchNorm --------------------------------------------------------------

void BatchNorm::init(std::size_t channels_) {
  channels = channels_;
  scale.name = "bn_scale";
  shift.name = "bn_shift";
  scale.value.assign(channels, 1.0);
  scale.grad.assign(channels, 0.0);
  shift.value.assign(channels, 0.0);
  shift.grad.assign(channels, 0.0);
  running_mean.assign(channels, 0.0);
  running_var.assign(channels, 1.0);
}

Block BatchNorm::forward(const Block& in, bool training) {
  if (in.c != channels) throw std::invalid_argument("batchnorm: channel mismatch");
  Block out(in.n, in.h, in.w, in.c);
  const std::size_t per_channel = in.n * in.h * in.w;
  if (per_channel == 0) throw std::invalid_argument("batchnorm: empty input");

  const std::vector<double>* mean_ptr;
  const std::vector<double>* var_ptr;
  if (training) {
    batch_mean.assign(channels, 0.0);
    batch_var.assign(channels, 0.0);
    for (std::size_t i = 0; i < in.data.size(); ++i)
      batch_mean[i % channels] += in.data[i];
    for (auto& m : batch_mean) m /= static_cast<double>(per_channel);
    for (std::size_t i = 0; i < in.data.size(); ++i) {
      const double d = in.data[i] - batch_mean[i % channels];
      batch_var[i % channels] += d * d;
    }
    for (auto& v : batch_var) v /= static_cast<double>(per_channel);
    for (std::size_t c = 0; c < channels; ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * batch_mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * batch_var[c];
    }
    mean_ptr = &batch_mean;
    var_ptr = &batch_var;
    normalized = Block(in.n, in.h, in.w, in.c);
  } else {
    mean_ptr = &running_mean;
    var_ptr = &running_var;
  }

  for (std::size_t i = 0; i < in.data.size(); ++i) {
    const std::size_t c = i % channels;
    const double xhat = (in.data[i] - (*mean_ptr)[c]) / std::sqrt((*var_ptr)[c] + eps);
    if (training) normalized.data[i] = xhat;
    out.data[i] = scale.value[c] * xhat + shift.value[c];
  }
  return out;
}

Block BatchNorm::backward(const Block& in, const Block& dout) {
  const std::size_t per_channel = in.n * in.h * in.w;
  const double n = static_cast<double>(per_channel);
  Block dx(in.n, in.h, in.w, in.c);

  std::vector<double> invstd(channels);
  for (std::size_t c = 0; c < channels; ++c)
    invstd[c] = 1.0 / std::sqrt(batch_var[c] + eps);

  std::vector<double> sum_dxhat(channels, 0.0);
  std::vector<double> sum_dxhat_xhat(channels, 0.0);
  for (std::size_t i = 0; i < in.data.size(); ++i) {
    const std::size_t c = i % channels;
    scale.grad[c] += dout.data[i] * normalized.data[i];
    shift.grad[c] += dout.data[i];
    const double dxhat = dout.data[i] * scale.value[c];
    sum_dxhat[c] += dxhat;
    sum_dxhat_xhat[c] += dxhat * normalized.data[i];
  }
  for (std::size_t i = 0; i < in.data.size(); ++i) {
    const std::size_t c = i % channels;
    const double dxhat = dout.data[i] * scale.value[c];
    dx.data[i] = invstd[c] / n *
                 (n * dxhat - sum_dxhat[c] - normalized.data[i] * sum_dxhat_xhat[c]);
  }
  return dx;
}

// ---- ReLU / pooling ---------------------------------------------------------

Block ReluBlock::forward(const Block& in) {
  mask = Block(in.n, in.h, in.w, in.c);
  Block out(in.n, in.h, in.w, in.c);
  for (std::size_t i = 0; i < in.data.size(); ++i) {
    mask.data[i] = in.data[i] > 0.0 ? 1.0 : 0.0;
    out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
  }
  return out;
}

Block ReluBlock::backward(const Block& dout) const {
  Block dx(dout.n, dout.h, dout.w, dout.c);
  for (std::size_t i = 0; i < dout.data.size(); ++i)
    dx.data[i] = dout.data[i] * mask.data[i];
  return dx;
}

Block MaxPool2::forward(const Block& in) {
  const std::size_t oh = in.h / 2;
  const std::size_t ow = in.w / 2;
  if (oh == 0 || ow == 0) throw std::invalid_argument("maxpool: input too small");
  Block out(in.n, oh, ow, in.c);
  argmax.assign(out.data.size(), 0);
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t c = 0; c < in.c; ++c) {
          double best = -1e300;
          std::size_t best_idx = 0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx_ = 0; dx_ < 2; ++dx_) {
              const std::size_t flat =
                  ((n * in.h + (2 * i + dy)) * in.w + (2 * j + dx_)) * in.c + c;
              if (in.data[flat] > best) {
                best = in.data[flat];
                best_idx = flat;
              }
            }
          const std::size_t out_flat = ((n * oh + i) * ow + j) * in.c + c;
          out.data[out_flat] = best;
          argmax[out_flat] = best_idx;
        }
  return out;
}

Block MaxPool2::backward(const Block& dout, const Block& in) const {
  Block dx(in.n, in.h, in.w, in.c);
  for (std::size_t i = 0; i < dout.data.size(); ++i)
    dx.data[argmax[i]] += dout.data[i];
  return dx;
}

// ---- dense / dropout / softmax ----------------------------------------------

void Dense::init(std::size_t in_dim_, std::size_t out_dim_, Rng& rng) {
  in_dim = in_dim_;
  out_dim = out_dim_;
  weights.value.resize(out_dim * in_dim);
  weights.grad.assign(weights.value.size(), 0.0);
  const double stdev = std::sqrt(2.0 / static_cast<double>(in_dim));
  for (auto& w : weights.value) w = rng.normal(0.0, stdev);
  bias.value.assign(out_dim, 0.0);
  bias.grad.assign(out_dim, 0.0);
}

Matrix Dense::forward(const Matrix& in) const {
  if (in.cols() != in_dim) throw std::invalid_argument("dense: dimension mismatch");
  Matrix out(in.rows(), out_dim);
  for (std::size_t n = 0; n < in.rows(); ++n)
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* w = &weights.value[o * in_dim];
      double s = bias.value[o];
      for (std::size_t i = 0; i < in_dim; ++i) s += w[i] * in(n, i);
      out(n, o) = s;
    }
  return out;
}

Matrix Dense::backward(const Matrix& in, const Matrix& dout) {
  Matrix dx(in.rows(), in_dim);
  for (std::size_t n = 0; n < in.rows(); ++n)
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double g = dout(n, o);
      bias.grad[o] += g;
      double* wg = &weights.grad[o * in_dim];
      const double* w = &weights.value[o * in_dim];
      for (std::size_t i = 0; i < in_dim; ++i) {
        wg[i] += g * in(n, i);
        dx(n, i) += g * w[i];
      }
    }
  return dx;
}

Matrix DenseRelu::forward(const Matrix& in) {
  mask = Matrix(in.rows(), in.cols());
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.data().size(); ++i) {
    const double v = in.data()[i];
    mask.data()[i] = v > 0.0 ? 1.0 : 0.0;
    out.data()[i] = v > 0.0 ? v : 0.0;
  }
  return out;
}

Matrix DenseRelu::backward(const Matrix& dout) const {
  Matrix dx(dout.rows(), dout.cols());
  for (std::size_t i = 0; i < dout.data().size(); ++i)
    dx.data()[i] = dout.data()[i] * mask.data()[i];
  return dx;
}

Matrix Dropout::forward(const Matrix& in, bool training, Rng& rng) {
  if (!training || rate == 0.0) {
    mask = Matrix(in.rows(), in.cols(), 1.0);
    return in;
  }
  const double keep = 1.0 - rate;
  mask = Matrix(in.rows(), in.cols());
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.data().size(); ++i) {
    const double m = rng.real01() < keep ? 1.0 / keep : 0.0;
    mask.data()[i] = m;
    out.data()[i] = in.data()[i] * m;
  }
  return out;
}

Matrix Dropout::backward(const Matrix& dout) const {
  Matrix dx(dout.rows(), dout.cols());
  for (std::size_t i = 0; i < dout.data().size(); ++i)
    dx.data()[i] = dout.data()[i] * mask.data()[i];
  return dx;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    double hi = logits(n, 0);
    for (std::size_t c = 1; c < logits.cols(); ++c) hi = std::max(hi, logits(n, c));
    double z = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      probs(n, c) = std::exp(logits(n, c) - hi);
      z += probs(n, c);
    }
    for (std::size_t c = 0; c < logits.cols(); ++c) probs(n, c) /= z;
  }
  return probs;
}

double softmax_xent(const Matrix& logits, std::span<const int> labels, Matrix* dlogits) {
  if (logits.rows() != labels.size())
    throw std::invalid_argument("softmax_xent: row count != label count");
  const Matrix probs = softmax_rows(logits);
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  double loss = 0.0;
  if (dlogits) *dlogits = Matrix(logits.rows(), logits.cols());
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    const auto label = static_cast<std::size_t>(labels[n]);
    if (label >= logits.cols())
      throw std::out_of_range("softmax_xent: label out of range");
    loss -= std::log(std::max(probs(n, label), 1e-300)) * inv_n;
    if (dlogits)
      for (std::size_t c = 0; c < logits.cols(); ++c)
        (*dlogits)(n, c) = (probs(n, c) - (c == label ? 1.0 : 0.0)) * inv_n;
  }
  return loss;
}

double binary_ce_with_norm_penalty(std::span<const double> targets,
                                   std::span<const double> predicted,
                                   std::span<const std::vector<double>> weight_vectors,
                                   double gamma) {
  if (targets.size() != predicted.size() || targets.empty())
    throw std::invalid_argument("binary_ce_with_norm_penalty: bad sizes");
  double ce = 0.0;
  for (std::size_t m = 0; m < targets.size(); ++m) {
    const double yhat = std::clamp(predicted[m], 1e-12, 1.0 - 1e-12);
    ce -= targets[m] * std::log(yhat) + (1.0 - targets[m]) * std::log(1.0 - yhat);
  }
  ce /= static_cast<double>(targets.size());
  double penalty = 0.0;
  for (const auto& w : weight_vectors) penalty += std::sqrt(squared_norm(w));
  return ce + gamma * penalty;
}

// ---- adam -------------------------------------------------------------------

void adam_update(std::span<double> value, std::span<const double> grad,
                 std::span<double> m, std::span<double> v, std::size_t t,
                 const AdamConfig& cfg) {
  if (value.size() != grad.size() || value.size() != m.size() ||
      value.size() != v.size())
    throw std::invalid_argument("adam_update: shape mismatch");
  if (t < 1) throw std::invalid_argument("adam_update: step index must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < value.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    value[i] -= cfg.alpha * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void AdamState::init(std::span<Param* const> params) {
  m.clear();
  v.clear();
  for (const Param* p : params) {
    m.emplace_back(p->value.size(), 0.0);
    v.emplace_back(p->value.size(), 0.0);
  }
  t = 0;
}

void AdamState::step(std::span<Param* const> params, const AdamConfig& cfg) {
  if (params.size() != m.size()) throw std::logic_error("AdamState: not initialized");
  ++t;
  for (std::size_t i = 0; i < params.size(); ++i)
    adam_update(params[i]->value, params[i]->grad, m[i], v[i], t, cfg);
}

// ---- network ----------------------------------------------------------------

NetPlan plan_net(std::size_t h, std::size_t w, std::size_t c, std::size_t num_filters,
                 std::size_t filter_h, std::size_t filter_w, std::size_t fc_units,
                 std::size_t classes) {
  if (filter_h > h || filter_w > w)
    throw std::invalid_argument("plan_net: filter larger than image");
  if (classes < 2) throw std::invalid_argument("plan_net: need at least two classes");
  NetPlan p;
  p.in_h = h;
  p.in_w = w;
  p.in_c = c;
  p.num_filters = num_filters;
  p.filter_h = filter_h;
  p.filter_w = filter_w;
  p.conv_h = h - filter_h + 1;
  p.conv_w = w - filter_w + 1;
  p.pool_h = p.conv_h / 2;
  p.pool_w = p.conv_w / 2;
  if (p.pool_h == 0 || p.pool_w == 0)
    throw std::invalid_argument("plan_net: image too small for pooling");
  p.flatten_dim = p.pool_h * p.pool_w * num_filters;
  p.fc_units = fc_units;
  p.classes = classes;
  return p;
}

ConvNet::ConvNet(const NetPlan& plan, double dropout_rate, std::uint64_t init_seed)
    : plan_(plan) {
  Rng rng(init_seed);
  conv.init(plan.filter_h, plan.filter_w, plan.in_c, plan.num_filters, rng);
  bn.init(plan.num_filters);
  fc1.init(plan.flatten_dim, plan.fc_units, rng);
  fc1.weights.name = "fc1_weights";
  fc1.bias.name = "fc1_bias";
  fc2.init(plan.fc_units, plan.classes, rng);
  fc2.weights.name = "fc2_weights";
  fc2.bias.name = "fc2_bias";
  drop.rate = dropout_rate;
}

std::vector<Param*> ConvNet::params() {
  return {&conv.filters, &conv.bias, &bn.scale, &bn.shift,
          &fc1.weights,  &fc1.bias,  &fc2.weights, &fc2.bias};
}

void ConvNet::zero_grads() {
  for (Param* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

Block ConvNet::images_to_block(const std::vector<Image>& images,
                               std::span<const std::size_t> idx) const {
  Block block(idx.size(), plan_.in_h, plan_.in_w, plan_.in_c);
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const Image& img = images.at(idx[n]);
    if (img.height != plan_.in_h || img.width != plan_.in_w ||
        img.channels != plan_.in_c)
      throw std::invalid_argument("convnet: image dimensions do not match the net");
    std::copy(img.pixels.begin(), img.pixels.end(),
              block.data.begin() + static_cast<std::ptrdiff_t>(n * block.per_sample()));
  }
  return block;
}

Matrix ConvNet::forward(const std::vector<Image>& images,
                        std::span<const std::size_t> idx, bool training, Rng* drop_rng,
                        Matrix* features_out) {
  if (training && drop.rate > 0.0 && drop_rng == nullptr)
    throw std::logic_error("convnet: training forward needs a dropout rng");
  in_cache_ = images_to_block(images, idx);
  conv_out_ = conv.forward(in_cache_);
  check_finite(conv_out_.data, "conv");
  bn_out_ = bn.forward(conv_out_, training);
  check_finite(bn_out_.data, "batchnorm");
  relu_out_ = relu1.forward(bn_out_);
  const Block pooled = pool.forward(relu_out_);

  flat_ = Matrix(pooled.n, pooled.per_sample());
  std::copy(pooled.data.begin(), pooled.data.end(), flat_.data().begin());

  fc1_out_ = fc1.forward(flat_);
  check_finite(fc1_out_.data(), "fc1");
  relu2_out_ = relu2.forward(fc1_out_);
  if (features_out) *features_out = relu2_out_;
  Rng unused(0);
  drop_out_ = drop.forward(relu2_out_, training, drop_rng ? *drop_rng : unused);
  Matrix logits = fc2.forward(drop_out_);
  check_finite(logits.data(), "fc2");
  return logits;
}

double ConvNet::loss_and_gradients(const Matrix& logits, std::span<const int> labels,
                                   double gamma) {
  Matrix dlogits;
  double loss = softmax_xent(logits, labels, &dlogits);

  // L2 penalty on weight tensors only (not biases or batch-norm affine).
  for (Param* p : {&conv.filters, &fc1.weights, &fc2.weights}) {
    loss += gamma * squared_norm(p->value);
    for (std::size_t i = 0; i < p->value.size(); ++i)
      p->grad[i] += 2.0 * gamma * p->value[i];
  }

  Matrix d = fc2.backward(drop_out_, dlogits);
  d = drop.backward(d);
  d = relu2.backward(d);
  d = fc1.backward(flat_, d);

  Block dpool(flat_.rows(), plan_.pool_h, plan_.pool_w, plan_.num_filters);
  std::copy(d.data().begin(), d.data().end(), dpool.data.begin());
  Block db = pool.backward(dpool, relu_out_);
  db = relu1.backward(db);
  db = bn.backward(conv_out_, db);
  conv.backward(in_cache_, db);
  return loss;
}

double ConvNet::training_loss(const std::vector<Image>& images,
                              std::span<const std::size_t> idx,
                              std::span<const int> labels, double gamma,
                              std::uint64_t dropout_seed) {
  zero_grads();
  Rng drop_rng(dropout_seed);
  const Matrix logits = forward(images, idx, true, &drop_rng);
  return loss_and_gradients(logits, labels, gamma);
}

Matrix ConvNet::extract_features(const std::vector<Image>& images) {
  if (!trained_)
    throw std::logic_error("extract_features: model is not marked trained");
  Matrix features(images.size(), plan_.fc_units);
  std::vector<std::size_t> idx(images.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t count = std::min(chunk, images.size() - start);
    Matrix part;
    forward(images, {idx.data() + start, count}, false, nullptr, &part);
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t c = 0; c < plan_.fc_units; ++c)
        features(start + r, c) = part(r, c);
  }
  return features;
}

// ---- training ----------------------------------------------------------------

namespace {

std::size_t count_correct(const Matrix& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(n, c) > logits(n, best)) best = c;
    if (static_cast<int>(best) == labels[n]) ++correct;
  }
  return correct;
}

}  // namespace

std::vector<EpochStats> train(ConvNet& net, const std::vector<Image>& images,
                              std::span<const int> labels,
                              std::span<const std::size_t> train_idx,
                              std::span<const std::size_t> val_idx,
                              const TrainConfig& cfg,
                              std::vector<EpochStats>* history_out) {
  if (train_idx.empty() || val_idx.empty())
    throw std::invalid_argument("train: empty dataset split");
  if (images.size() != labels.size())
    throw std::invalid_argument("train: image and label counts differ");

  std::vector<EpochStats> local;
  std::vector<EpochStats>* history = history_out ? history_out : &local;
  history->clear();

  std::vector<Param*> params = net.params();
  AdamState adam;
  adam.init(params);
  Rng rng(cfg.seed);

  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  std::vector<int> batch_labels;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> batch{order.data() + start, count};
      batch_labels.resize(count);
      for (std::size_t i = 0; i < count; ++i)
        batch_labels[i] = labels[batch[i]];

      net.zero_grads();
      const Matrix logits = net.forward(images, batch, true, &rng);
      const double loss = net.loss_and_gradients(logits, batch_labels, cfg.gamma);
      if (!std::isfinite(loss))
        throw std::runtime_error("train: loss diverged at epoch " +
                                 std::to_string(epoch));
      loss_sum += loss * static_cast<double>(count);
      correct += count_correct(logits, batch_labels);
      adam.step(params, cfg.adam);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());

    // Validation pass in inference mode (running statistics, no dropout).
    double reg = 0.0;
    for (Param* p : {&net.conv.filters, &net.fc1.weights, &net.fc2.weights})
      reg += cfg.gamma * squared_norm(p->value);
    double val_loss_sum = 0.0;
    std::size_t val_correct = 0;
    for (std::size_t start = 0; start < val_idx.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, val_idx.size() - start);
      std::span<const std::size_t> batch{val_idx.data() + start, count};
      batch_labels.resize(count);
      for (std::size_t i = 0; i < count; ++i)
        batch_labels[i] = labels[batch[i]];
      const Matrix logits = net.forward(images, batch, false, nullptr);
      val_loss_sum += softmax_xent(logits, batch_labels, nullptr) *
                      static_cast<double>(count);
      val_correct += count_correct(logits, batch_labels);
    }
    stats.val_loss = val_loss_sum / static_cast<double>(val_idx.size()) + reg;
    stats.val_acc =
        static_cast<double>(val_correct) / static_cast<double>(val_idx.size());
    if (!std::isfinite(stats.val_loss))
      throw std::runtime_error("train: validation loss diverged at epoch " +
                               std::to_string(epoch));
    history->push_back(stats);
  }

  net.mark_trained();
  return *history;
}

void write_train_history_csv(std::span<const EpochStats> history, std::ostream& out) {
  out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  char buf[160];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g", e.epoch,
                  e.train_loss, e.train_acc, e.val_loss, e.val_acc);
    out << buf << '\n';
  }
}

// ---- checkpoint ---------------------------------------------------------------

namespace {

void write_param_block(std::ostream& out, const std::string& name,
                       const std::vector<double>& values) {
  out << "param " << name << ' ' << values.size() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
    out << buf << ((i + 1) % 8 == 0 || i + 1 == values.size() ? '\n' : ' ');
  }
}

std::vector<double> read_param_block(std::istream& in, const std::string& expected) {
  std::string tag, name;
  std::size_t count = 0;
  if (!(in >> tag >> name >> count) || tag != "param" || name != expected)
    throw std::runtime_error("cnn checkpoint: expected parameter block " + expected);
  std::vector<double> values(count);
  for (auto& v : values)
    if (!(in >> v))
      throw std::runtime_error("cnn checkpoint: truncated block " + expected);
  return values;
}

}  // namespace

void ConvNet::save(std::ostream& out) const {
  out << "cnn v1\n";
  out << "input " << plan_.in_h << ' ' << plan_.in_w << ' ' << plan_.in_c << '\n';
  out << "conv " << plan_.num_filters << ' ' << plan_.filter_h << ' ' << plan_.filter_w
      << '\n';
  out << "fc " << plan_.fc_units << '\n';
  out << "classes " << plan_.classes << '\n';
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", drop.rate);
  out << "dropout " << buf << '\n';
  out << "trained " << (trained_ ? 1 : 0) << '\n';
  write_param_block(out, "conv_filters", conv.filters.value);
  write_param_block(out, "conv_bias", conv.bias.value);
  write_param_block(out, "bn_scale", bn.scale.value);
  write_param_block(out, "bn_shift", bn.shift.value);
  write_param_block(out, "bn_running_mean", bn.running_mean);
  write_param_block(out, "bn_running_var", bn.running_var);
  write_param_block(out, "fc1_weights", fc1.weights.value);
  write_param_block(out, "fc1_bias", fc1.bias.value);
  write_param_block(out, "fc2_weights", fc2.weights.value);
  write_param_block(out, "fc2_bias", fc2.bias.value);
}

ConvNet ConvNet::load(std::istream& in) {
  std::string magic, version, key;
  if (!(in >> magic >> version) || magic != "cnn" || version != "v1")
    throw std::runtime_error("cnn checkpoint: bad header");
  std::size_t h = 0, w = 0, c = 0, filters = 0, fh = 0, fw = 0, fc_units = 0, k = 0;
  double dropout_rate = 0.0;
  int trained_flag = 0;
  if (!(in >> key >> h >> w >> c) || key != "input")
    throw std::runtime_error("cnn checkpoint: bad input line");
  if (!(in >> key >> filters >> fh >> fw) || key != "conv")
    throw std::runtime_error("cnn checkpoint: bad conv line");
  if (!(in >> key >> fc_units) || key != "fc")
    throw std::runtime_error("cnn checkpoint: bad fc line");
  if (!(in >> key >> k) || key != "classes")
    throw std::runtime_error("cnn checkpoint: bad classes line");
  if (!(in >> key >> dropout_rate) || key != "dropout")
    throw std::runtime_error("cnn checkpoint: bad dropout line");
  if (!(in >> key >> trained_flag) || key != "trained")
    throw std::runtime_error("cnn checkpoint: bad trained line");

  ConvNet net(plan_net(h, w, c, filters, fh, fw, fc_units, k), dropout_rate, 0);
  net.conv.filters.value = read_param_block(in, "conv_filters");
  net.conv.bias.value = read_param_block(in, "conv_bias");
  net.bn.scale.value = read_param_block(in, "bn_scale");
  net.bn.shift.value = read_param_block(in, "bn_shift");
  net.bn.running_mean = read_param_block(in, "bn_running_mean");
  net.bn.running_var = read_param_block(in, "bn_running_var");
  net.fc1.weights.value = read_param_block(in, "fc1_weights");
  net.fc1.bias.value = read_param_block(in, "fc1_bias");
  net.fc2.weights.value = read_param_block(in, "fc2_weights");
  net.fc2.bias.value = read_param_block(in, "fc2_bias");
  const std::size_t expected[] = {
      fh * fw * c * filters, filters, filters, filters, filters, filters,
      net.plan_.flatten_dim * fc_units, fc_units, fc_units * k, k};
  const std::vector<double>* blocks[] = {
      &net.conv.filters.value, &net.conv.bias.value, &net.bn.scale.value,
      &net.bn.shift.value,     &net.bn.running_mean, &net.bn.running_var,
      &net.fc1.weights.value,  &net.fc1.bias.value,  &net.fc2.weights.value,
      &net.fc2.bias.value};
  for (std::size_t i = 0; i < 10; ++i)
    if (blocks[i]->size() != expected[i])
      throw std::runtime_error("cnn checkpoint: parameter block size mismatch");
  if (trained_flag) net.mark_trained();
  return net;
}

}  // namespace bdefs::cnn
