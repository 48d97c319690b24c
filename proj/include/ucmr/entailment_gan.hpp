#pragma once

#include <algorithm>
#include <array>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ucmr/corpus.hpp"
#include "ucmr/encoder.hpp"
#include "ucmr/error.hpp"
#include "ucmr/nn.hpp"

namespace ucmr::gan {

using nn::Mat;
using nn::ParamSet;
using nn::Tensor;
using nn::Vec;

/// Values in [0, 1], one per universe rule.
using RuleIndicator = Vec;
using IndexSet = std::set<int>;

// ===========================================================================
// Generator: convolution over token windows, max-pool over windows, ReLU,
// linear map to |U| logits, sigmoid.

struct GeneratorShape {
  int token_dim = 768;
  int universe = 2;
  int filters = 30;
  int window = 3;
};

class Generator {
 public:
  enum : std::size_t { kConvW = 0, kConvB, kFcW, kFcB };

  Generator() = default;
  explicit Generator(GeneratorShape s) : shape_(s) {
    if (s.token_dim <= 0 || s.universe <= 0 || s.filters <= 0 || s.window <= 0) {
      throw Error(ErrorCode::ShapeMismatch, "generator dimensions must be positive");
    }
    params_.tensors = {Tensor("gen.conv.weight", {s.filters, s.window * s.token_dim}),
                       Tensor("gen.conv.bias", {s.filters}), Tensor("gen.fc.weight", {s.universe, s.filters}),
                       Tensor("gen.fc.bias", {s.universe})};
  }

  void init(std::mt19937_64& rng) {
    const double conv_bound = 1.0 / std::sqrt(static_cast<double>(shape_.window * shape_.token_dim));
    const double fc_bound = 1.0 / std::sqrt(static_cast<double>(shape_.filters));
    nn::init_uniform(params_[kConvW], conv_bound, rng);
    nn::init_uniform(params_[kConvB], conv_bound, rng);
    nn::init_uniform(params_[kFcW], fc_bound, rng);
    nn::init_uniform(params_[kFcB], fc_bound, rng);
  }

  const GeneratorShape& shape() const { return shape_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  struct Cache {
    Mat windows;                // (n_windows, window * d), one unfolded window per row
    Vec pooled;                 // (filters)
    std::vector<int> argmax;    // winning window per filter
    Vec hidden;                 // relu(pooled)
    Vec logits;                 // (universe)
    Vec probs;                  // sigmoid(logits)
  };

  Cache forward_cached(const TokenMatrix& tokens) const {
    const int d = shape_.token_dim, k = shape_.window;
    if (tokens.cols() != d) {
      throw Error(ErrorCode::ShapeMismatch,
                  "token dimension " + std::to_string(tokens.cols()) + " != generator dimension " + std::to_string(d));
    }
    if (tokens.rows() < 1) throw Error(ErrorCode::ShapeMismatch, "generator needs at least one token");
    const Eigen::Index n = std::max<Eigen::Index>(tokens.rows(), k);
    const Eigen::Index nw = n - k + 1;
    Cache c;
    c.windows = Mat::Zero(nw, static_cast<Eigen::Index>(k) * d);
    for (Eigen::Index i = 0; i < nw; ++i) {
      for (int r = 0; r < k; ++r) {
        if (i + r < tokens.rows()) c.windows.block(i, static_cast<Eigen::Index>(r) * d, 1, d) = tokens.row(i + r);
      }
    }
    Mat conv = c.windows * params_[kConvW].mat().transpose();  // (nw, filters)
    conv.rowwise() += params_[kConvB].data.transpose();
    c.pooled.resize(shape_.filters);
    c.argmax.resize(static_cast<std::size_t>(shape_.filters));
    for (int j = 0; j < shape_.filters; ++j) {
      Eigen::Index best = 0;
      c.pooled[j] = conv.col(j).maxCoeff(&best);
      c.argmax[static_cast<std::size_t>(j)] = static_cast<int>(best);
    }
    c.hidden = c.pooled.cwiseMax(0.0);
    c.logits = params_[kFcW].mat() * c.hidden + params_[kFcB].data;
    c.probs = c.logits.unaryExpr([](double x) { return nn::sigmoid(x); });
    return c;
  }

  RuleIndicator forward(const TokenMatrix& tokens) const { return forward_cached(tokens).probs; }

  /// Accumulates parameter gradients given dL/dlogits.
  void backward(const Cache& c, const Vec& dlogits, ParamSet& grads) const {
    grads[kFcW].mat() += dlogits * c.hidden.transpose();
    grads[kFcB].data += dlogits;
    Vec dhidden = params_[kFcW].mat().transpose() * dlogits;
    for (int j = 0; j < shape_.filters; ++j) {
      if (c.pooled[j] <= 0.0) continue;
      double g = dhidden[j];
      grads[kConvW].mat().row(j) += g * c.windows.row(c.argmax[static_cast<std::size_t>(j)]);
      grads[kConvB].data[j] += g;
    }
  }

 private:
  GeneratorShape shape_;
  ParamSet params_;
};

inline RuleIndicator generator_forward(const TokenMatrix& tokens, const Generator& g) { return g.forward(tokens); }

// ===========================================================================
// Discriminator: conv, conv, maxpool, conv, conv, maxpool, dropout, linear.
// Convolutions use "same" padding and leaky ReLU; pooling is width 2,
// stride 2. Inputs are zero-padded to a multiple of 4 and at least 8.

struct DiscriminatorShape {
  int universe = 8;
  int channels = 30;
  int width = 5;
  double dropout = 0.1;
  double leak = 0.2;

  int padded() const { return std::max(8, (universe + 3) / 4 * 4); }
};

class Discriminator {
 public:
  enum : std::size_t { kC1W = 0, kC1B, kC2W, kC2B, kC3W, kC3B, kC4W, kC4B, kFcW, kFcB };

  Discriminator() = default;
  explicit Discriminator(DiscriminatorShape s) : shape_(s) {
    if (s.universe <= 0 || s.channels <= 0 || s.width <= 0 || s.width % 2 == 0) {
      throw Error(ErrorCode::ShapeMismatch, "discriminator needs positive sizes and an odd filter width");
    }
    const int c = s.channels, w = s.width;
    params_.tensors = {Tensor("disc.conv1.weight", {c, 1 * w}), Tensor("disc.conv1.bias", {c}),
                       Tensor("disc.conv2.weight", {c, c * w}), Tensor("disc.conv2.bias", {c}),
                       Tensor("disc.conv3.weight", {c, c * w}), Tensor("disc.conv3.bias", {c}),
                       Tensor("disc.conv4.weight", {c, c * w}), Tensor("disc.conv4.bias", {c}),
                       Tensor("disc.fc.weight", {1, c * (s.padded() / 4)}), Tensor("disc.fc.bias", {1})};
  }

  void init(std::mt19937_64& rng) {
    const double w = shape_.width;
    nn::init_uniform(params_[kC1W], 1.0 / std::sqrt(w), rng);
    nn::init_uniform(params_[kC1B], 1.0 / std::sqrt(w), rng);
    for (std::size_t i : {kC2W, kC2B, kC3W, kC3B, kC4W, kC4B}) {
      nn::init_uniform(params_[i], 1.0 / std::sqrt(w * shape_.channels), rng);
    }
    const double fc = 1.0 / std::sqrt(static_cast<double>(params_[kFcW].cols()));
    nn::init_uniform(params_[kFcW], fc, rng);
    nn::init_uniform(params_[kFcB], fc, rng);
  }

  const DiscriminatorShape& shape() const { return shape_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// Activation pattern of one forward pass. Inputs of every linear layer
  /// are kept so the same routine backpropagates both the primal network
  /// and its tangent (bias-free) copy.
  struct Cache {
    std::array<Mat, 5> layer_inputs;    // conv1..conv4 inputs and the fc input (flattened, dropout applied)
    std::array<Mat, 4> slopes;          // leaky ReLU derivative per conv output
    std::array<std::vector<int>, 2> pool_argmax;
    Mat dropout_scale;                  // multiplier per pooled unit (0 or 1/(1-p) in training, 1 in eval)
    double logit = 0.0;
  };

  Mat pad_input(const Vec& x) const {
    if (x.size() != shape_.universe) {
      throw Error(ErrorCode::ShapeMismatch,
                  "indicator length " + std::to_string(x.size()) + " != universe " + std::to_string(shape_.universe));
    }
    Mat a = Mat::Zero(1, shape_.padded());
    a.leftCols(shape_.universe) = x.transpose();
    return a;
  }

  /// `rng` is required when train_mode is set (dropout masks).
  Cache forward_cached(const Vec& x, bool train_mode, std::mt19937_64* rng = nullptr) const {
    Cache c;
    Mat a = pad_input(x);
    const std::array<std::size_t, 4> convs = {kC1W, kC2W, kC3W, kC4W};
    for (int l = 0; l < 4; ++l) {
      c.layer_inputs[static_cast<std::size_t>(l)] = a;
      Mat pre = conv(a, params_[convs[static_cast<std::size_t>(l)]]);
      pre.colwise() += params_[convs[static_cast<std::size_t>(l)] + 1].data;
      Mat slope = pre.unaryExpr([&](double v) { return v > 0.0 ? 1.0 : shape_.leak; });
      a = pre.cwiseProduct(slope);
      c.slopes[static_cast<std::size_t>(l)] = std::move(slope);
      if (l == 1 || l == 3) a = maxpool(a, c.pool_argmax[static_cast<std::size_t>(l / 2)]);
    }
    c.dropout_scale = Mat::Ones(a.rows(), a.cols());
    if (train_mode && shape_.dropout > 0.0) {
      if (!rng) throw Error(ErrorCode::InvalidState, "train mode needs an RNG for dropout");
      std::bernoulli_distribution keep(1.0 - shape_.dropout);
      for (Eigen::Index i = 0; i < a.size(); ++i) c.dropout_scale.data()[i] = keep(*rng) ? 1.0 / (1.0 - shape_.dropout) : 0.0;
    }
    a = a.cwiseProduct(c.dropout_scale);
    c.layer_inputs[4] = flatten(a);
    c.logit = (params_[kFcW].mat() * c.layer_inputs[4].transpose())(0, 0) + params_[kFcB].data[0];
    return c;
  }

  double forward(const Vec& x, bool train_mode = false, std::mt19937_64* rng = nullptr) const {
    return forward_cached(x, train_mode, rng).logit;
  }

  /// Bias-free network with the activation pattern of `c`, applied to a
  /// tangent input. Returns a cache whose layer_inputs hold the tangent
  /// activations and whose logit is the directional derivative.
  Cache tangent(const Cache& c, const Vec& direction) const {
    Cache t = c;
    Mat a = pad_input(direction);
    const std::array<std::size_t, 4> convs = {kC1W, kC2W, kC3W, kC4W};
    for (int l = 0; l < 4; ++l) {
      t.layer_inputs[static_cast<std::size_t>(l)] = a;
      a = conv(a, params_[convs[static_cast<std::size_t>(l)]]).cwiseProduct(c.slopes[static_cast<std::size_t>(l)]);
      if (l == 1 || l == 3) a = gather_pool(a, c.pool_argmax[static_cast<std::size_t>(l / 2)]);
    }
    a = a.cwiseProduct(c.dropout_scale);
    t.layer_inputs[4] = flatten(a);
    t.logit = (params_[kFcW].mat() * t.layer_inputs[4].transpose())(0, 0);
    return t;
  }

  /// Backpropagates `seed` (dL/dlogit) through the layers recorded in `c`.
  /// Adds weight gradients (and bias gradients when `with_bias`) to `grads`
  /// if non-null; returns dL/dinput over the real (unpadded) entries.
  Vec backward(const Cache& c, double seed, ParamSet* grads, bool with_bias = true) const {
    const int ch = shape_.channels;
    const int len4 = shape_.padded() / 4;
    if (grads) {
      grads->tensors[kFcW].mat() += seed * c.layer_inputs[4];
      if (with_bias) grads->tensors[kFcB].data[0] += seed;
    }
    Mat flat = seed * params_[kFcW].mat();  // (1, ch * len4)
    Mat d = unflatten(flat, ch, len4).cwiseProduct(c.dropout_scale);
    const std::array<std::size_t, 4> convs = {kC1W, kC2W, kC3W, kC4W};
    for (int l = 3; l >= 0; --l) {
      if (l == 1 || l == 3) d = unpool(d, c.pool_argmax[static_cast<std::size_t>(l / 2)], static_cast<int>(d.cols()) * 2);
      d = d.cwiseProduct(c.slopes[static_cast<std::size_t>(l)]);
      const Tensor& w = params_[convs[static_cast<std::size_t>(l)]];
      const Mat& in = c.layer_inputs[static_cast<std::size_t>(l)];
      if (grads) {
        conv_weight_grad(in, d, grads->tensors[convs[static_cast<std::size_t>(l)]]);
        if (with_bias) grads->tensors[convs[static_cast<std::size_t>(l)] + 1].data += d.rowwise().sum();
      }
      d = conv_input_grad(d, w, static_cast<int>(in.rows()));
    }
    return d.row(0).leftCols(shape_.universe).transpose();
  }

  Vec input_gradient(const Vec& x) const { return backward(forward_cached(x, false), 1.0, nullptr); }

 private:
  /// im2col: (in_ch * width, len) with zero padding.
  Mat unfold(const Mat& in) const {
    const int w = shape_.width, half = w / 2;
    const auto ch = in.rows(), len = in.cols();
    Mat cols = Mat::Zero(ch * w, len);
    for (Eigen::Index c = 0; c < ch; ++c) {
      for (int k = 0; k < w; ++k) {
        const Eigen::Index off = k - half;
        for (Eigen::Index t = 0; t < len; ++t) {
          const Eigen::Index s = t + off;
          if (s >= 0 && s < len) cols(c * w + k, t) = in(c, s);
        }
      }
    }
    return cols;
  }

  Mat conv(const Mat& in, const Tensor& w) const { return w.mat() * unfold(in); }

  void conv_weight_grad(const Mat& in, const Mat& dout, Tensor& gw) const {
    gw.mat() += dout * unfold(in).transpose();
  }

  Mat conv_input_grad(const Mat& dout, const Tensor& w, int in_ch) const {
    const int wd = shape_.width, half = wd / 2;
    const auto len = dout.cols();
    Mat dcols = w.mat().transpose() * dout;  // (in_ch * width, len)
    Mat din = Mat::Zero(in_ch, len);
    for (int c = 0; c < in_ch; ++c) {
      for (int k = 0; k < wd; ++k) {
        const Eigen::Index off = k - half;
        for (Eigen::Index t = 0; t < len; ++t) {
          const Eigen::Index s = t + off;
          if (s >= 0 && s < len) din(c, s) += dcols(c * wd + k, t);
        }
      }
    }
    return din;
  }

  static Mat maxpool(const Mat& in, std::vector<int>& argmax) {
    const auto ch = in.rows(), out_len = in.cols() / 2;
    Mat out(ch, out_len);
    argmax.assign(static_cast<std::size_t>(ch * out_len), 0);
    for (Eigen::Index c = 0; c < ch; ++c) {
      for (Eigen::Index t = 0; t < out_len; ++t) {
        const bool second = in(c, 2 * t + 1) > in(c, 2 * t);
        out(c, t) = second ? in(c, 2 * t + 1) : in(c, 2 * t);
        argmax[static_cast<std::size_t>(c * out_len + t)] = static_cast<int>(2 * t + (second ? 1 : 0));
      }
    }
    return out;
  }

  static Mat gather_pool(const Mat& in, const std::vector<int>& argmax) {
    const auto ch = in.rows(), out_len = in.cols() / 2;
    Mat out(ch, out_len);
    for (Eigen::Index c = 0; c < ch; ++c) {
      for (Eigen::Index t = 0; t < out_len; ++t) out(c, t) = in(c, argmax[static_cast<std::size_t>(c * out_len + t)]);
    }
    return out;
  }

  static Mat unpool(const Mat& d, const std::vector<int>& argmax, int in_len) {
    const auto ch = d.rows(), out_len = d.cols();
    Mat out = Mat::Zero(ch, in_len);
    for (Eigen::Index c = 0; c < ch; ++c) {
      for (Eigen::Index t = 0; t < out_len; ++t) out(c, argmax[static_cast<std::size_t>(c * out_len + t)]) += d(c, t);
    }
    return out;
  }

  static Mat flatten(const Mat& a) {
    Mat f(1, a.size());
    for (Eigen::Index c = 0; c < a.rows(); ++c) f.block(0, c * a.cols(), 1, a.cols()) = a.row(c);
    return f;
  }

  static Mat unflatten(const Mat& f, int ch, int len) {
    Mat a(ch, len);
    for (int c = 0; c < ch; ++c) a.row(c) = f.block(0, static_cast<Eigen::Index>(c) * len, 1, len);
    return a;
  }

  DiscriminatorShape shape_;
  ParamSet params_;
};

inline double discriminator_forward(const RuleIndicator& x, const Discriminator& d, bool train_mode,
                                    std::mt19937_64* rng = nullptr) {
  return d.forward(x, train_mode, rng);
}

// ===========================================================================
// Penalties

/// Interpolates between real and fake with weight `eps` on real and returns
/// (||grad D(x_hat)|| - 1)^2. `input_grad` maps an input to dD/dinput.
template <class InputGrad>
  requires std::invocable<InputGrad, const Vec&>
double gradient_penalty(InputGrad&& input_grad, const Vec& real, const Vec& fake, double eps) {
  if (real.size() != fake.size()) throw Error(ErrorCode::ShapeMismatch, "real and fake lengths differ");
  Vec x_hat = eps * real + (1.0 - eps) * fake;
  Vec g = input_grad(x_hat);
  double n = g.norm();
  return (n - 1.0) * (n - 1.0);
}

inline double gradient_penalty(const Discriminator& d, const Vec& real, const Vec& fake, double eps) {
  return gradient_penalty([&](const Vec& x) { return d.input_gradient(x); }, real, fake, eps);
}

/// Gradient penalty at x_hat plus its gradient with respect to the
/// discriminator weights (accumulated into `grads`, scaled by `scale`).
/// Because the network is piecewise linear, d/dtheta of v.grad D equals the
/// weight gradient of the bias-free tangent network driven by v.
inline double gradient_penalty_with_grad(const Discriminator& d, const Vec& x_hat, bool train_mode,
                                         std::mt19937_64* rng, double scale, ParamSet& grads) {
  auto cache = d.forward_cached(x_hat, train_mode, rng);
  Vec g = d.backward(cache, 1.0, nullptr);
  const double n = g.norm();
  const double penalty = (n - 1.0) * (n - 1.0);
  if (n > 0.0) {
    Vec v = (2.0 * (n - 1.0) / n) * g;
    auto tan = d.tangent(cache, v);
    d.backward(tan, scale, &grads, /*with_bias=*/false);
  }
  return penalty;
}

/// Mean squared L2 distance between consecutive outputs; 0 for one output.
inline double smoothness_penalty(const std::vector<RuleIndicator>& outputs) {
  if (outputs.empty()) throw Error(ErrorCode::Validation, "smoothness penalty needs at least one output");
  if (outputs.size() == 1) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < outputs.size(); ++i) s += (outputs[i] - outputs[i + 1]).squaredNorm();
  return s / static_cast<double>(outputs.size() - 1);
}

inline std::vector<Vec> smoothness_penalty_grad(const std::vector<RuleIndicator>& outputs) {
  std::vector<Vec> g(outputs.size());
  for (auto& x : g) x = Vec::Zero(outputs.front().size());
  if (outputs.size() < 2) return g;
  const double scale = 2.0 / static_cast<double>(outputs.size() - 1);
  for (std::size_t i = 0; i + 1 < outputs.size(); ++i) {
    Vec diff = scale * (outputs[i] - outputs[i + 1]);
    g[i] += diff;
    g[i + 1] -= diff;
  }
  return g;
}

// ===========================================================================
// Training

struct TrainConfig {
  double beta1 = 0.5;
  double beta2 = 0.98;
  double lr_generator = 1e-4;
  double lr_discriminator = 1e-5;
  double weight_decay_discriminator = 1e-4;
  int total_steps = 2000;
  double gp_coeff = 10.0;
  double smooth_coeff = 1.0;
  /// Weight of the per-span cross-entropy between G(span) and the span's
  /// extracted rule set. 0 gives the purely adversarial objective.
  double pair_coeff = 1.0;
  bool non_saturating = false;
  int batch_size = 8;
  int filters = 30;
  int window = 3;
  int disc_channels = 30;
  int disc_width = 5;
  double dropout = 0.1;
  double threshold = 0.5;
  int checkpoint_every = 500;
  std::uint64_t seed = 7;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"beta1", c.beta1},
          {"beta2", c.beta2},
          {"lr_generator", c.lr_generator},
          {"lr_discriminator", c.lr_discriminator},
          {"weight_decay_discriminator", c.weight_decay_discriminator},
          {"total_steps", c.total_steps},
          {"gp_coeff", c.gp_coeff},
          {"smooth_coeff", c.smooth_coeff},
          {"pair_coeff", c.pair_coeff},
          {"non_saturating", c.non_saturating},
          {"batch_size", c.batch_size},
          {"filters", c.filters},
          {"window", c.window},
          {"disc_channels", c.disc_channels},
          {"disc_width", c.disc_width},
          {"dropout", c.dropout},
          {"threshold", c.threshold},
          {"checkpoint_every", c.checkpoint_every},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.lr_generator = j.value("lr_generator", c.lr_generator);
  c.lr_discriminator = j.value("lr_discriminator", c.lr_discriminator);
  c.weight_decay_discriminator = j.value("weight_decay_discriminator", c.weight_decay_discriminator);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.gp_coeff = j.value("gp_coeff", c.gp_coeff);
  c.smooth_coeff = j.value("smooth_coeff", c.smooth_coeff);
  c.pair_coeff = j.value("pair_coeff", c.pair_coeff);
  c.non_saturating = j.value("non_saturating", c.non_saturating);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.filters = j.value("filters", c.filters);
  c.window = j.value("window", c.window);
  c.disc_channels = j.value("disc_channels", c.disc_channels);
  c.disc_width = j.value("disc_width", c.disc_width);
  c.dropout = j.value("dropout", c.dropout);
  c.threshold = j.value("threshold", c.threshold);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline void validate(const TrainConfig& c) {
  if (!(c.lr_generator > 0) || !(c.lr_discriminator > 0)) throw Error(ErrorCode::Validation, "learning rates must be positive");
  if (c.total_steps < 0 || c.total_steps % 2 != 0) throw Error(ErrorCode::Validation, "total_steps must be even and non-negative");
  if (c.batch_size < 1) throw Error(ErrorCode::Validation, "batch_size must be positive");
}

/// One training span: its token rows and the multi-hot rule set it came from.
struct Example {
  TokenMatrix tokens;
  Vec target;
};

struct LossReport {
  int step = 0;
  bool discriminator_step = true;
  double d_adversarial = 0.0;   // -E[log D(real)] - E[log(1 - D(G(s)))]
  double gradient_penalty = 0.0;
  double g_adversarial = 0.0;   // E[log(1 - D(G(s)))] or -E[log D(G(s))]
  double smoothness = 0.0;
  double pair = 0.0;            // mean per-span cross-entropy against the extracted rule set
};

/// Generator, discriminator, both optimizers and the RNG that drives
/// batching, interpolation and dropout.
struct GanState {
  TrainConfig config;
  Generator generator;
  Discriminator discriminator;
  nn::Adam adam_g, adam_d;
  std::mt19937_64 rng;
  int step = 0;

  GanState() = default;
  GanState(const TrainConfig& cfg, int token_dim, int universe)
      : config(cfg),
        generator(GeneratorShape{token_dim, universe, cfg.filters, cfg.window}),
        discriminator(DiscriminatorShape{universe, cfg.disc_channels, cfg.disc_width, cfg.dropout}),
        rng(cfg.seed) {
    validate(cfg);
    generator.init(rng);
    discriminator.init(rng);
    adam_g = nn::Adam(generator.params(), {cfg.lr_generator, cfg.beta1, cfg.beta2, 1e-8, 0.0});
    adam_d = nn::Adam(discriminator.params(),
                      {cfg.lr_discriminator, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay_discriminator});
  }
};

namespace detail {
inline void check_finite(const LossReport& r) {
  for (double v : {r.d_adversarial, r.gradient_penalty, r.g_adversarial, r.smoothness, r.pair}) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::NonFiniteLoss,
                  "step " + std::to_string(r.step) + (r.discriminator_step ? " (D)" : " (G)") +
                      ": d_adv=" + std::to_string(r.d_adversarial) + " gp=" + std::to_string(r.gradient_penalty) +
                      " g_adv=" + std::to_string(r.g_adversarial) + " smooth=" + std::to_string(r.smoothness) +
                      " pair=" + std::to_string(r.pair));
    }
  }
}

inline double bce(const Vec& p, const Vec& target) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-12, 1.0 - 1e-12);
    s -= target[i] * std::log(q) + (1.0 - target[i]) * std::log(1.0 - q);
  }
  return s;
}
}  // namespace detail

/// Losses and gradients of one discriminator step for a batch (no update).
inline LossReport discriminator_loss(const GanState& s, const std::vector<const Example*>& batch,
                                     std::mt19937_64& rng, ParamSet& grads) {
  LossReport r;
  r.discriminator_step = true;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (const Example* ex : batch) {
    Vec fake = s.generator.forward(ex->tokens);
    auto real_c = s.discriminator.forward_cached(ex->target, true, &rng);
    auto fake_c = s.discriminator.forward_cached(fake, true, &rng);
    r.d_adversarial += inv_b * (-nn::log_sigmoid(real_c.logit) - nn::log_sigmoid(-fake_c.logit));
    s.discriminator.backward(real_c, -inv_b * (1.0 - nn::sigmoid(real_c.logit)), &grads);
    s.discriminator.backward(fake_c, inv_b * nn::sigmoid(fake_c.logit), &grads);
    const double eps = unif(rng);
    Vec x_hat = eps * ex->target + (1.0 - eps) * fake;
    r.gradient_penalty +=
        inv_b * gradient_penalty_with_grad(s.discriminator, x_hat, true, &rng, s.config.gp_coeff * inv_b, grads);
  }
  return r;
}

/// Losses and gradients of one generator step for a batch (no update).
/// Batch members are consecutive spans, so smoothness compares neighbours.
inline LossReport generator_loss(const GanState& s, const std::vector<const Example*>& batch, ParamSet& grads) {
  LossReport r;
  r.discriminator_step = false;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<Generator::Cache> caches;
  std::vector<Vec> outputs;
  for (const Example* ex : batch) {
    caches.push_back(s.generator.forward_cached(ex->tokens));
    outputs.push_back(caches.back().probs);
  }
  r.smoothness = smoothness_penalty(outputs);
  auto smooth_grad = smoothness_penalty_grad(outputs);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Vec& p = outputs[i];
    auto dc = s.discriminator.forward_cached(p, false);
    double dlogit;
    if (s.config.non_saturating) {
      r.g_adversarial += -inv_b * nn::log_sigmoid(dc.logit);
      dlogit = -inv_b * (1.0 - nn::sigmoid(dc.logit));
    } else {
      r.g_adversarial += inv_b * nn::log_sigmoid(-dc.logit);
      dlogit = -inv_b * nn::sigmoid(dc.logit);
    }
    Vec dp = s.discriminator.backward(dc, dlogit, nullptr) + s.config.smooth_coeff * smooth_grad[i];
    Vec dlogits = dp.cwiseProduct(p.cwiseProduct((1.0 - p.array()).matrix()));
    if (s.config.pair_coeff != 0.0) {
      r.pair += inv_b * detail::bce(p, batch[i]->target);
      dlogits += s.config.pair_coeff * inv_b * (p - batch[i]->target);
    }
    s.generator.backward(caches[i], dlogits, grads);
  }
  return r;
}

/// Even steps update D, odd steps update G; the other network is untouched.
inline LossReport gan_step(GanState& s, const std::vector<const Example*>& batch) {
  if (batch.empty()) throw Error(ErrorCode::Validation, "empty batch");
  LossReport r;
  if (s.step % 2 == 0) {
    ParamSet grads = s.discriminator.params().zeros_like();
    r = discriminator_loss(s, batch, s.rng, grads);
    r.step = s.step;
    detail::check_finite(r);
    s.adam_d.step(s.discriminator.params(), grads);
  } else {
    ParamSet grads = s.generator.params().zeros_like();
    r = generator_loss(s, batch, grads);
    r.step = s.step;
    detail::check_finite(r);
    s.adam_g.step(s.generator.params(), grads);
  }
  ++s.step;
  return r;
}

/// Contiguous window of `batch_size` examples at a random offset.
inline std::vector<const Example*> sample_batch(const std::vector<Example>& data, int batch_size, std::mt19937_64& rng) {
  const int n = static_cast<int>(data.size());
  const int b = std::min(batch_size, n);
  std::uniform_int_distribution<int> start(0, n - b);
  const int s0 = start(rng);
  std::vector<const Example*> batch;
  for (int i = 0; i < b; ++i) batch.push_back(&data[static_cast<std::size_t>(s0 + i)]);
  return batch;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const GanState& s) {
  return {{"format", "ucmr-checkpoint"},
          {"version", kCheckpointVersion},
          {"kind", "gan"},
          {"config", to_json(s.config)},
          {"token_dim", s.generator.shape().token_dim},
          {"universe", s.generator.shape().universe},
          {"step", s.step},
          {"seed", s.config.seed},
          {"rng", nn::rng_state(s.rng)},
          {"generator", s.generator.params().to_json()},
          {"discriminator", s.discriminator.params().to_json()},
          {"adam_generator", s.adam_g.to_json()},
          {"adam_discriminator", s.adam_d.to_json()}};
}

inline GanState gan_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", "") != "ucmr-checkpoint" || j.value("kind", "") != "gan") {
    throw Error(ErrorCode::Validation, "not a GAN checkpoint");
  }
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw Error(ErrorCode::Validation, "unsupported checkpoint version");
  }
  GanState s(train_config_from_json(j.at("config")), j.at("token_dim").get<int>(), j.at("universe").get<int>());
  s.generator.params().load_json(j.at("generator"));
  s.discriminator.params().load_json(j.at("discriminator"));
  s.adam_g.load_json(j.at("adam_generator"));
  s.adam_d.load_json(j.at("adam_discriminator"));
  nn::set_rng_state(s.rng, j.at("rng").get<std::string>());
  s.step = j.at("step").get<int>();
  return s;
}

inline void save_checkpoint(const GanState& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Validation, "cannot write " + path.string());
  out << checkpoint_json(s).dump() << '\n';
}

inline GanState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Validation, "cannot open checkpoint " + path.string());
  return gan_from_checkpoint(nlohmann::json::parse(in));
}

/// Runs alternating steps until config.total_steps. Resuming a loaded
/// state continues from its step counter. Writes step_NNNNNN.json every
/// checkpoint_every steps when `checkpoint_dir` is set.
inline void train(GanState& s, const std::vector<Example>& data,
                  const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                  const std::function<void(const LossReport&)>& on_step = {}) {
  if (data.empty()) throw Error(ErrorCode::Validation, "no training spans");
  if (s.generator.shape().universe < 2) throw Error(ErrorCode::Validation, "universe must hold at least two rules");
  while (s.step < s.config.total_steps) {
    auto batch = sample_batch(data, s.config.batch_size, s.rng);
    auto report = gan_step(s, batch);
    if (on_step) on_step(report);
    if (checkpoint_dir && s.config.checkpoint_every > 0 && s.step % s.config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06d.json", s.step);
      save_checkpoint(s, *checkpoint_dir / name);
    }
  }
}

inline GanState train(const std::vector<Example>& data, int universe, const TrainConfig& cfg,
                      const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt) {
  if (data.empty()) throw Error(ErrorCode::Validation, "no training spans");
  GanState s(cfg, static_cast<int>(data.front().tokens.cols()), universe);
  train(s, data, checkpoint_dir);
  return s;
}

// ---------------------------------------------------------------------------
// Inference

inline IndexSet threshold_indices(const RuleIndicator& probs, double threshold = 0.5) {
  IndexSet out;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] >= threshold) out.insert(static_cast<int>(i));
  }
  return out;
}

/// Token rows of the history sentences concatenated in dialog order.
inline IndexSet predict_rules(const std::vector<corpus::Sentence>& history, const encoder::Encoder& enc,
                              const Generator& gen, double threshold = 0.5) {
  if (history.empty()) throw Error(ErrorCode::Validation, "history is empty");
  std::vector<std::string> texts;
  for (const auto& s : history) texts.push_back(s.text);
  TokenMatrix tokens = encoder::encode_token_sequence(enc, texts);
  if (tokens.rows() == 0) throw Error(ErrorCode::Validation, "history has no tokens");
  return threshold_indices(gen.forward(tokens), threshold);
}

inline Vec multi_hot(const std::vector<int>& indices, int universe) {
  Vec v = Vec::Zero(universe);
  for (int i : indices) v[i] = 1.0;
  return v;
}

inline double jaccard(const IndexSet& a, const IndexSet& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  for (int x : a) inter += b.count(x);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

}  // namespace ucmr::gan
