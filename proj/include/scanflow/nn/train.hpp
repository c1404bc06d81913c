#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "scanflow/nn/model.hpp"

namespace scanflow::nn {

enum class OptimizerKind { kSgd, kAdam };

/// `batch_size` is the number of samples per update.
struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.1;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
};

inline void validate(const TrainConfig& cfg, bool allow_zero_epochs = false) {
  if (cfg.epochs == 0 && !allow_zero_epochs) throw InvalidConfig("epochs must be >= 1");
  if (!(cfg.lr > 0.0)) throw InvalidConfig("learning rate must be positive");
  if (cfg.batch_size == 0) throw InvalidConfig("batch size must be >= 1");
}

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

using Model = Sequential<float>;
using AutoencoderModel = Sequential<float>;
using ClassifierModel = Sequential<float>;

/// Plain SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8). Adam keeps its
/// moment estimates per parameter tensor, so one instance serves one model.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(static_cast<float>(lr)) {}

  void step(Model& m) {
    if (kind_ == OptimizerKind::kSgd) {
      sgd_step(m, lr_);
      return;
    }
    auto ps = m.params();
    if (moments_.empty())
      for (auto p : ps) moments_.push_back({std::vector<float>(p.value->size()), std::vector<float>(p.value->size())});
    ++t_;
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
    const float a = static_cast<float>(lr_ * std::sqrt(c2) / c1);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& [mv, vv] = moments_[i];
      auto& w = ps[i].value->vec();
      const auto& g = ps[i].grad->vec();
      for (std::size_t k = 0; k < w.size(); ++k) {
        mv[k] = 0.9f * mv[k] + 0.1f * g[k];
        vv[k] = 0.999f * vv[k] + 0.001f * g[k] * g[k];
        w[k] -= a * mv[k] / (std::sqrt(vv[k]) + 1e-8f);
      }
    }
  }

 private:
  OptimizerKind kind_;
  float lr_;
  std::size_t t_ = 0;
  std::vector<std::pair<std::vector<float>, std::vector<float>>> moments_;
};

namespace detail {

inline std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

inline void check_finite(double loss) {
  if (!std::isfinite(loss)) throw TrainingDiverged("loss became " + std::to_string(loss));
}

inline bool all_finite(const Tensor<float>& t) {
  return std::all_of(t.vec().begin(), t.vec().end(), [](float v) { return std::isfinite(v); });
}

}  // namespace detail

/// Forward in chunks so large datasets do not blow up activation memory.
inline Tensor<float> forward_batched(Model& m, const Tensor<float>& x, std::size_t chunk = 256) {
  if (x.rank() == 0 || x.dim(0) == 0) {
    Shape s{0};
    s.insert(s.end(), m.output_shape().begin(), m.output_shape().end());
    return Tensor<float>(s);
  }
  Tensor<float> out;
  for (std::size_t i = 0; i < x.dim(0); i += chunk) {
    auto part = m.forward(x.rows(i, std::min(x.dim(0), i + chunk)));
    out = concat_rows(out, part);
  }
  return out;
}

/// Per-sample reconstruction loss of `targets` from model(inputs).
inline std::vector<double> reconstruction_losses(Model& m, const Tensor<float>& inputs,
                                                 const Tensor<float>& targets) {
  auto r = forward_batched(m, inputs);
  return bce_per_sample(targets, r.reshaped(targets.shape()));
}

inline std::vector<double> reconstruction_losses(Model& m, const Tensor<float>& x) {
  return reconstruction_losses(m, x, x);
}

inline double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Minimise summed BCE between model(inputs) and targets with the
/// configured optimizer.
/// Continues from the model's current parameters.
inline TrainReport fit_reconstruction(Model& m, const Tensor<float>& inputs,
                                      const Tensor<float>& targets, const TrainConfig& cfg,
                                      bool allow_zero_epochs = false) {
  validate(cfg, allow_zero_epochs);
  if (inputs.rank() == 0 || inputs.dim(0) == 0) throw EmptyInput("training set is empty");
  if (inputs.dim(0) != targets.dim(0))
    throw PairingError(std::to_string(inputs.dim(0)) + " inputs vs " +
                       std::to_string(targets.dim(0)) + " targets");
  if (!detail::all_finite(inputs) || !detail::all_finite(targets)) throw DomainError("non-finite training data");
  TrainReport rep;
  rep.initial_loss = mean(reconstruction_losses(m, inputs, targets));
  detail::check_finite(rep.initial_loss);
  std::mt19937_64 rng(cfg.seed);
  auto order = detail::iota_n(inputs.dim(0));
  Optimizer opt(cfg.optimizer, cfg.lr);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + b,
                                       std::min(cfg.batch_size, order.size() - b));
      auto xb = inputs.gather(idx);
      auto tb = targets.gather(idx);
      auto r = m.forward(xb).reshaped(tb.shape());
      if (!detail::all_finite(r)) throw TrainingDiverged("non-finite reconstruction in epoch " + std::to_string(epoch));
      double loss = bce_loss(tb, r);
      detail::check_finite(loss);
      total += loss * static_cast<double>(idx.size());
      m.backward(bce_grad(tb, r).reshaped(Shape(r.shape())));
      opt.step(m);
    }
    rep.epoch_losses.push_back(total / static_cast<double>(order.size()));
  }
  rep.final_loss = mean(reconstruction_losses(m, inputs, targets));
  detail::check_finite(rep.final_loss);
  return rep;
}

/// Train a fresh autoencoder (input reconstructs itself). X is [N,C,H,W].
inline AutoencoderModel train_autoencoder(const Tensor<float>& x, const std::vector<LayerSpec>& arch,
                                          const TrainConfig& cfg, TrainReport* report = nullptr) {
  validate(cfg);
  if (x.rank() < 2 || x.dim(0) == 0) throw EmptyInput("training set is empty");
  AutoencoderModel m(Shape(x.shape().begin() + 1, x.shape().end()), arch, cfg.seed);
  auto rep = fit_reconstruction(m, x, x, cfg);
  if (report) *report = rep;
  return m;
}

/// Train a denoising autoencoder: forward on the corrupted input, loss
/// against the aligned clean target.
inline AutoencoderModel train_denoiser(const Tensor<float>& clean, const Tensor<float>& corrupted,
                                       const std::vector<LayerSpec>& arch, const TrainConfig& cfg,
                                       TrainReport* report = nullptr) {
  validate(cfg);
  if (clean.shape() != corrupted.shape())
    throw PairingError("clean " + shape_str(clean.shape()) + " vs corrupted " +
                       shape_str(corrupted.shape()));
  if (clean.rank() < 2 || clean.dim(0) == 0) throw EmptyInput("no pairs");
  AutoencoderModel m(Shape(clean.shape().begin() + 1, clean.shape().end()), arch, cfg.seed);
  auto rep = fit_reconstruction(m, corrupted, clean, cfg);
  if (report) *report = rep;
  return m;
}

// ---------------------------------------------------------------------------
// Classifier

inline void check_labels(std::span<const int> y, int classes = 10) {
  for (int v : y)
    if (v < 0 || v >= classes) throw InvalidLabel("label " + std::to_string(v));
}

/// Mean cross-entropy SGD continuing from the current parameters. Zero
/// epochs is allowed and leaves the model untouched.
inline TrainReport fit_classifier(ClassifierModel& m, const Tensor<float>& x,
                                  std::span<const int> y, const TrainConfig& cfg) {
  validate(cfg, /*allow_zero_epochs=*/true);
  check_labels(y, static_cast<int>(shape_size(m.output_shape())));
  if (x.rank() == 0 || x.dim(0) != y.size())
    throw ShapeError("classifier inputs and labels differ in length");
  TrainReport rep;
  if (cfg.epochs == 0) return rep;
  std::mt19937_64 rng(cfg.seed);
  auto order = detail::iota_n(x.dim(0));
  Optimizer opt(cfg.optimizer, cfg.lr);
  std::vector<int> yb;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + b,
                                       std::min(cfg.batch_size, order.size() - b));
      auto xb = x.gather(idx);
      yb.clear();
      for (auto i : idx) yb.push_back(y[i]);
      auto logits = m.forward(xb);
      Tensor<float> g;
      double loss = softmax_cross_entropy(logits, std::span<const int>(yb), &g);
      detail::check_finite(loss);
      total += loss * static_cast<double>(idx.size());
      m.backward(g);
      opt.step(m);
    }
    rep.epoch_losses.push_back(total / static_cast<double>(order.size()));
  }
  if (!rep.epoch_losses.empty()) rep.final_loss = rep.epoch_losses.back();
  return rep;
}

inline ClassifierModel train_classifier(const Tensor<float>& x, std::span<const int> y,
                                        const std::vector<LayerSpec>& arch, const TrainConfig& cfg,
                                        TrainReport* report = nullptr) {
  validate(cfg);
  check_labels(y);
  if (x.rank() < 2 || x.dim(0) == 0) throw EmptyInput("training set is empty");
  ClassifierModel m(Shape(x.shape().begin() + 1, x.shape().end()), arch, cfg.seed);
  auto rep = fit_classifier(m, x, y, cfg);
  if (report) *report = rep;
  return m;
}

inline std::vector<int> argmax_rows(const Tensor<float>& logits) {
  std::size_t n = logits.dim(0), c = logits.size() / std::max<std::size_t>(n, 1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* z = logits.data() + i * c;
    out[i] = static_cast<int>(std::max_element(z, z + c) - z);
  }
  return out;
}

inline std::vector<int> predict(ClassifierModel& m, const Tensor<float>& x) {
  return argmax_rows(forward_batched(m, x));
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("prediction/label length mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

inline double evaluate(ClassifierModel& m, const Tensor<float>& x, std::span<const int> y) {
  auto p = predict(m, x);
  return accuracy(p, y);
}

// ---------------------------------------------------------------------------
// Tied-weight dense autoencoder
//
//   h = relu(x W + b)
//   r = sigmoid(h W^T + b_h)
//
// W is [d, k]; b is the hidden bias, b_h the reconstruction ("latent") bias.

template <typename T>
class TiedAutoencoder {
 public:
  TiedAutoencoder(std::size_t d, std::size_t k, std::uint64_t seed)
      : w_({d, k}), b_({k}), bh_({d}), gw_({d, k}), gb_({k}), gbh_({d}) {
    std::mt19937_64 rng(seed);
    detail::init_uniform(w_, d, k, rng);
  }

  std::size_t input_dim() const { return w_.dim(0); }
  std::size_t hidden_dim() const { return w_.dim(1); }

  Tensor<T> forward(const Tensor<T>& x) {
    const std::size_t d = input_dim(), k = hidden_dim();
    if (x.rank() != 2 || x.dim(1) != d)
      throw ShapeError("tied autoencoder expects [N," + std::to_string(d) + "], got " +
                       shape_str(x.shape()));
    const std::size_t n = x.dim(0);
    x_ = x;
    z1_ = Tensor<T>({n, k});
    h_ = Tensor<T>({n, k});
    r_ = Tensor<T>({n, d});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        T acc = b_[j];
        for (std::size_t a = 0; a < d; ++a) acc += x[i * d + a] * w_[a * k + j];
        z1_[i * k + j] = acc;
        h_[i * k + j] = acc > T{} ? acc : T{};
      }
      for (std::size_t a = 0; a < d; ++a) {
        T acc = bh_[a];
        for (std::size_t j = 0; j < k; ++j) acc += h_[i * k + j] * w_[a * k + j];
        r_[i * d + a] = T{1} / (T{1} + std::exp(-acc));
      }
    }
    return r_;
  }

  const Tensor<T>& hidden() const { return h_; }

  /// Gradients for the BCE loss against `target` (usually the input itself).
  void backward(const Tensor<T>& target) {
    const std::size_t d = input_dim(), k = hidden_dim(), n = x_.dim(0);
    auto gr = bce_grad(target, r_);
    std::fill(gw_.vec().begin(), gw_.vec().end(), T{});
    std::fill(gb_.vec().begin(), gb_.vec().end(), T{});
    std::fill(gbh_.vec().begin(), gbh_.vec().end(), T{});
    std::vector<T> dz2(d), dh(k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < d; ++a) {
        T r = r_[i * d + a];
        dz2[a] = gr[i * d + a] * r * (T{1} - r);
        gbh_[a] += dz2[a];
      }
      std::fill(dh.begin(), dh.end(), T{});
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t j = 0; j < k; ++j) {
          gw_[a * k + j] += dz2[a] * h_[i * k + j];  // decoder use of W^T
          dh[j] += dz2[a] * w_[a * k + j];
        }
      for (std::size_t j = 0; j < k; ++j) {
        T dz1 = z1_[i * k + j] > T{} ? dh[j] : T{};
        gb_[j] += dz1;
        for (std::size_t a = 0; a < d; ++a) gw_[a * k + j] += x_[i * d + a] * dz1;  // encoder use
      }
    }
  }

  std::vector<ParamRef<T>> params() { return {{&w_, &gw_}, {&b_, &gb_}, {&bh_, &gbh_}}; }

  void sgd(T lr) {
    for (auto p : params()) sgd_step<T>(p.value->span(), std::span<const T>(p.grad->span()), lr);
  }

 private:
  Tensor<T> w_, b_, bh_, gw_, gb_, gbh_;
  Tensor<T> x_, z1_, h_, r_;
};

/// Epoch/batch SGD loop over the tied autoencoder.
template <typename T>
TrainReport train_tied_autoencoder(TiedAutoencoder<T>& ae, const Tensor<T>& x,
                                   const TrainConfig& cfg) {
  validate(cfg);
  if (x.rank() != 2 || x.dim(0) == 0) throw EmptyInput("training set is empty");
  TrainReport rep;
  rep.initial_loss = bce_loss(x, ae.forward(x));
  std::mt19937_64 rng(cfg.seed);
  auto order = detail::iota_n(x.dim(0));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + b,
                                       std::min(cfg.batch_size, order.size() - b));
      auto xb = x.gather(idx);
      double loss = bce_loss(xb, ae.forward(xb));
      detail::check_finite(loss);
      total += loss * static_cast<double>(idx.size());
      ae.backward(xb);
      ae.sgd(static_cast<T>(cfg.lr));
    }
    rep.epoch_losses.push_back(total / static_cast<double>(order.size()));
  }
  rep.final_loss = bce_loss(x, ae.forward(x));
  return rep;
}

}  // namespace scanflow::nn
