#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/nn/layers.hpp"
#include "scanflow/nn/tensor.hpp"

namespace scanflow::nn {

/// Feed-forward stack of layers over a fixed per-sample input shape.
template <typename T>
class Sequential {
 public:
  Sequential() = default;

  Sequential(Shape input_shape, std::vector<LayerSpec> arch, std::uint64_t seed)
      : input_shape_(std::move(input_shape)), arch_(std::move(arch)) {
    std::mt19937_64 rng(seed);
    Shape s = input_shape_;
    for (const auto& spec : arch_) {
      layers_.push_back(make_layer<T>(spec, rng));
      s = layers_.back()->output_shape(s);
    }
    output_shape_ = s;
  }

  Sequential(const Sequential& o)
      : input_shape_(o.input_shape_), output_shape_(o.output_shape_), arch_(o.arch_) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) {
      Sequential tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  const std::vector<LayerSpec>& arch() const { return arch_; }
  std::size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }

  /// Batched forward; x has shape [N, input_shape...].
  Tensor<T> forward(const Tensor<T>& x) {
    check_input(x.shape());
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h);
    Shape s{x.dim(0)};
    s.insert(s.end(), output_shape_.begin(), output_shape_.end());
    return h.reshaped(std::move(s));
  }

  /// Backward through the cached forward; returns the input gradient.
  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> g = gy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    for (auto& l : layers_)
      for (auto p : l->params()) out.push_back(p);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto p : params()) n += p.value->size();
    return n;
  }

  /// Copy parameters from a model of the same architecture, converting type.
  template <typename U>
  void copy_params_from(Sequential<U>& other) {
    auto dst = params();
    auto src = other.params();
    if (dst.size() != src.size()) throw ShapeError("parameter layout mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].value->size() != src[i].value->size())
        throw ShapeError("parameter layout mismatch");
      std::transform(src[i].value->vec().begin(), src[i].value->vec().end(),
                     dst[i].value->vec().begin(), [](U v) { return static_cast<T>(v); });
    }
  }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != input_shape_.size() + 1 ||
        !std::equal(input_shape_.begin(), input_shape_.end(), s.begin() + 1))
      throw ShapeError("model expects [N," + shape_str(input_shape_).substr(1) + ", got " +
                       shape_str(s));
  }

  Shape input_shape_;
  Shape output_shape_;
  std::vector<LayerSpec> arch_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

template <typename T>
Sequential<T> clone_as(Sequential<float>& m) {
  Sequential<T> out(m.input_shape(), m.arch(), 0);
  out.copy_params_from(m);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kProbEps = 1e-7;

/// Per-sample binary cross-entropy summed over all non-batch dimensions.
/// r is clamped to [eps, 1-eps] before the log.
template <typename T>
std::vector<double> bce_per_sample(const Tensor<T>& x, const Tensor<T>& r) {
  if (x.shape() != r.shape())
    throw ShapeError("bce shapes " + shape_str(x.shape()) + " vs " + shape_str(r.shape()));
  std::size_t n = x.rank() ? x.dim(0) : 1;
  std::size_t d = n ? x.size() / n : 0;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      double xv = static_cast<double>(x[i * d + k]);
      double rv = static_cast<double>(r[i * d + k]);
      if (std::isnan(rv) || std::isnan(xv)) throw DomainError("NaN in reconstruction");
      rv = std::clamp(rv, kProbEps, 1.0 - kProbEps);
      acc -= xv * std::log(rv) + (1.0 - xv) * std::log(1.0 - rv);
    }
    out[i] = acc;
  }
  return out;
}

/// Binary cross-entropy summed over dimensions and averaged over the batch.
template <typename T>
double bce_loss(const Tensor<T>& x, const Tensor<T>& r) {
  auto per = bce_per_sample(x, r);
  if (per.empty()) return 0.0;
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

/// d(bce_loss)/dr with the same clamping as the loss.
template <typename T>
Tensor<T> bce_grad(const Tensor<T>& x, const Tensor<T>& r) {
  if (x.shape() != r.shape()) throw ShapeError("bce_grad shape mismatch");
  std::size_t n = x.rank() ? x.dim(0) : 1;
  Tensor<T> g(r.shape());
  const double inv_n = 1.0 / static_cast<double>(std::max<std::size_t>(n, 1));
  for (std::size_t i = 0; i < r.size(); ++i) {
    double rv = static_cast<double>(r[i]);
    double xv = static_cast<double>(x[i]);
    if (rv < kProbEps || rv > 1.0 - kProbEps) {
      g[i] = T{};  // clamped region: loss is flat in r
      continue;
    }
    g[i] = static_cast<T>((-xv / rv + (1.0 - xv) / (1.0 - rv)) * inv_n);
  }
  return g;
}

/// Mean softmax cross-entropy over the batch; writes dL/dlogits into grad.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                             Tensor<T>* grad) {
  std::size_t n = logits.dim(0), c = logits.size() / std::max<std::size_t>(n, 1);
  if (labels.size() != n) throw ShapeError("label count mismatch");
  if (grad) *grad = Tensor<T>(logits.shape());
  double total = 0.0;
  std::vector<double> p(c);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data() + i * c;
    double m = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (p[k] = std::exp(static_cast<double>(z[k]) - m));
    for (auto& v : p) v /= s;
    auto y = static_cast<std::size_t>(labels[i]);
    total -= std::log(std::max(p[y], 1e-300));
    if (grad)
      for (std::size_t k = 0; k < c; ++k)
        (*grad)[i * c + k] = static_cast<T>((p[k] - (k == y ? 1.0 : 0.0)) / static_cast<double>(n));
  }
  return total / static_cast<double>(std::max<std::size_t>(n, 1));
}

// ---------------------------------------------------------------------------
// Optimizer

/// theta_i <- theta_i - lr * g_i
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, T lr) {
  if (params.size() != grads.size()) throw ShapeError("sgd parameter/gradient mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

template <typename T>
void sgd_step(Sequential<T>& model, T lr) {
  for (auto p : model.params())
    sgd_step<T>(p.value->span(), std::span<const T>(p.grad->span()), lr);
}

// ---------------------------------------------------------------------------
// Presets

/// Two conv blocks and one dense layer onto 10 logits.
inline std::vector<LayerSpec> classifier_small(std::size_t h = 28, std::size_t w = 28) {
  return {LayerSpec::conv(1, 8),   LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::conv(8, 16),  LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::dense(16 * (h / 4) * (w / 4), 10)};
}

/// Four-conv autoencoder: 28 -> 14 -> 7 -> 14 -> 28.
inline std::vector<LayerSpec> autoencoder_small(std::size_t width = 8, std::size_t code = 4) {
  return {LayerSpec::conv(1, width),    LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::conv(width, code), LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::upsample(),        LayerSpec::conv(code, width), LayerSpec::relu(),
          LayerSpec::upsample(),        LayerSpec::conv(width, 1),    LayerSpec::sigmoid()};
}

/// Seven convolutions, three poolings and three upsamplings; composes back
/// to 28x28 through a ceil pool (7 -> 4) and one valid conv (16 -> 14).
inline std::vector<LayerSpec> autoencoder_deep() {
  return {LayerSpec::conv(1, 16),  LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::conv(16, 8),  LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::conv(8, 8),   LayerSpec::relu(), LayerSpec::maxpool(true),
          LayerSpec::conv(8, 8),   LayerSpec::relu(), LayerSpec::upsample(),
          LayerSpec::conv(8, 8),   LayerSpec::relu(), LayerSpec::upsample(),
          LayerSpec::conv(8, 16, 3, Padding::kValid), LayerSpec::relu(), LayerSpec::upsample(),
          LayerSpec::conv(16, 1),  LayerSpec::sigmoid()};
}

/// Full-resolution convolutional denoiser (no pooling, so no blur from
/// downsampling).
inline std::vector<LayerSpec> denoiser_small(std::size_t width = 8) {
  return {LayerSpec::conv(1, width),     LayerSpec::relu(), LayerSpec::conv(width, width),
          LayerSpec::relu(),             LayerSpec::conv(width, 1), LayerSpec::sigmoid()};
}

inline std::vector<LayerSpec> arch_preset(const std::string& name) {
  if (name == "small" || name == "ae-small") return autoencoder_small();
  if (name == "deep" || name == "ae-deep") return autoencoder_deep();
  if (name == "denoiser") return denoiser_small();
  if (name == "classifier") return classifier_small();
  throw InvalidConfig("unknown architecture preset '" + name + "'");
}

inline nlohmann::json arch_to_json(const std::vector<LayerSpec>& arch) {
  auto j = nlohmann::json::array();
  for (const auto& s : arch) j.push_back(to_json(s));
  return j;
}

inline std::vector<LayerSpec> arch_from_json(const nlohmann::json& j) {
  std::vector<LayerSpec> out;
  for (const auto& s : j) out.push_back(layer_spec_from_json(s));
  return out;
}

}  // namespace scanflow::nn
