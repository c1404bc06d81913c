#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/nn/tensor.hpp"

namespace scanflow::nn {

enum class LayerKind { kDense, kConv2d, kMaxPool2, kUpsample2, kRelu, kSigmoid };
enum class Padding { kSame, kValid };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kMaxPool2: return "maxpool2";
    case LayerKind::kUpsample2: return "upsample2";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kSigmoid: return "sigmoid";
  }
  return "relu";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::kDense, LayerKind::kConv2d, LayerKind::kMaxPool2,
                 LayerKind::kUpsample2, LayerKind::kRelu, LayerKind::kSigmoid})
    if (to_string(k) == s) return k;
  throw InvalidConfig("unknown layer kind '" + s + "'");
}

/// Architecture description of one layer. Convolutions are stride 1 with
/// square kernels; "same" padding keeps spatial size, "valid" shrinks it by
/// kernel-1. Pooling floors odd sizes unless `ceil` is set, in which case
/// the trailing partial window is pooled too.
struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t in = 0;   // dense input features / conv input channels
  std::size_t out = 0;  // dense units / conv output channels
  std::size_t kernel = 3;
  Padding padding = Padding::kSame;
  bool ceil = false;

  static LayerSpec dense(std::size_t in, std::size_t units) {
    return {LayerKind::kDense, in, units};
  }
  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k = 3,
                        Padding p = Padding::kSame) {
    return {LayerKind::kConv2d, in, out, k, p};
  }
  static LayerSpec maxpool(bool ceil_mode = false) {
    LayerSpec s{LayerKind::kMaxPool2};
    s.ceil = ceil_mode;
    return s;
  }
  static LayerSpec upsample() { return {LayerKind::kUpsample2}; }
  static LayerSpec relu() { return {LayerKind::kRelu}; }
  static LayerSpec sigmoid() { return {LayerKind::kSigmoid}; }

  bool operator==(const LayerSpec&) const = default;
};

inline nlohmann::json to_json(const LayerSpec& s) {
  nlohmann::json j{{"kind", to_string(s.kind)}};
  if (s.kind == LayerKind::kDense || s.kind == LayerKind::kConv2d) {
    j["in"] = s.in;
    j["out"] = s.out;
  }
  if (s.kind == LayerKind::kConv2d) {
    j["kernel"] = s.kernel;
    j["padding"] = s.padding == Padding::kSame ? "same" : "valid";
  }
  if (s.kind == LayerKind::kMaxPool2 && s.ceil) j["ceil"] = true;
  return j;
}

inline LayerSpec layer_spec_from_json(const nlohmann::json& j) {
  LayerSpec s;
  s.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  s.in = j.value("in", std::size_t{0});
  s.out = j.value("out", std::size_t{0});
  s.kernel = j.value("kernel", std::size_t{3});
  s.padding = j.value("padding", std::string("same")) == "valid" ? Padding::kValid : Padding::kSame;
  s.ceil = j.value("ceil", false);
  return s;
}

template <typename T>
struct ParamRef {
  Tensor<T>* value;
  Tensor<T>* grad;
};

/// A differentiable layer operating on a leading batch axis. forward()
/// caches whatever backward() needs; backward() writes parameter gradients
/// (overwriting the previous batch) and returns the input gradient.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual const LayerSpec& spec() const = 0;
  /// Per-sample output shape for a per-sample input shape.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& gy) = 0;
  virtual std::vector<ParamRef<T>> params() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
};

namespace detail {

template <typename T>
void init_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : w.vec()) v = static_cast<T>(dist(rng));
}

inline void expect_rank(const Shape& s, std::size_t r, const char* who) {
  if (s.size() != r)
    throw ShapeError(std::string(who) + " expects rank " + std::to_string(r) + " input, got " +
                     shape_str(s));
}

}  // namespace detail

template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(const LayerSpec& s, std::mt19937_64& rng)
      : spec_(s), w_({s.out, s.in}), b_({s.out}), gw_({s.out, s.in}), gb_({s.out}) {
    detail::init_uniform(w_, s.in, s.out, rng);
  }
  const LayerSpec& spec() const override { return spec_; }

  Shape output_shape(const Shape& in) const override {
    if (shape_size(in) != spec_.in)
      throw ShapeError("dense expects " + std::to_string(spec_.in) + " features, got " +
                       shape_str(in));
    return {spec_.out};
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    std::size_t n = x.dim(0);
    if (x.size() != n * spec_.in)
      throw ShapeError("dense expects " + std::to_string(spec_.in) + " features, got " +
                       shape_str(x.shape()));
    x_ = x;
    Tensor<T> y({n, spec_.out});
    const std::size_t in = spec_.in, out = spec_.out;
    for (std::size_t i = 0; i < n; ++i) {
      const T* xi = x.data() + i * in;
      for (std::size_t o = 0; o < out; ++o) {
        const T* wo = w_.data() + o * in;
        T acc = b_[o];
        for (std::size_t k = 0; k < in; ++k) acc += wo[k] * xi[k];
        y[i * out + o] = acc;
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    std::size_t n = x_.dim(0);
    const std::size_t in = spec_.in, out = spec_.out;
    if (gy.size() != n * out) throw ShapeError("dense backward gradient shape");
    std::fill(gw_.vec().begin(), gw_.vec().end(), T{});
    std::fill(gb_.vec().begin(), gb_.vec().end(), T{});
    Tensor<T> gx(x_.shape());
    for (std::size_t i = 0; i < n; ++i) {
      const T* xi = x_.data() + i * in;
      T* gxi = gx.data() + i * in;
      for (std::size_t o = 0; o < out; ++o) {
        T g = gy[i * out + o];
        if (g == T{}) continue;
        gb_[o] += g;
        T* gwo = gw_.data() + o * in;
        const T* wo = w_.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) {
          gwo[k] += g * xi[k];
          gxi[k] += g * wo[k];
        }
      }
    }
    return gx;
  }

  std::vector<ParamRef<T>> params() override { return {{&w_, &gw_}, {&b_, &gb_}}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  LayerSpec spec_;
  Tensor<T> w_, b_, gw_, gb_, x_;
};

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const LayerSpec& s, std::mt19937_64& rng)
      : spec_(s),
        w_({s.out, s.in, s.kernel, s.kernel}),
        b_({s.out}),
        gw_({s.out, s.in, s.kernel, s.kernel}),
        gb_({s.out}) {
    if (s.kernel % 2 == 0 && s.padding == Padding::kSame)
      throw InvalidConfig("same padding needs an odd kernel");
    detail::init_uniform(w_, s.in * s.kernel * s.kernel, s.out * s.kernel * s.kernel, rng);
  }
  const LayerSpec& spec() const override { return spec_; }

  std::size_t pad() const { return spec_.padding == Padding::kSame ? spec_.kernel / 2 : 0; }

  Shape output_shape(const Shape& in) const override {
    detail::expect_rank(in, 3, "conv2d");
    if (in[0] != spec_.in)
      throw ShapeError("conv2d expects " + std::to_string(spec_.in) + " channels, got " +
                       shape_str(in));
    if (spec_.padding == Padding::kSame) return {spec_.out, in[1], in[2]};
    if (in[1] < spec_.kernel || in[2] < spec_.kernel)
      throw ShapeError("valid conv kernel larger than input " + shape_str(in));
    return {spec_.out, in[1] - spec_.kernel + 1, in[2] - spec_.kernel + 1};
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    detail::expect_rank(x.shape(), 4, "conv2d");
    auto os = output_shape({x.dim(1), x.dim(2), x.dim(3)});
    x_ = x;
    const std::size_t n = x.dim(0), C = spec_.in, H = x.dim(2), W = x.dim(3);
    const std::size_t O = spec_.out, OH = os[1], OW = os[2], K = spec_.kernel;
    const long P = static_cast<long>(pad());
    Tensor<T> y({n, O, OH, OW});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < O; ++o) {
        T* yp = y.data() + ((i * O + o) * OH) * OW;
        std::fill(yp, yp + OH * OW, b_[o]);
        for (std::size_t c = 0; c < C; ++c) {
          const T* xp = x.data() + ((i * C + c) * H) * W;
          const T* wp = w_.data() + ((o * C + c) * K) * K;
          for (std::size_t ky = 0; ky < K; ++ky) {
            long dy = static_cast<long>(ky) - P;
            long y0 = std::max<long>(0, -dy), y1 = std::min<long>(OH, static_cast<long>(H) - dy);
            for (std::size_t kx = 0; kx < K; ++kx) {
              long dx = static_cast<long>(kx) - P;
              long x0 = std::max<long>(0, -dx);
              long x1 = std::min<long>(OW, static_cast<long>(W) - dx);
              T wv = wp[ky * K + kx];
              for (long oy = y0; oy < y1; ++oy) {
                T* yr = yp + oy * OW;
                const T* xr = xp + (oy + dy) * static_cast<long>(W) + dx;
                for (long ox = x0; ox < x1; ++ox) yr[ox] += wv * xr[ox];
              }
            }
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const std::size_t n = x_.dim(0), C = spec_.in, H = x_.dim(2), W = x_.dim(3);
    const std::size_t O = spec_.out, OH = gy.dim(2), OW = gy.dim(3), K = spec_.kernel;
    const long P = static_cast<long>(pad());
    std::fill(gw_.vec().begin(), gw_.vec().end(), T{});
    std::fill(gb_.vec().begin(), gb_.vec().end(), T{});
    Tensor<T> gx(x_.shape());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < O; ++o) {
        const T* gp = gy.data() + ((i * O + o) * OH) * OW;
        T bsum{};
        for (std::size_t k = 0; k < OH * OW; ++k) bsum += gp[k];
        gb_[o] += bsum;
        for (std::size_t c = 0; c < C; ++c) {
          const T* xp = x_.data() + ((i * C + c) * H) * W;
          T* gxp = gx.data() + ((i * C + c) * H) * W;
          const T* wp = w_.data() + ((o * C + c) * K) * K;
          T* gwp = gw_.data() + ((o * C + c) * K) * K;
          for (std::size_t ky = 0; ky < K; ++ky) {
            long dy = static_cast<long>(ky) - P;
            long y0 = std::max<long>(0, -dy), y1 = std::min<long>(OH, static_cast<long>(H) - dy);
            for (std::size_t kx = 0; kx < K; ++kx) {
              long dx = static_cast<long>(kx) - P;
              long x0 = std::max<long>(0, -dx);
              long x1 = std::min<long>(OW, static_cast<long>(W) - dx);
              T wv = wp[ky * K + kx];
              T acc{};
              for (long oy = y0; oy < y1; ++oy) {
                const T* gr = gp + oy * OW;
                const T* xr = xp + (oy + dy) * static_cast<long>(W) + dx;
                T* gxr = gxp + (oy + dy) * static_cast<long>(W) + dx;
                for (long ox = x0; ox < x1; ++ox) {
                  acc += gr[ox] * xr[ox];
                  gxr[ox] += wv * gr[ox];
                }
              }
              gwp[ky * K + kx] += acc;
            }
          }
        }
      }
    }
    return gx;
  }

  std::vector<ParamRef<T>> params() override { return {{&w_, &gw_}, {&b_, &gb_}}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  LayerSpec spec_;
  Tensor<T> w_, b_, gw_, gb_, x_;
};

template <typename T>
class MaxPool2 final : public Layer<T> {
 public:
  explicit MaxPool2(const LayerSpec& s) : spec_(s) {}
  const LayerSpec& spec() const override { return spec_; }

  Shape output_shape(const Shape& in) const override {
    detail::expect_rank(in, 3, "maxpool2");
    if (spec_.ceil) return {in[0], (in[1] + 1) / 2, (in[2] + 1) / 2};
    if (in[1] < 2 || in[2] < 2) throw ShapeError("maxpool2 input too small " + shape_str(in));
    return {in[0], in[1] / 2, in[2] / 2};
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    detail::expect_rank(x.shape(), 4, "maxpool2");
    auto os = output_shape({x.dim(1), x.dim(2), x.dim(3)});
    in_shape_ = x.shape();
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OH = os[1], OW = os[2];
    Tensor<T> y({x.dim(0), x.dim(1), OH, OW});
    argmax_.assign(y.size(), 0);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* xp = x.data() + p * H * W;
      for (std::size_t oy = 0; oy < OH; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
          std::size_t best = (2 * oy) * W + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              std::size_t iy = 2 * oy + dy, ix = 2 * ox + dx;
              if (iy >= H || ix >= W) continue;
              if (xp[iy * W + ix] > xp[best]) best = iy * W + ix;
            }
          std::size_t oi = (p * OH + oy) * OW + ox;
          y[oi] = xp[best];
          argmax_[oi] = p * H * W + best;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax_[i]] += gy[i];
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2>(*this); }

 private:
  LayerSpec spec_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

template <typename T>
class Upsample2 final : public Layer<T> {
 public:
  explicit Upsample2(const LayerSpec& s) : spec_(s) {}
  const LayerSpec& spec() const override { return spec_; }

  Shape output_shape(const Shape& in) const override {
    detail::expect_rank(in, 3, "upsample2");
    return {in[0], in[1] * 2, in[2] * 2};
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    detail::expect_rank(x.shape(), 4, "upsample2");
    in_shape_ = x.shape();
    const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y({x.dim(0), x.dim(1), 2 * H, 2 * W});
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t oy = 0; oy < 2 * H; ++oy)
        for (std::size_t ox = 0; ox < 2 * W; ++ox)
          y[(p * 2 * H + oy) * 2 * W + ox] = x[(p * H + oy / 2) * W + ox / 2];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_);
    const std::size_t planes = in_shape_[0] * in_shape_[1], H = in_shape_[2], W = in_shape_[3];
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t oy = 0; oy < 2 * H; ++oy)
        for (std::size_t ox = 0; ox < 2 * W; ++ox)
          gx[(p * H + oy / 2) * W + ox / 2] += gy[(p * 2 * H + oy) * 2 * W + ox];
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Upsample2>(*this); }

 private:
  LayerSpec spec_;
  Shape in_shape_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  explicit Relu(const LayerSpec& s) : spec_(s) {}
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x) override {
    x_ = x;
    Tensor<T> y = x;
    for (auto& v : y.vec()) v = v > T{} ? v : T{};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(x_[i] > T{})) gx[i] = T{};
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Relu>(*this); }

 private:
  LayerSpec spec_;
  Tensor<T> x_;
};

template <typename T>
class Sigmoid final : public Layer<T> {
 public:
  explicit Sigmoid(const LayerSpec& s) : spec_(s) {}
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x) override {
    y_ = x;
    for (auto& v : y_.vec()) v = T{1} / (T{1} + std::exp(-v));
    return y_;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= y_[i] * (T{1} - y_[i]);
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Sigmoid>(*this); }

 private:
  LayerSpec spec_;
  Tensor<T> y_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& s, std::mt19937_64& rng) {
  switch (s.kind) {
    case LayerKind::kDense: return std::make_unique<Dense<T>>(s, rng);
    case LayerKind::kConv2d: return std::make_unique<Conv2d<T>>(s, rng);
    case LayerKind::kMaxPool2: return std::make_unique<MaxPool2<T>>(s);
    case LayerKind::kUpsample2: return std::make_unique<Upsample2<T>>(s);
    case LayerKind::kRelu: return std::make_unique<Relu<T>>(s);
    case LayerKind::kSigmoid: return std::make_unique<Sigmoid<T>>(s);
  }
  throw InvalidConfig("unknown layer kind");
}

}  // namespace scanflow::nn
