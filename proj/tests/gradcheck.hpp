#pragma once

// Central finite differences against backprop, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "scanflow/nn/train.hpp"

namespace scanflow::test {

struct GradCase {
  std::string name;
  nn::Shape input;  // per-sample
  std::vector<nn::LayerSpec> arch;
};

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// L(x) = sum(w * f(x)) so dL/dy = w.
inline double weighted_sum(const nn::Tensor<double>& y, const nn::Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

// Inputs stay away from the ReLU kink and from max-pool ties so the
// finite difference never crosses a non-differentiable point.
inline void fill_inputs(nn::Tensor<double>& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : x.vec()) v = sign(rng) ? mag(rng) : -mag(rng);
}

/// Worst relative error over input and parameter gradients for one random
/// instance of the case.
inline double check_instance(const GradCase& c, std::uint64_t seed, double eps = 1e-6) {
  std::mt19937_64 rng(seed);
  nn::Sequential<double> m(c.input, c.arch, seed);
  const std::size_t n = 2;
  nn::Shape xs{n};
  xs.insert(xs.end(), c.input.begin(), c.input.end());
  nn::Tensor<double> x(xs);
  fill_inputs(x, rng);
  auto y = m.forward(x);
  nn::Tensor<double> w(y.shape());
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : w.vec()) v = g(rng);
  auto gx = m.backward(w);

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + eps;
    double lp = weighted_sum(m.forward(x), w);
    x[i] = keep - eps;
    double lm = weighted_sum(m.forward(x), w);
    x[i] = keep;
    worst = std::max(worst, rel_err(gx[i], (lp - lm) / (2 * eps)));
  }
  // Parameter gradients: recompute at the unperturbed point first.
  m.forward(x);
  m.backward(w);
  auto params = m.params();
  std::vector<std::vector<double>> analytic;
  for (auto p : params) analytic.push_back(p.grad->vec());
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k].value->vec();
    for (std::size_t i = 0; i < v.size(); ++i) {
      double keep = v[i];
      v[i] = keep + eps;
      double lp = weighted_sum(m.forward(x), w);
      v[i] = keep - eps;
      double lm = weighted_sum(m.forward(x), w);
      v[i] = keep;
      worst = std::max(worst, rel_err(analytic[k][i], (lp - lm) / (2 * eps)));
    }
  }
  return worst;
}

/// One case per layer kind and configuration the models use.
inline std::vector<GradCase> layer_cases() {
  using nn::LayerSpec;
  return {
      {"dense", {12}, {LayerSpec::dense(12, 5)}},
      {"dense-from-image", {2, 3, 3}, {LayerSpec::dense(18, 4)}},
      {"conv2d-same", {2, 5, 5}, {LayerSpec::conv(2, 3, 3)}},
      {"conv2d-valid", {2, 6, 5}, {LayerSpec::conv(2, 2, 3, nn::Padding::kValid)}},
      {"maxpool2", {2, 6, 4}, {LayerSpec::maxpool()}},
      {"maxpool2-ceil", {2, 5, 7}, {LayerSpec::maxpool(true)}},
      {"upsample2", {2, 3, 2}, {LayerSpec::upsample()}},
      {"relu", {3, 4}, {LayerSpec::relu()}},
      {"sigmoid", {3, 4}, {LayerSpec::sigmoid()}},
  };
}

/// Worst error over `instances` seeds for every layer kind, plus the two
/// losses and the tied autoencoder.
inline std::vector<std::pair<std::string, double>> gradient_suite(int instances = 20) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& c : layer_cases()) {
    double worst = 0;
    for (int s = 0; s < instances; ++s) worst = std::max(worst, check_instance(c, 1000 + s));
    out.emplace_back(c.name, worst);
  }

  const double eps = 1e-6;
  double bce = 0, ce = 0, tied = 0;
  for (int s = 0; s < instances; ++s) {
    std::mt19937_64 rng(2000 + s);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    nn::Tensor<double> x({3, 7}), r({3, 7});
    for (auto& v : x.vec()) v = u(rng);
    for (auto& v : r.vec()) v = u(rng);
    auto g = nn::bce_grad(x, r);
    for (std::size_t i = 0; i < r.size(); ++i) {
      double keep = r[i];
      r[i] = keep + eps;
      double lp = nn::bce_loss(x, r);
      r[i] = keep - eps;
      double lm = nn::bce_loss(x, r);
      r[i] = keep;
      bce = std::max(bce, rel_err(g[i], (lp - lm) / (2 * eps)));
    }

    std::normal_distribution<double> z(0.0, 2.0);
    nn::Tensor<double> logits({4, 10}), gl;
    for (auto& v : logits.vec()) v = z(rng);
    std::vector<int> labels{0, 3, 9, static_cast<int>(rng() % 10)};
    nn::softmax_cross_entropy(logits, labels, &gl);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      double keep = logits[i];
      logits[i] = keep + eps;
      double lp = nn::softmax_cross_entropy<double>(logits, labels, nullptr);
      logits[i] = keep - eps;
      double lm = nn::softmax_cross_entropy<double>(logits, labels, nullptr);
      logits[i] = keep;
      ce = std::max(ce, rel_err(gl[i], (lp - lm) / (2 * eps)));
    }

    nn::TiedAutoencoder<double> ae(9, 4, 3000 + s);
    nn::Tensor<double> xa({2, 9});
    for (auto& v : xa.vec()) v = u(rng);
    ae.forward(xa);
    ae.backward(xa);
    auto ps = ae.params();
    std::vector<std::vector<double>> analytic;
    for (auto p : ps) analytic.push_back(p.grad->vec());
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto& v = ps[k].value->vec();
      for (std::size_t i = 0; i < v.size(); ++i) {
        double keep = v[i];
        v[i] = keep + eps;
        double lp = nn::bce_loss(xa, ae.forward(xa));
        v[i] = keep - eps;
        double lm = nn::bce_loss(xa, ae.forward(xa));
        v[i] = keep;
        tied = std::max(tied, rel_err(analytic[k][i], (lp - lm) / (2 * eps)));
      }
    }
  }
  out.emplace_back("loss-bce", bce);
  out.emplace_back("loss-softmax-ce", ce);
  out.emplace_back("tied-autoencoder", tied);
  return out;
}

}  // namespace scanflow::test
