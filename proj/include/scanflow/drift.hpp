#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/dataset.hpp"
#include "scanflow/error.hpp"
#include "scanflow/nn/serialize.hpp"
#include "scanflow/nn/train.hpp"
#include "scanflow/tracker.hpp"

namespace scanflow {

/// Linear-interpolation quantile: position (n-1)*q in the sorted values.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyInput("quantile of an empty vector");
  if (!(q >= 0.0 && q <= 1.0)) throw InvalidConfig("quantile level outside [0,1]");
  std::sort(values.begin(), values.end());
  double pos = static_cast<double>(values.size() - 1) * q;
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = std::min(lo + 1, values.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

enum class KernelKind { kGaussian };

/// 1-D kernel density estimate f(x) = 1/(n h) * sum K((x - x_i) / h).
class Kde {
 public:
  Kde(std::vector<double> points, double bandwidth, KernelKind kernel = KernelKind::kGaussian)
      : points_(std::move(points)), h_(bandwidth), kernel_(kernel) {
    if (points_.empty()) throw EmptyInput("kde needs at least one point");
    if (!(h_ > 0.0) || !std::isfinite(h_))
      throw InvalidBandwidth("bandwidth " + std::to_string(h_));
  }

  double operator()(double x) const {
    double sum = 0.0;
    for (double xi : points_) sum += kernel((x - xi) / h_);
    return sum / (static_cast<double>(points_.size()) * h_);
  }

  double bandwidth() const { return h_; }

  static double kernel(double u) { return std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi); }

 private:
  std::vector<double> points_;
  double h_;
  KernelKind kernel_;
};

/// Silverman's rule of thumb, 0.9 * min(sd, IQR/1.34) * n^(-1/5). Returns
/// 0 when the sample has no spread.
inline double silverman_bandwidth(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - m) * (v - m);
  double sd = std::sqrt(var / static_cast<double>(x.size() - 1));
  double iqr = quantile(x, 0.75) - quantile(x, 0.25);
  double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(static_cast<double>(x.size()), -0.2);
}

struct SelectorConfig {
  std::size_t n_critical = 50;
  double initial_quantile_high = 0.80;
  double width = 0.1;
  std::size_t max_trials = 3;
  std::optional<double> bandwidth;  // Silverman on the flagged losses when unset
  KernelKind kernel = KernelKind::kGaussian;
  bool stochastic = false;          // density-weighted sampling instead of top-k
  std::uint64_t seed = 0;
};

inline void validate(const SelectorConfig& c) {
  if (c.n_critical < 1) throw InvalidConfig("n_critical must be >= 1");
  if (!(c.initial_quantile_high > 0.5 && c.initial_quantile_high < 1.0))
    throw InvalidConfig("initial quantile_high must lie in (0.5, 1)");
  if (!(c.width > 0.0)) throw InvalidConfig("width must be positive");
  if (c.max_trials < 1) throw InvalidConfig("max_trials must be >= 1");
  if (c.bandwidth && !(*c.bandwidth > 0.0)) throw InvalidBandwidth("bandwidth must be positive");
}

struct Thresholds {
  double low = 0.0;
  double high = 0.0;
  double quantile_high = 0.0;
  std::size_t flagged = 0;
};

/// Selected critical observations. `indices`, `losses` and `densities` are
/// aligned and in rank order (most likely first).
struct CriticalReport {
  std::vector<std::size_t> indices;
  std::vector<double> losses;
  std::vector<double> densities;
  Tensor<float> samples;               // [k, h, w]
  Thresholds thresholds;               // from the final trial
  std::vector<Thresholds> trials;
  std::size_t flagged = 0;
  double bandwidth = 0.0;
  std::vector<double> test_losses;     // every test sample

  bool empty() const { return indices.empty(); }
  std::size_t size() const { return indices.size(); }
};

inline constexpr double kFallbackBandwidth = 1.0;

/// Auto-threshold then density ranking over explicit loss vectors.
///
/// Each trial flags test losses above the train quantile at q_high or below
/// the one at 1 - q_high; once at least n_critical are flagged the loop
/// stops, otherwise q_high drops by `width`. The flagged losses are fit with
/// a Gaussian KDE and ranked by density (ties: higher loss, then lower
/// index); the first n_critical are kept.
inline CriticalReport select_critical(const std::vector<double>& train_losses,
                                      const std::vector<double>& test_losses,
                                      const SelectorConfig& cfg) {
  validate(cfg);
  if (train_losses.empty()) throw EmptyInput("no training losses");
  if (test_losses.empty()) throw EmptyInput("no test losses");
  CriticalReport rep;
  rep.test_losses = test_losses;
  std::vector<std::size_t> flagged;
  double q_high = cfg.initial_quantile_high;
  for (std::size_t t = 0; t < cfg.max_trials; ++t) {
    double q_low = 1.0 - q_high;
    Thresholds th{quantile(train_losses, std::clamp(q_low, 0.0, 1.0)),
                  quantile(train_losses, std::clamp(q_high, 0.0, 1.0)), q_high, 0};
    flagged.clear();
    for (std::size_t i = 0; i < test_losses.size(); ++i)
      if (test_losses[i] > th.high || test_losses[i] < th.low) flagged.push_back(i);
    th.flagged = flagged.size();
    rep.trials.push_back(th);
    rep.thresholds = th;
    if (flagged.size() >= cfg.n_critical) break;
    q_high -= cfg.width;
  }
  rep.flagged = flagged.size();
  if (flagged.empty()) return rep;

  std::vector<double> fl;
  for (auto i : flagged) fl.push_back(test_losses[i]);
  double h = cfg.bandwidth.value_or(silverman_bandwidth(fl));
  if (!(h > 0.0)) h = kFallbackBandwidth;
  rep.bandwidth = h;
  Kde kde(fl, h, cfg.kernel);

  struct Cand {
    std::size_t index;
    double loss;
    double density;
  };
  std::vector<Cand> cands;
  for (auto i : flagged) cands.push_back({i, test_losses[i], kde(test_losses[i])});

  if (cfg.stochastic) {
    std::mt19937_64 rng(cfg.seed);
    std::vector<Cand> picked;
    while (!cands.empty() && picked.size() < cfg.n_critical) {
      std::vector<double> w;
      for (const auto& c : cands) w.push_back(c.density);
      std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
      auto k = dist(rng);
      picked.push_back(cands[k]);
      cands.erase(cands.begin() + static_cast<long>(k));
    }
    cands = std::move(picked);
  } else {
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.density != b.density) return a.density > b.density;
      if (a.loss != b.loss) return a.loss > b.loss;
      return a.index < b.index;
    });
    if (cands.size() > cfg.n_critical) cands.resize(cfg.n_critical);
  }
  for (const auto& c : cands) {
    rep.indices.push_back(c.index);
    rep.losses.push_back(c.loss);
    rep.densities.push_back(c.density);
  }
  return rep;
}

/// Scale to [0,1] and bring images into the [n,1,h,w] layout the
/// autoencoder expects.
inline Tensor<float> preprocess(const Dataset& x, const nn::Shape& expected) {
  if (x.size() == 0) throw EmptyInput("empty dataset '" + x.name + "'");
  Tensor<float> b = x.batch();
  for (auto& v : b.vec()) v = std::clamp(v, 0.0f, 1.0f);
  nn::Shape s(b.shape().begin() + 1, b.shape().end());
  if (s != expected)
    throw ShapeError("dataset sample shape " + nn::shape_str(s) + " does not match model " +
                     nn::shape_str(expected));
  return b;
}

inline CriticalReport critical_point_selector(nn::AutoencoderModel& ae, const Dataset& x_train,
                                              const Dataset& x_test, const SelectorConfig& cfg) {
  auto tr = preprocess(x_train, ae.input_shape());
  auto te = preprocess(x_test, ae.input_shape());
  auto rep = select_critical(nn::reconstruction_losses(ae, tr), nn::reconstruction_losses(ae, te),
                             cfg);
  rep.samples = x_test.images.gather(rep.indices);
  return rep;
}

inline nlohmann::json to_json(const CriticalReport& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials)
    trials.push_back({{"low", t.low}, {"high", t.high}, {"quantile_high", t.quantile_high},
                      {"flagged", t.flagged}});
  return {{"indices", r.indices},
          {"losses", r.losses},
          {"densities", r.densities},
          {"thresholds", {{"low", r.thresholds.low}, {"high", r.thresholds.high}}},
          {"trials", trials},
          {"flagged", r.flagged},
          {"bandwidth", r.bandwidth}};
}

/// Trains (or reuses) the reference autoencoder and runs the selector.
/// Autoencoders are cached per (training-set fingerprint, architecture,
/// training config) unless `force_retrain` is set.
class DriftDetector {
 public:
  DriftDetector(std::vector<nn::LayerSpec> arch, nn::TrainConfig train_cfg, SelectorConfig sel_cfg)
      : arch_(std::move(arch)), train_cfg_(train_cfg), sel_cfg_(sel_cfg) {}

  nn::AutoencoderModel& autoencoder(const Dataset& x_train, bool force_retrain = false) {
    auto key = fingerprint(x_train);
    auto it = cache_.find(key);
    if (it == cache_.end() || force_retrain) {
      auto x = preprocess(x_train, {1, x_train.height(), x_train.width()});
      nn::TrainReport rep;
      auto m = nn::train_autoencoder(x, arch_, train_cfg_, &rep);
      last_train_ = rep;
      ++trainings_;
      it = cache_.insert_or_assign(key, std::move(m)).first;
    }
    return it->second;
  }

  /// Learn the training distribution, then pick the test observations that
  /// deviate from it. Throws EmptyCriticalSet when nothing is flagged.
  CriticalReport check(const Dataset& x_train, const Dataset& x_test, bool force_retrain = false) {
    if (x_test.size() == 0) throw EmptyInput("empty test set");
    auto& ae = autoencoder(x_train, force_retrain);
    auto rep = critical_point_selector(ae, x_train, x_test, sel_cfg_);
    if (rep.empty())
      throw EmptyCriticalSet("no test sample outside the threshold band after " +
                             std::to_string(rep.trials.size()) + " trials");
    return rep;
  }

  std::size_t trainings() const { return trainings_; }
  const nn::TrainReport& last_train_report() const { return last_train_; }
  SelectorConfig& selector_config() { return sel_cfg_; }

 private:
  std::string fingerprint(const Dataset& x) const {
    std::string_view bytes(reinterpret_cast<const char*>(x.images.data()),
                           x.images.size() * sizeof(float));
    nlohmann::json k{{"data", sha256_hex(bytes)},
                     {"shape", x.images.shape()},
                     {"arch", nn::arch_to_json(arch_)},
                     {"epochs", train_cfg_.epochs},
                     {"batch", train_cfg_.batch_size},
                     {"lr", train_cfg_.lr},
                     {"seed", train_cfg_.seed}};
    return k.dump();
  }

  std::vector<nn::LayerSpec> arch_;
  nn::TrainConfig train_cfg_;
  SelectorConfig sel_cfg_;
  std::map<std::string, nn::AutoencoderModel> cache_;
  nn::TrainReport last_train_;
  std::size_t trainings_ = 0;
};

/// One-shot form of the checker node.
inline CriticalReport drift_detector_checker(const Dataset& x_train, const Dataset& x_test,
                                             const SelectorConfig& cfg,
                                             const std::vector<nn::LayerSpec>& arch,
                                             const nn::TrainConfig& train_cfg) {
  DriftDetector d(arch, train_cfg, cfg);
  return d.check(x_train, x_test);
}

/// Record a report: summary metrics plus the JSON record and the selected
/// images (IDX) as artifacts.
inline void log_report(TrackerClient& tracker, const std::string& run_id,
                       const std::string& node_id, const CriticalReport& r) {
  tracker.save_metadata({metric(node_id, "drift/threshold_low", r.thresholds.low),
                         metric(node_id, "drift/threshold_high", r.thresholds.high),
                         metric(node_id, "drift/flagged", static_cast<double>(r.flagged)),
                         metric(node_id, "drift/selected", static_cast<double>(r.size())),
                         metric(node_id, "drift/trials", static_cast<double>(r.trials.size()))},
                        run_id);
  tracker.log_artifact(run_id, node_id, "critical_report.json", to_json(r).dump());
  if (!r.empty())
    tracker.log_artifact(run_id, node_id, "critical_samples.idx",
                         serialize_idx(idx_from_images(r.samples)));
}

}  // namespace scanflow
