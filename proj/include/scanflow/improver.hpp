#pragma once

#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/dataset.hpp"
#include "scanflow/feedback.hpp"
#include "scanflow/nn/serialize.hpp"
#include "scanflow/nn/train.hpp"
#include "scanflow/tracker.hpp"

namespace scanflow {

/// Denoiser in front of a classifier: inputs are filtered before prediction.
struct CompoundModel {
  nn::AutoencoderModel denoiser;
  nn::ClassifierModel predictor;

  Tensor<float> denoise(const Tensor<float>& x) { return nn::forward_batched(denoiser, x); }
  std::vector<int> predict(const Tensor<float>& x) { return nn::predict(predictor, denoise(x)); }
  double evaluate(const Tensor<float>& x, std::span<const int> y) {
    return nn::accuracy(predict(x), y);
  }
};

inline CompoundModel wrap(nn::ClassifierModel predictor, nn::AutoencoderModel denoiser) {
  if (denoiser.output_shape() != predictor.input_shape())
    throw ShapeError("denoiser emits " + nn::shape_str(denoiser.output_shape()) +
                     " but predictor expects " + nn::shape_str(predictor.input_shape()));
  return {std::move(denoiser), std::move(predictor)};
}

// "SFCM" u32 version=1, then the denoiser and predictor model blobs.
inline std::string save_compound(CompoundModel& c) {
  std::string out("SFCM");
  nn::detail::put_le<std::uint32_t>(out, 1);
  out += nn::save_model(c.denoiser);
  out += nn::save_model(c.predictor);
  return out;
}

inline CompoundModel load_compound(std::string_view blob) {
  if (blob.substr(0, 4) != "SFCM") throw FormatError("not a compound model blob");
  std::size_t off = 4;
  if (nn::detail::get_le<std::uint32_t>(blob, off) != 1) throw FormatError("unsupported compound version");
  std::size_t used = 0;
  auto d = nn::load_model(blob.substr(off), &used);
  off += used;
  auto p = nn::load_model(blob.substr(off), &used);
  return wrap(std::move(p), std::move(d));
}

/// The model currently serving predictions: a bare classifier, or a
/// classifier behind the most recently approved denoiser.
struct ServingModel {
  nn::ClassifierModel predictor;
  std::optional<nn::AutoencoderModel> denoiser;

  std::vector<int> predict(const Tensor<float>& x) {
    if (!denoiser) return nn::predict(predictor, x);
    return nn::predict(predictor, nn::forward_batched(*denoiser, x));
  }
  double evaluate(const Tensor<float>& x, std::span<const int> y) { return nn::accuracy(predict(x), y); }

  std::string serialize() {
    if (!denoiser) return nn::save_model(predictor);
    CompoundModel c{*denoiser, predictor};
    return save_compound(c);
  }
};

/// Frozen quality measure: q = (acc(clean) + acc(corrupted)) / 2.
struct EvaluationSet {
  Tensor<float> clean_x;  // [n,1,h,w]
  std::vector<int> clean_y;
  Tensor<float> corrupted_x;
  std::vector<int> corrupted_y;

  static EvaluationSet from(const Dataset& clean, const Dataset& corrupted) {
    return {clean.batch(), clean.y(), corrupted.batch(), corrupted.y()};
  }

  template <typename M>
  double quality(M& m) const {
    return (score(m, clean_x, clean_y) + score(m, corrupted_x, corrupted_y)) / 2.0;
  }

 private:
  static double score(nn::ClassifierModel& m, const Tensor<float>& x, const std::vector<int>& y) {
    return nn::evaluate(m, x, y);
  }
  template <typename M>
  static double score(M& m, const Tensor<float>& x, const std::vector<int>& y) {
    return m.evaluate(x, y);
  }
};

struct ImproverConfig {
  nn::TrainConfig retrain{5, 32, 0.02, 0};     // warm start, 0.1x the base lr
  std::size_t feedback_repeat = 1;             // copies of each feedback item in the retrain set
  std::vector<nn::LayerSpec> denoiser_arch = nn::denoiser_small();
  nn::TrainConfig denoiser{10, 32, 0.003, 0, nn::OptimizerKind::kAdam};
  std::size_t pair_repeat = 4;                 // copies of each feedback pair in the denoiser set
  std::size_t identity_pairs = std::numeric_limits<std::size_t>::max();  // clean -> clean pairs, capped at |X_train|
  bool retrain_through_denoiser = true;
};

/// Outcome of one improvement attempt. When rejected, `model`, `new_model_ref` and `new_q` are
/// absent; `candidate_q` always carries the measured score.
struct ImprovementResult {
  std::optional<ServingModel> model;
  std::optional<std::string> new_model_ref;
  std::optional<double> new_q;
  double old_q = 0.0;
  double candidate_q = 0.0;
  bool accepted = false;
};

struct ImproverLog {
  TrackerClient* tracker = nullptr;
  std::string run_id;
  std::string node_id = "improver";
};

namespace detail {

inline ImprovementResult gate(ServingModel candidate, double old_q, double new_q,
                              const ImproverLog& log) {
  ImprovementResult r;
  r.old_q = old_q;
  r.candidate_q = new_q;
  r.accepted = new_q > old_q;
  if (r.accepted) {
    r.new_q = new_q;
    if (log.tracker) r.new_model_ref = log.tracker->log_artifact(log.run_id, log.node_id, "model.bin",
                                                                 candidate.serialize());
    r.model = std::move(candidate);
  }
  if (log.tracker) {
    log.tracker->save_metadata({metric(log.node_id, "improver/old_q", old_q),
                                metric(log.node_id, "improver/new_q", new_q),
                                metric(log.node_id, "improver/accepted", r.accepted ? 1.0 : 0.0)},
                               log.run_id);
  }
  return r;
}

// X_train plus `repeat` copies of the feedback images, as [n,1,h,w].
inline std::pair<Tensor<float>, std::vector<int>> augmented(const Dataset& train,
                                                            const std::vector<Tensor<float>>& extra_x,
                                                            const std::vector<int>& extra_y,
                                                            std::size_t repeat) {
  const std::size_t h = train.height(), w = train.width(), px = h * w;
  const std::size_t n = train.size() + extra_x.size() * repeat;
  std::vector<float> x(train.images.vec());
  x.reserve(n * px);
  std::vector<int> y(train.y());
  for (std::size_t r = 0; r < repeat; ++r)
    for (std::size_t i = 0; i < extra_x.size(); ++i) {
      if (extra_x[i].size() != px) throw ShapeError("feedback sample is " + nn::shape_str(extra_x[i].shape()));
      x.insert(x.end(), extra_x[i].vec().begin(), extra_x[i].vec().end());
      y.push_back(extra_y[i]);
    }
  return {Tensor<float>({n, 1, h, w}, std::move(x)), std::move(y)};
}

}  // namespace detail

/// Retrain the current predictor, warm, on X_train plus the labeled
/// critical samples; keep it only if the frozen quality strictly improves.
inline ImprovementResult model_trainer_improver(const ServingModel& current, const FeedbackBatch& feedback,
                                                const Dataset& x_train, double q,
                                                const EvaluationSet& eval, const ImproverConfig& cfg,
                                                const ImproverLog& log = {}) {
  if (feedback.empty()) throw EmptyFeedback("no labeled feedback");
  if (feedback.kind != FeedbackKind::kLabels) throw InvalidSpec("model trainer expects label feedback");
  std::vector<Tensor<float>> fx;
  std::vector<int> fy;
  for (const auto& it : feedback.items) {
    if (!it.label) throw InvalidLabel("feedback item without a label");
    fx.push_back(it.sample);
    fy.push_back(*it.label);
  }
  auto [x, y] = detail::augmented(x_train, fx, fy, cfg.feedback_repeat);
  ServingModel cand = current;
  nn::fit_classifier(cand.predictor, x, y, cfg.retrain);
  double q2 = eval.quality(cand);
  return detail::gate(std::move(cand), q, q2, log);
}

/// Fit a denoiser on the (clean, corrupted) pairs, retrain on X_train plus
/// the corrupted samples (labelled with their matched clean sample's
/// label), wrap and gate. With `retrain_through_denoiser` the predictor is
/// retrained on denoised inputs, which is what it sees once wrapped.
inline ImprovementResult model_denoiser_wrapper_improver(const ServingModel& current,
                                                         const FeedbackBatch& feedback,
                                                         const Dataset& x_train, double q,
                                                         const EvaluationSet& eval,
                                                         const ImproverConfig& cfg,
                                                         const ImproverLog& log = {}) {
  if (feedback.empty()) throw EmptyFeedback("no matched pairs");
  if (feedback.kind != FeedbackKind::kPairs) throw InvalidSpec("denoiser wrapper expects pair feedback");
  const std::size_t h = x_train.height(), w = x_train.width(), px = h * w;
  std::vector<Tensor<float>> fx;
  std::vector<int> fy;
  std::vector<float> clean, noisy;
  for (const auto& it : feedback.items) {
    if (it.clean.size() != it.sample.size())
      throw PairingError("clean " + nn::shape_str(it.clean.shape()) + " vs corrupted " +
                         nn::shape_str(it.sample.shape()));
    if (!it.label) throw InvalidLabel("matched sample has no label");
    fx.push_back(it.sample);
    fy.push_back(*it.label);
  }
  for (std::size_t r = 0; r < std::max<std::size_t>(cfg.pair_repeat, 1); ++r)
    for (const auto& it : feedback.items) {
      clean.insert(clean.end(), it.clean.vec().begin(), it.clean.vec().end());
      noisy.insert(noisy.end(), it.sample.vec().begin(), it.sample.vec().end());
    }
  const std::size_t ident = std::min(cfg.identity_pairs, x_train.size());
  for (std::size_t i = 0; i < ident; ++i) {
    const float* s = x_train.images.data() + i * px;
    clean.insert(clean.end(), s, s + px);
    noisy.insert(noisy.end(), s, s + px);
  }
  const std::size_t pairs = clean.size() / px;

  ServingModel cand{current.predictor, std::nullopt};
  cand.denoiser = nn::train_denoiser(Tensor<float>({pairs, 1, h, w}, std::move(clean)),
                                     Tensor<float>({pairs, 1, h, w}, std::move(noisy)),
                                     cfg.denoiser_arch, cfg.denoiser);
  if (cand.denoiser->output_shape() != cand.predictor.input_shape())
    throw ShapeError("denoiser output does not fit the predictor");

  auto [x, y] = detail::augmented(x_train, fx, fy, cfg.feedback_repeat);
  if (cfg.retrain_through_denoiser) x = nn::forward_batched(*cand.denoiser, x);
  nn::fit_classifier(cand.predictor, x, y, cfg.retrain);
  double q2 = eval.quality(cand);
  return detail::gate(std::move(cand), q, q2, log);
}

}  // namespace scanflow
