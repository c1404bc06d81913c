#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/dataset.hpp"
#include "scanflow/drift.hpp"
#include "scanflow/feedback.hpp"
#include "scanflow/graph.hpp"
#include "scanflow/improver.hpp"
#include "scanflow/runtime.hpp"
#include "scanflow/tracker.hpp"

namespace scanflow {

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names{"baseline", "naive", "ddc_hlc", "rnd_hlc", "mdwi_hfc"};
  return names;
}

// ---------------------------------------------------------------------------
// Desk-scale data

struct DeskConfig {
  std::size_t train_n = 2000;
  std::size_t clean_n = 1000;
  std::size_t corrupted_per_kind = 250;
  std::size_t runtime_n = 1000;
  double runtime_clean_fraction = 0.5;  // share of runtime observations left uncorrupted
  std::size_t base_train = 1200;  // base digits rendered into train; the rest into the test sets
  int severity = 5;

  nlohmann::json to_json() const {
    return {{"train_n", train_n},
            {"clean_n", clean_n},
            {"corrupted_per_kind", corrupted_per_kind},
            {"runtime_n", runtime_n},
            {"runtime_clean_fraction", runtime_clean_fraction},
            {"base_train", base_train},
            {"severity", severity}};
  }
};

/// Everything a scenario reads. The runtime pool holds training images, a
/// share of them corrupted; `runtime_source` maps each back to its X_train
/// row and `runtime_kinds` names the corruption ("clean" if none).
struct DeskData {
  Dataset train;
  Dataset clean_test;
  Dataset corrupted_test;
  std::vector<CorruptionKind> corrupted_kinds;
  Dataset runtime;
  std::vector<std::string> runtime_kinds;
  std::vector<std::size_t> runtime_source;
};

inline std::filesystem::path default_data_dir() {
#ifdef SCANFLOW_DATA_DIR
  return SCANFLOW_DATA_DIR;
#else
  return "data";
#endif
}

/// The bundled 8x8 digit scans.
inline Dataset load_base_digits(const std::filesystem::path& dir) {
  auto d = load_idx_dataset(dir / "digits8-images-idx3-ubyte", dir / "digits8-labels-idx1-ubyte");
  d.name = "digits8";
  return d;
}

inline DeskData make_desk_data(const Dataset& base, const DeskConfig& cfg, std::uint64_t seed) {
  if (cfg.base_train >= base.size()) throw InvalidSpec("base_train leaves no test digits");
  std::mt19937_64 seeds(seed);
  auto [train_base, test_base] = split(base, cfg.base_train, base.size() - cfg.base_train, seeds());
  DeskData d;
  d.train = synthesize_digits(train_base, cfg.train_n, seeds());
  d.train.name = "train";
  d.clean_test = synthesize_digits(test_base, cfg.clean_n, seeds());
  d.clean_test.name = "clean";

  const std::size_t k = std::size(kAllCorruptions);
  auto raw = synthesize_digits(test_base, cfg.corrupted_per_kind * k, seeds());
  Dataset corrupted;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<std::size_t> rows(cfg.corrupted_per_kind);
    std::iota(rows.begin(), rows.end(), i * cfg.corrupted_per_kind);
    auto part = corrupt(raw.subset(rows), {kAllCorruptions[i], cfg.severity, seeds()});
    corrupted = corrupted.size() ? concat(corrupted, part) : part;
    d.corrupted_kinds.insert(d.corrupted_kinds.end(), rows.size(), kAllCorruptions[i]);
  }
  d.corrupted_test = std::move(corrupted);
  d.corrupted_test.name = "corrupted";

  std::vector<std::size_t> src(d.train.size());
  std::iota(src.begin(), src.end(), std::size_t{0});
  std::shuffle(src.begin(), src.end(), seeds);
  const std::size_t rn = std::min(cfg.runtime_n, src.size());
  const auto n_clean = static_cast<std::size_t>(std::lround(static_cast<double>(rn) * cfg.runtime_clean_fraction));
  src.resize(rn);
  std::vector<std::size_t> head(src.begin(), src.begin() + static_cast<long>(n_clean));
  Dataset runtime = d.train.subset(head);
  d.runtime_kinds.assign(n_clean, "clean");
  const std::size_t nc = rn - n_clean;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t lo = n_clean + nc * i / k, hi = n_clean + nc * (i + 1) / k;
    std::vector<std::size_t> rows(src.begin() + static_cast<long>(lo), src.begin() + static_cast<long>(hi));
    auto part = corrupt(d.train.subset(rows), {kAllCorruptions[i], cfg.severity, seeds()});
    runtime = runtime.size() ? concat(runtime, part) : part;
    d.runtime_kinds.insert(d.runtime_kinds.end(), rows.size(), to_string(kAllCorruptions[i]));
  }
  // interleave so the pool has no block structure
  std::vector<std::size_t> perm(rn);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), seeds);
  d.runtime = runtime.subset(perm);
  d.runtime.name = "runtime";
  std::vector<std::string> kinds;
  for (auto p : perm) {
    kinds.push_back(d.runtime_kinds[p]);
    d.runtime_source.push_back(src[p]);
  }
  d.runtime_kinds = std::move(kinds);
  return d;
}

// ---------------------------------------------------------------------------
// Scenario specification and results

struct ScenarioSpec {
  std::string name = "baseline";
  std::size_t n_labels = 50;
  std::uint64_t seed = 0;
  std::filesystem::path data_dir = default_data_dir();
  DeskConfig desk;
  bool simulated_human = true;

  nn::TrainConfig classifier{8, 32, 0.2, 0};
  nn::TrainConfig classifier_settle{5, 32, 0.02, 0};  // second pass at a lower lr; epochs 0 skips it
  nn::TrainConfig autoencoder{10, 32, 0.0005, 0};
  std::vector<nn::LayerSpec> autoencoder_arch = nn::autoencoder_small();
  ImproverConfig improver;
  std::size_t finder_pool = 8;  // candidates offered per find task; 0 = whole training set
  std::chrono::milliseconds human_timeout{std::chrono::hours(1)};

  void validate() const {
    if (std::find(scenario_names().begin(), scenario_names().end(), name) == scenario_names().end())
      throw InvalidConfig("unknown scenario '" + name + "'");
    if (name != "baseline" && n_labels == 0) throw InvalidConfig("n_labels must be >= 1");
  }

  /// Identifies the dataset and baseline: rows with equal keys are comparable.
  std::string comparison_key() const {
    nlohmann::json k{{"seed", seed},
                     {"desk", desk.to_json()},
                     {"data", std::filesystem::absolute(data_dir).lexically_normal().string()},
                     {"classifier", {classifier.epochs, classifier.batch_size, classifier.lr}},
                     {"settle", {classifier_settle.epochs, classifier_settle.batch_size, classifier_settle.lr}}};
    return sha256_hex(k.dump()).substr(0, 16);
  }
};

struct ScoreRow {
  std::string scenario;
  std::size_t n_labels = 0;
  std::uint64_t seed = 0;
  std::string key;
  double accuracy_clean = 0.0;
  double accuracy_corrupted = 0.0;  // mean over corruption kinds
  double accuracy_mean = 0.0;
  std::map<std::string, double> per_kind;
  double baseline_q = 0.0;
  std::optional<double> candidate_q;
  bool accepted = false;
  std::vector<std::size_t> selected;  // runtime pool rows shown to the human
  double return_value = 0.0;          // R(G) after the run
  std::string run_id;
  double seconds = 0.0;
};

inline ScoreRow make_row(std::string scenario, double clean, const std::map<std::string, double>& per_kind) {
  ScoreRow r;
  r.scenario = std::move(scenario);
  r.accuracy_clean = clean;
  r.per_kind = per_kind;
  double s = 0.0;
  for (const auto& [k, v] : per_kind) s += v;
  r.accuracy_corrupted = per_kind.empty() ? 0.0 : s / static_cast<double>(per_kind.size());
  r.accuracy_mean = (r.accuracy_clean + r.accuracy_corrupted) / 2.0;
  return r;
}

inline nlohmann::json to_json(const ScoreRow& r) {
  nlohmann::json j{{"scenario", r.scenario},
                   {"n_labels", r.n_labels},
                   {"seed", r.seed},
                   {"key", r.key},
                   {"accuracy_clean", r.accuracy_clean},
                   {"accuracy_corrupted", r.accuracy_corrupted},
                   {"accuracy_mean", r.accuracy_mean},
                   {"per_kind", r.per_kind},
                   {"baseline_q", r.baseline_q},
                   {"accepted", r.accepted},
                   {"selected", r.selected},
                   {"return", r.return_value},
                   {"run_id", r.run_id},
                   {"seconds", r.seconds}};
  j["candidate_q"] = r.candidate_q ? nlohmann::json(*r.candidate_q) : nlohmann::json(nullptr);
  return j;
}

inline ScoreRow score_row_from_json(const nlohmann::json& j) {
  ScoreRow r;
  r.scenario = j.at("scenario");
  r.n_labels = j.at("n_labels");
  r.seed = j.at("seed");
  r.key = j.value("key", "");
  r.accuracy_clean = j.at("accuracy_clean");
  r.accuracy_corrupted = j.at("accuracy_corrupted");
  r.accuracy_mean = j.at("accuracy_mean");
  r.per_kind = j.value("per_kind", std::map<std::string, double>{});
  r.baseline_q = j.value("baseline_q", 0.0);
  r.accepted = j.value("accepted", false);
  r.selected = j.value("selected", std::vector<std::size_t>{});
  r.return_value = j.value("return", 0.0);
  r.run_id = j.value("run_id", "");
  r.seconds = j.value("seconds", 0.0);
  if (j.contains("candidate_q") && !j["candidate_q"].is_null()) r.candidate_q = j["candidate_q"].get<double>();
  return r;
}

/// The row a finished run logged to the tracker.
inline ScoreRow load_score_row(TrackerClient& tracker, const std::string& run_id) {
  auto log = tracker.gather_log({run_id, std::string("scenario"), std::string("score_row.json"), MetaKind::kArtifactRef});
  if (log.empty()) throw NotFound("run '" + run_id + "' has no score row");
  auto ref = std::get<std::string>(log.back().value);
  return score_row_from_json(nlohmann::json::parse(tracker.fetch_artifact(ref)));
}

inline std::string format_table(const std::vector<ScoreRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %6s %6s %8s %10s %8s  %s\n", "scenario", "labels", "seed",
                "clean", "corrupted", "mean", "accepted");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %6zu %6llu %8.2f %10.2f %8.2f  %s\n", r.scenario.c_str(),
                  r.n_labels, static_cast<unsigned long long>(r.seed), 100 * r.accuracy_clean,
                  100 * r.accuracy_corrupted, 100 * r.accuracy_mean,
                  r.scenario == "baseline" ? "-" : (r.accepted ? "yes" : "no"));
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Comparison

struct PairDelta {
  std::string a, b;
  double delta = 0.0;  // metric(a) - metric(b)
};

struct OrderingReport {
  std::string metric;
  std::map<std::string, double> values;
  std::vector<PairDelta> deltas;
  bool holds = false;  // mdwi_hfc >= ddc_hlc >= rnd_hlc > baseline (within tolerance on >=)
  double tolerance = 0.0;
};

inline double metric_of(const ScoreRow& r, const std::string& metric) {
  if (metric == "mean") return r.accuracy_mean;
  if (metric == "clean") return r.accuracy_clean;
  if (metric == "corrupted") return r.accuracy_corrupted;
  throw InvalidConfig("unknown metric '" + metric + "'");
}

/// Pairwise deltas over rows sharing one dataset/seed (and n_labels for the
/// improved scenarios), plus whether the expected ordering holds.
inline OrderingReport compare(const std::vector<ScoreRow>& rows, const std::string& metric = "mean",
                              double tolerance = 0.0) {
  OrderingReport rep;
  rep.metric = metric;
  rep.tolerance = tolerance;
  std::optional<std::size_t> labels;
  for (const auto& r : rows) {
    if (r.key != rows.front().key) throw ConfigMismatch("rows come from different datasets or seeds");
    if (r.scenario != "baseline") {
      if (labels && *labels != r.n_labels) throw ConfigMismatch("rows use different n_labels");
      labels = r.n_labels;
    }
    if (rep.values.contains(r.scenario)) throw ConfigMismatch("scenario '" + r.scenario + "' appears twice");
    rep.values[r.scenario] = metric_of(r, metric);
  }
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j)
      if (i != j)
        rep.deltas.push_back({rows[i].scenario, rows[j].scenario,
                              metric_of(rows[i], metric) - metric_of(rows[j], metric)});
  auto v = [&](const char* s) -> std::optional<double> {
    auto it = rep.values.find(s);
    return it == rep.values.end() ? std::nullopt : std::optional<double>(it->second);
  };
  auto m = v("mdwi_hfc"), d = v("ddc_hlc"), r = v("rnd_hlc"), b = v("baseline");
  rep.holds = m && d && r && b && *m >= *d - tolerance && *d >= *r - tolerance && *r > *b;
  return rep;
}

inline nlohmann::json to_json(const OrderingReport& r) {
  nlohmann::json j{{"metric", r.metric}, {"values", r.values}, {"holds", r.holds}, {"tolerance", r.tolerance}};
  j["deltas"] = nlohmann::json::array();
  for (const auto& d : r.deltas) j["deltas"].push_back({{"a", d.a}, {"b", d.b}, {"delta", d.delta}});
  return j;
}

// ---------------------------------------------------------------------------
// Running

/// Shared across scenarios of one seed so the baseline and the reference
/// autoencoder are trained once.
struct ScenarioCache {
  std::map<std::string, std::shared_ptr<DeskData>> data;
  std::map<std::string, nn::ClassifierModel> baselines;
  std::map<std::string, std::unique_ptr<DriftDetector>> detectors;
};

struct ScenarioEnv {
  TrackerClient* tracker = nullptr;            // required
  std::filesystem::path shared_root;           // per-run directories are created below it
  FeedbackService* feedback = nullptr;         // required unless simulated_human
  ScenarioCache* cache = nullptr;              // optional
};

namespace detail {

inline std::map<std::string, double> per_kind_accuracy(ServingModel& m, const DeskData& d) {
  auto pred = m.predict(d.corrupted_test.batch());
  std::map<std::string, std::pair<std::size_t, std::size_t>> hit;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto& h = hit[to_string(d.corrupted_kinds[i])];
    h.first += pred[i] == d.corrupted_test.y()[i];
    h.second += 1;
  }
  std::map<std::string, double> out;
  for (const auto& [k, h] : hit) out[k] = static_cast<double>(h.first) / static_cast<double>(h.second);
  return out;
}

inline WorkflowGraph scenario_graph(const std::string& name) {
  WorkflowGraph g;
  auto task = [&](const std::string& id, NodeKind kind, const std::string& fn) {
    g.add_node({id, kind, "builtin:" + fn, {}, {}, {}});
  };
  task("tracker", NodeKind::kTracker, "noop");
  task("ingest", NodeKind::kTask, "ingest");
  task("train", NodeKind::kTask, "train");
  task("evaluate", NodeKind::kTask, "evaluate");
  g.add_edge({"ingest", "train", kDependsOn, Channel::kSharedVolume});
  std::string last = "train";
  if (name == "naive") {
    task("relabel", NodeKind::kTask, "naive_retrain");
    g.add_edge({"train", "relabel", kDependsOn, Channel::kSharedVolume});
    last = "relabel";
  } else if (name != "baseline") {
    bool ddc = name != "rnd_hlc";
    task("select", ddc ? NodeKind::kChecker : NodeKind::kTask, ddc ? "drift_detector" : "random_select");
    task("human", NodeKind::kChecker, name == "mdwi_hfc" ? "human_finder" : "human_labeler");
    task("improve", NodeKind::kImprover, name == "mdwi_hfc" ? "denoiser_wrapper" : "model_trainer");
    g.add_edge({"ingest", "select", kDependsOn, Channel::kSharedVolume});
    g.add_edge({"train", "select", kDependsOn, Channel::kSharedVolume});
    g.add_edge({"select", "human", kDependsOn, Channel::kSharedVolume});
    g.add_edge({"human", "improve", kDependsOn, Channel::kSharedVolume});
    last = "improve";
  }
  g.add_edge({last, "evaluate", kDependsOn, Channel::kSharedVolume});
  for (const auto& n : g.nodes())
    if (n.id != "tracker") g.add_edge({n.id, "tracker", "log", Channel::kTrackerQuery});
  return g;
}

}  // namespace detail

/// Run one scenario end to end as a workflow graph. The returned row is
/// also logged to the tracker as metrics and a score_row.json artifact.
inline ScoreRow run_scenario(const ScenarioSpec& spec, const ScenarioEnv& env) {
  spec.validate();
  if (!env.tracker) throw ConfigError("scenario needs a tracker");
  if (!spec.simulated_human && !env.feedback)
    throw TrackerUnavailable("live mode needs a reachable feedback service");
  const auto started = std::chrono::steady_clock::now();

  ScenarioCache local_cache;
  ScenarioCache& cache = env.cache ? *env.cache : local_cache;
  const std::string key = spec.comparison_key();
  const std::string run_id = spec.name + "-n" + std::to_string(spec.n_labels) + "-s" +
                             std::to_string(spec.seed) + "-" + key.substr(0, 8) + "-" +
                             std::to_string(std::chrono::system_clock::now().time_since_epoch().count());
  auto& tracker = *env.tracker;

  std::unique_ptr<FeedbackService> own_feedback;
  FeedbackService* feedback = env.feedback;
  if (!feedback) {
    own_feedback = std::make_unique<FeedbackService>(env.shared_root / run_id / "feedback", true);
    feedback = own_feedback.get();
  }

  // State handed between nodes. Nodes also leave their outputs as files in
  // their working directories.
  std::shared_ptr<DeskData> data;
  ServingModel model;
  double q0 = 0.0;
  std::optional<EvaluationSet> eval;
  std::optional<CriticalReport> report;
  std::optional<FeedbackBatch> batch;
  std::optional<ImprovementResult> improvement;
  ScoreRow row;

  auto node_dir = [&](const ExecutionContext& ctx, const NodeSpec& n) {
    return std::filesystem::absolute(ctx.shared_root) / n.id;
  };

  BuiltinExecutor exec;
  exec.register_task("noop", [](const NodeSpec&, const ExecutionContext&) {});
  exec.register_task("ingest", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    auto& slot = cache.data[key];
    if (!slot) slot = std::make_shared<DeskData>(make_desk_data(load_base_digits(spec.data_dir), spec.desk, spec.seed));
    data = slot;
    eval = EvaluationSet::from(data->clean_test, data->corrupted_test);
    write_binary(node_dir(ctx, n) / "runtime.idx", serialize_idx(idx_from_images(data->runtime.images)));
    tracker.save_metadata({metric(n.id, "data/train", static_cast<double>(data->train.size())),
                           metric(n.id, "data/clean", static_cast<double>(data->clean_test.size())),
                           metric(n.id, "data/corrupted", static_cast<double>(data->corrupted_test.size())),
                           metric(n.id, "data/runtime", static_cast<double>(data->runtime.size())),
                           param(n.id, "data/severity", std::to_string(spec.desk.severity))},
                          ctx.run_id);
  });
  exec.register_task("train", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    auto it = cache.baselines.find(key);
    if (it == cache.baselines.end()) {
      auto cfg = spec.classifier;
      cfg.seed = spec.seed;
      auto m = nn::train_classifier(data->train.batch(), data->train.y(), nn::classifier_small(), cfg);
      auto settle = spec.classifier_settle;
      settle.seed = spec.seed + 1;
      nn::fit_classifier(m, data->train.batch(), data->train.y(), settle);
      it = cache.baselines.emplace(key, std::move(m)).first;
    }
    model = ServingModel{it->second, std::nullopt};
    q0 = eval->quality(model);
    auto ref = tracker.log_artifact(ctx.run_id, n.id, "model.bin", model.serialize());
    if (feedback->active_model() != ref) feedback->set_active_model(ref);
    tracker.save_metadata({metric(n.id, "model/q", q0)}, ctx.run_id);
  });
  exec.register_task("naive_retrain", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    auto pseudo = model.predict(data->runtime.batch());
    FeedbackBatch b{FeedbackKind::kLabels, ctx.run_id, {}};
    const std::size_t h = data->runtime.height(), w = data->runtime.width();
    for (std::size_t i = 0; i < data->runtime.size(); ++i) {
      std::vector<float> px(data->runtime.images.data() + i * h * w, data->runtime.images.data() + (i + 1) * h * w);
      b.items.push_back({i, Tensor<float>({h, w}, std::move(px)), pseudo[i], std::nullopt, {}});
    }
    // Naive has no checker or gate: the retrained model replaces the old one.
    auto res = model_trainer_improver(model, b, data->train, -1.0, *eval, spec.improver, {&tracker, ctx.run_id, n.id});
    model = std::move(*res.model);
  });
  exec.register_task("drift_detector", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    auto& det = cache.detectors[key];
    auto sel = SelectorConfig{};
    sel.n_critical = spec.n_labels;
    sel.seed = spec.seed;
    if (!det) {
      auto cfg = spec.autoencoder;
      cfg.seed = spec.seed;
      det = std::make_unique<DriftDetector>(spec.autoencoder_arch, cfg, sel);
    }
    det->selector_config() = sel;
    report = det->check(data->train, data->runtime);
    log_report(tracker, ctx.run_id, n.id, *report);
    write_binary(node_dir(ctx, n) / "critical_report.json", to_json(*report).dump());
  });
  exec.register_task("random_select", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    std::vector<std::size_t> idx(data->runtime.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(spec.seed ^ 0x5eedULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(spec.n_labels, idx.size()));
    CriticalReport r;
    r.indices = idx;
    r.samples = data->runtime.images.gather(idx);
    r.flagged = idx.size();
    report = r;
    log_report(tracker, ctx.run_id, n.id, *report);
  });

  auto wait_for = [&](FeedbackKind kind) {
    auto deadline = std::chrono::steady_clock::now() + spec.human_timeout;
    for (;;) {
      try {
        return feedback->collect_feedback(run_id, kind);
      } catch (const Incomplete&) {
        if (std::chrono::steady_clock::now() > deadline) throw Timeout("waiting for human feedback");
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
      }
    }
  };

  exec.register_task("human_labeler", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    auto tasks = feedback->enqueue_labeling(*report, ctx.run_id);
    if (spec.simulated_human)
      for (const auto& t : tasks) feedback->submit_label(t.task_id, data->runtime.y()[t.origin_index]);
    batch = wait_for(FeedbackKind::kLabels);
    tracker.save_metadata({metric(n.id, "feedback/items", static_cast<double>(batch->size()))}, ctx.run_id);
  });
  exec.register_task("human_finder", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    std::size_t pool = spec.finder_pool ? spec.finder_pool : data->train.size();
    if (spec.simulated_human) pool = data->train.size();
    auto tasks = feedback->enqueue_finding(*report, data->train, ctx.run_id, pool);
    if (spec.simulated_human)
      for (const auto& t : tasks) feedback->submit_match(t.task_id, data->runtime_source[t.origin_index]);
    batch = wait_for(FeedbackKind::kPairs);
    tracker.save_metadata({metric(n.id, "feedback/items", static_cast<double>(batch->size()))}, ctx.run_id);
  });

  auto improve = [&](bool denoise, const NodeSpec& n, const ExecutionContext& ctx) {
    if (batch->empty()) throw EmptyFeedback("every task was skipped");
    ImproverConfig icfg = spec.improver;
    icfg.retrain.seed = spec.seed;
    icfg.denoiser.seed = spec.seed;
    ImproverLog log{&tracker, ctx.run_id, n.id};
    improvement = denoise ? model_denoiser_wrapper_improver(model, *batch, data->train, q0, *eval, icfg, log)
                          : model_trainer_improver(model, *batch, data->train, q0, *eval, icfg, log);
    if (!improvement->accepted) return;
    auto old_ref = feedback->active_model().value_or("");
    auto req = feedback->request_promotion(old_ref, *improvement->new_model_ref, q0, *improvement->new_q, ctx.run_id);
    if (!spec.simulated_human && req.decision == Decision::kPending) {
      auto deadline = std::chrono::steady_clock::now() + spec.human_timeout;
      while (req.decision == Decision::kPending) {
        if (std::chrono::steady_clock::now() > deadline) throw Timeout("waiting for promotion decision");
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
        for (const auto& p : feedback->promotions())
          if (p.id == req.id) req = p;
      }
    }
    if (req.decision == Decision::kApproved) model = *improvement->model;
  };
  exec.register_task("model_trainer", [&](const NodeSpec& n, const ExecutionContext& ctx) { improve(false, n, ctx); });
  exec.register_task("denoiser_wrapper", [&](const NodeSpec& n, const ExecutionContext& ctx) { improve(true, n, ctx); });

  exec.register_task("evaluate", [&](const NodeSpec& n, const ExecutionContext& ctx) {
    double clean = model.evaluate(data->clean_test.batch(), data->clean_test.y());
    row = make_row(spec.name, clean, detail::per_kind_accuracy(model, *data));
    std::vector<MetadataInput> m{metric(n.id, "score/accuracy_clean", row.accuracy_clean),
                                 metric(n.id, "score/accuracy_corrupted", row.accuracy_corrupted),
                                 metric(n.id, "score/accuracy_mean", row.accuracy_mean)};
    for (const auto& [k, v] : row.per_kind) m.push_back(metric(n.id, "score/corrupted/" + k, v));
    tracker.save_metadata(std::move(m), ctx.run_id);
  });

  auto graph = detail::scenario_graph(spec.name);
  ExecutionContext ctx{run_id, env.shared_root / run_id, tracker.endpoint(), {}};
  tracker.save_metadata({param("scenario", "name", spec.name),
                         param("scenario", "n_labels", std::to_string(spec.n_labels)),
                         param("scenario", "seed", std::to_string(spec.seed)),
                         param("scenario", "key", key),
                         tag("scenario", "human", spec.simulated_human ? "simulated" : "live")},
                        run_id);
  tracker.log_artifact(run_id, "scenario", "workflow.json", to_json(graph).dump(2));
  auto results = run_workflow(graph, ctx, tracker, exec);
  for (const auto& r : results)
    if (!r.ok()) throw Error("node " + r.node_id + " failed: " + r.log_excerpt);

  row.n_labels = spec.name == "baseline" ? 0 : spec.n_labels;
  row.seed = spec.seed;
  row.key = key;
  row.baseline_q = q0;
  row.run_id = run_id;
  if (improvement) {
    row.candidate_q = improvement->candidate_q;
    row.accepted = improvement->accepted;
  }
  if (report) row.selected = report->indices;
  row.return_value = return_function(feedback->ledger());
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  tracker.log_artifact(run_id, "scenario", "score_row.json", to_json(row).dump(2));
  return row;
}

}  // namespace scanflow
