#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/dataset.hpp"
#include "scanflow/drift.hpp"
#include "scanflow/error.hpp"
#include "scanflow/graph.hpp"
#include "scanflow/tracker.hpp"

namespace scanflow {

enum class TaskStatus { kPending, kLabeled, kSkipped };

inline std::string to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::kPending: return "pending";
    case TaskStatus::kLabeled: return "labeled";
    case TaskStatus::kSkipped: return "skipped";
  }
  return "pending";
}

inline TaskStatus task_status_from_string(const std::string& s) {
  if (s == "pending") return TaskStatus::kPending;
  if (s == "labeled" || s == "matched" || s == "resolved") return TaskStatus::kLabeled;
  if (s == "skipped") return TaskStatus::kSkipped;
  throw InvalidSpec("unknown task status '" + s + "'");
}

struct LabelTask {
  std::string task_id;
  std::string run_id;
  std::size_t rank = 0;
  std::size_t origin_index = 0;  // position in X_test
  std::vector<float> sample;
  TaskStatus status = TaskStatus::kPending;
  std::optional<int> label;
};

/// Corrupted sample plus nearest training candidates (ascending distance).
/// A resolved task is stored as kLabeled with match_index set.
struct FindTask {
  std::string task_id;
  std::string run_id;
  std::size_t rank = 0;
  std::size_t origin_index = 0;
  std::vector<float> corrupted_sample;
  std::vector<std::size_t> candidate_pool;  // indices into X_train
  std::vector<double> candidate_distances;
  TaskStatus status = TaskStatus::kPending;
  std::optional<std::size_t> match_index;
};

enum class FeedbackKind { kLabels, kPairs };

struct FeedbackItem {
  std::size_t origin_index = 0;
  Tensor<float> sample;                     // the critical (corrupted) observation [h,w]
  std::optional<int> label;
  std::optional<std::size_t> match_index;   // pairs: index into X_train
  Tensor<float> clean;                      // pairs: matched training image [h,w]
};

struct FeedbackBatch {
  FeedbackKind kind = FeedbackKind::kLabels;
  std::string run_id;
  std::vector<FeedbackItem> items;

  bool empty() const { return items.empty(); }
  std::size_t size() const { return items.size(); }
};

enum class Decision { kPending, kApproved, kRejected };

inline std::string to_string(Decision d) {
  switch (d) {
    case Decision::kPending: return "pending";
    case Decision::kApproved: return "approved";
    case Decision::kRejected: return "rejected";
  }
  return "pending";
}

struct PromotionRequest {
  std::string id;
  std::string run_id;
  std::string old_model_ref;
  std::string new_model_ref;
  double old_q = 0.0;
  double new_q = 0.0;
  Decision decision = Decision::kPending;
};

inline nlohmann::json to_json(const LabelTask& t, bool with_sample = true) {
  nlohmann::json j{{"task_id", t.task_id},   {"run_id", t.run_id},
                   {"rank", t.rank},         {"origin_index", t.origin_index},
                   {"status", to_string(t.status)}};
  j["label"] = t.label ? nlohmann::json(*t.label) : nlohmann::json(nullptr);
  if (with_sample) j["sample"] = t.sample;
  return j;
}

inline nlohmann::json to_json(const FindTask& t, bool with_sample = true) {
  nlohmann::json j{{"task_id", t.task_id},
                   {"run_id", t.run_id},
                   {"rank", t.rank},
                   {"origin_index", t.origin_index},
                   {"candidate_pool", t.candidate_pool},
                   {"candidate_distances", t.candidate_distances},
                   {"status", t.status == TaskStatus::kLabeled ? "matched" : to_string(t.status)}};
  j["match_index"] = t.match_index ? nlohmann::json(*t.match_index) : nlohmann::json(nullptr);
  if (with_sample) j["corrupted_sample"] = t.corrupted_sample;
  return j;
}

inline nlohmann::json to_json(const PromotionRequest& p) {
  return {{"id", p.id},           {"run_id", p.run_id}, {"old_model_ref", p.old_model_ref},
          {"new_model_ref", p.new_model_ref}, {"old_q", p.old_q}, {"new_q", p.new_q},
          {"delta", p.new_q - p.old_q},       {"decision", to_string(p.decision)}};
}

/// Indices of the `k` training images closest to `sample` in pixel space,
/// ascending by Euclidean distance (ties by lower index).
inline std::vector<std::pair<std::size_t, double>> nearest_neighbors(const Tensor<float>& pool,
                                                                     const float* sample,
                                                                     std::size_t k) {
  const std::size_t n = pool.dim(0), px = pool.size() / std::max<std::size_t>(n, 1);
  std::vector<std::pair<std::size_t, double>> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* p = pool.data() + i * px;
    double acc = 0.0;
    for (std::size_t j = 0; j < px; ++j) {
      double diff = static_cast<double>(p[j]) - static_cast<double>(sample[j]);
      acc += diff * diff;
    }
    d[i] = {i, std::sqrt(acc)};
  }
  k = std::min(k, n);
  std::partial_sort(d.begin(), d.begin() + static_cast<long>(k), d.end(),
                    [](const auto& a, const auto& b) {
                      return a.second != b.second ? a.second < b.second : a.first < b.first;
                    });
  d.resize(k);
  return d;
}

/// Human-in-the-loop queue for labeling and finding tasks plus the model
/// promotion gate.
///
/// Every state change is appended to `dir/journal.jsonl` before it is
/// acknowledged and replayed on construction, so a restart loses nothing.
/// All public calls are serialized by one mutex, which makes per-task
/// status transitions atomic.
class FeedbackService {
 public:
  explicit FeedbackService(fs::path dir, bool auto_approve = false)
      : dir_(std::move(dir)), auto_approve_(auto_approve) {
    fs::create_directories(dir_);
    replay();
  }

  bool auto_approve() const { return auto_approve_; }

  // -- labeling ------------------------------------------------------------

  std::vector<LabelTask> enqueue_labeling(const CriticalReport& report, const std::string& run_id) {
    if (report.empty()) throw EmptyCriticalSet("nothing to label for run '" + run_id + "'");
    std::lock_guard lock(mu_);
    auto fp = batch_fingerprint("labels", run_id, report.indices);
    if (batches_.contains(fp)) throw DuplicateBatch("report already enqueued for run " + run_id);
    nlohmann::json ev{{"ev", "enqueue_labels"}, {"run_id", run_id}, {"fp", fp}};
    ev["tasks"] = nlohmann::json::array();
    const std::size_t px = report.samples.size() / std::max<std::size_t>(report.size(), 1);
    for (std::size_t r = 0; r < report.size(); ++r) {
      LabelTask t;
      t.task_id = "L" + std::to_string(next_id_ + r);
      t.run_id = run_id;
      t.rank = r;
      t.origin_index = report.indices[r];
      t.sample.assign(report.samples.data() + r * px, report.samples.data() + (r + 1) * px);
      ev["tasks"].push_back(to_json(t));
    }
    commit(ev);
    return label_tasks_locked(run_id, std::nullopt);
  }

  std::vector<LabelTask> label_tasks(const std::string& run_id,
                                     std::optional<TaskStatus> status = std::nullopt) const {
    std::lock_guard lock(mu_);
    return label_tasks_locked(run_id, status);
  }

  LabelTask label_task(const std::string& task_id) const {
    std::lock_guard lock(mu_);
    auto it = label_tasks_.find(task_id);
    if (it == label_tasks_.end()) throw NotFound("label task '" + task_id + "'");
    return it->second;
  }

  LabelTask submit_label(const std::string& task_id, int label) {
    std::lock_guard lock(mu_);
    auto& t = label_task_locked(task_id);
    if (label < 0 || label > 9) throw InvalidLabel("label " + std::to_string(label));
    if (t.status != TaskStatus::kPending) throw Conflict(task_id + " is already " + to_string(t.status));
    commit({{"ev", "label"}, {"task_id", task_id}, {"label", label}});
    return label_tasks_.at(task_id);
  }

  LabelTask skip_label(const std::string& task_id) {
    std::lock_guard lock(mu_);
    auto& t = label_task_locked(task_id);
    if (t.status != TaskStatus::kPending) throw Conflict(task_id + " is already " + to_string(t.status));
    commit({{"ev", "skip_label"}, {"task_id", task_id}});
    return label_tasks_.at(task_id);
  }

  // -- finding -------------------------------------------------------------

  std::vector<FindTask> enqueue_finding(const CriticalReport& report, const Dataset& x_train,
                                        const std::string& run_id, std::size_t pool_size) {
    if (report.empty()) throw EmptyCriticalSet("nothing to match for run '" + run_id + "'");
    if (pool_size == 0) throw InvalidSpec("pool size must be >= 1");
    std::lock_guard lock(mu_);
    auto fp = batch_fingerprint("pairs", run_id, report.indices);
    if (batches_.contains(fp)) throw DuplicateBatch("report already enqueued for run " + run_id);
    nlohmann::json ev{{"ev", "enqueue_find"}, {"run_id", run_id}, {"fp", fp}};
    ev["tasks"] = nlohmann::json::array();
    const std::size_t px = x_train.height() * x_train.width();
    for (std::size_t r = 0; r < report.size(); ++r) {
      FindTask t;
      t.task_id = "F" + std::to_string(next_id_ + r);
      t.run_id = run_id;
      t.rank = r;
      t.origin_index = report.indices[r];
      const float* s = report.samples.data() + r * px;
      t.corrupted_sample.assign(s, s + px);
      for (auto [idx, dist] : nearest_neighbors(x_train.images, s, pool_size)) {
        t.candidate_pool.push_back(idx);
        t.candidate_distances.push_back(dist);
      }
      ev["tasks"].push_back(to_json(t));
    }
    if (!pools_.contains(run_id)) store_pool(run_id, x_train);
    commit(ev);
    return find_tasks_locked(run_id, std::nullopt);
  }

  std::vector<FindTask> find_tasks(const std::string& run_id,
                                   std::optional<TaskStatus> status = std::nullopt) const {
    std::lock_guard lock(mu_);
    return find_tasks_locked(run_id, status);
  }

  FindTask find_task(const std::string& task_id) const {
    std::lock_guard lock(mu_);
    auto it = find_tasks_.find(task_id);
    if (it == find_tasks_.end()) throw NotFound("find task '" + task_id + "'");
    return it->second;
  }

  FindTask submit_match(const std::string& task_id, std::size_t match_index) {
    std::lock_guard lock(mu_);
    auto& t = find_task_locked(task_id);
    if (t.status != TaskStatus::kPending) throw Conflict(task_id + " is already resolved");
    if (std::find(t.candidate_pool.begin(), t.candidate_pool.end(), match_index) ==
        t.candidate_pool.end())
      throw InvalidSpec("index " + std::to_string(match_index) + " is not in the candidate pool");
    commit({{"ev", "match"}, {"task_id", task_id}, {"match_index", match_index}});
    return find_tasks_.at(task_id);
  }

  FindTask skip_find(const std::string& task_id) {
    std::lock_guard lock(mu_);
    auto& t = find_task_locked(task_id);
    if (t.status != TaskStatus::kPending) throw Conflict(task_id + " is already resolved");
    commit({{"ev", "skip_find"}, {"task_id", task_id}});
    return find_tasks_.at(task_id);
  }

  // -- feedback ------------------------------------------------------------

  /// Completed items of one kind for a run, in rank order; skipped tasks
  /// are left out. Throws Incomplete while any task is still pending.
  FeedbackBatch collect_feedback(const std::string& run_id, FeedbackKind kind) const {
    std::lock_guard lock(mu_);
    FeedbackBatch b{kind, run_id, {}};
    std::size_t pending = 0;
    if (kind == FeedbackKind::kLabels) {
      for (const auto& t : label_tasks_locked(run_id, std::nullopt)) {
        if (t.status == TaskStatus::kPending) ++pending;
        if (t.status != TaskStatus::kLabeled) continue;
        auto side = static_cast<std::size_t>(std::lround(std::sqrt(t.sample.size())));
        b.items.push_back({t.origin_index, Tensor<float>({side, side}, t.sample), t.label,
                           std::nullopt, {}});
      }
    } else {
      for (const auto& t : find_tasks_locked(run_id, std::nullopt)) {
        if (t.status == TaskStatus::kPending) ++pending;
        if (t.status != TaskStatus::kLabeled) continue;
        const auto& pool = pools_.at(run_id);
        const std::size_t h = pool.height(), w = pool.width(), m = *t.match_index;
        std::vector<float> c(pool.images.data() + m * h * w, pool.images.data() + (m + 1) * h * w);
        FeedbackItem item{t.origin_index, Tensor<float>({h, w}, t.corrupted_sample), std::nullopt,
                          t.match_index, Tensor<float>({h, w}, std::move(c))};
        if (pool.labels) item.label = (*pool.labels)[m];
        b.items.push_back(std::move(item));
      }
    }
    if (pending) throw Incomplete(std::to_string(pending) + " task(s) still pending");
    return b;
  }

  // -- promotion -----------------------------------------------------------

  void set_active_model(const std::string& ref) {
    std::lock_guard lock(mu_);
    commit({{"ev", "set_active"}, {"ref", ref}});
  }

  std::optional<std::string> active_model() const {
    std::lock_guard lock(mu_);
    return active_;
  }

  /// Open a promotion; only strict improvements qualify. With auto-approve
  /// the request is approved immediately.
  PromotionRequest request_promotion(const std::string& old_ref, const std::string& new_ref,
                                     double old_q, double new_q, const std::string& run_id = {}) {
    if (!(new_q > old_q))
      throw NotAnImprovement(std::to_string(new_q) + " does not exceed " + std::to_string(old_q));
    std::string id;
    {
      std::lock_guard lock(mu_);
      id = "P" + std::to_string(next_id_);
      PromotionRequest p{id, run_id, old_ref, new_ref, old_q, new_q, Decision::kPending};
      commit({{"ev", "promotion"}, {"request", to_json(p)}});
    }
    if (auto_approve_) return resolve_promotion(id, Decision::kApproved);
    std::lock_guard lock(mu_);
    return promotions_.at(id);
  }

  PromotionRequest resolve_promotion(const std::string& id, Decision decision) {
    if (decision == Decision::kPending) throw InvalidSpec("decision must be approve or reject");
    std::lock_guard lock(mu_);
    auto it = promotions_.find(id);
    if (it == promotions_.end()) throw NotFound("promotion '" + id + "'");
    if (it->second.decision != Decision::kPending)
      throw Conflict(id + " is already " + to_string(it->second.decision));
    commit({{"ev", "resolve"}, {"id", id}, {"decision", to_string(decision)}});
    return promotions_.at(id);
  }

  std::vector<PromotionRequest> promotions() const {
    std::lock_guard lock(mu_);
    std::vector<PromotionRequest> out;
    for (const auto& id : promotion_order_) out.push_back(promotions_.at(id));
    return out;
  }

  ImprovementLedger ledger() const {
    std::lock_guard lock(mu_);
    return ledger_;
  }

  /// Training images the find tasks of a run index into.
  std::optional<Dataset> candidate_pool(const std::string& run_id) const {
    std::lock_guard lock(mu_);
    auto it = pools_.find(run_id);
    if (it == pools_.end()) return std::nullopt;
    return it->second;
  }

 private:
  static std::string batch_fingerprint(const std::string& kind, const std::string& run_id,
                                       const std::vector<std::size_t>& idx) {
    return sha256_hex(nlohmann::json{{"kind", kind}, {"run", run_id}, {"idx", idx}}.dump());
  }

  LabelTask& label_task_locked(const std::string& id) {
    auto it = label_tasks_.find(id);
    if (it == label_tasks_.end()) throw NotFound("label task '" + id + "'");
    return it->second;
  }

  FindTask& find_task_locked(const std::string& id) {
    auto it = find_tasks_.find(id);
    if (it == find_tasks_.end()) throw NotFound("find task '" + id + "'");
    return it->second;
  }

  std::vector<LabelTask> label_tasks_locked(const std::string& run_id,
                                            std::optional<TaskStatus> status) const {
    std::vector<LabelTask> out;
    auto it = label_order_.find(run_id);
    if (it == label_order_.end()) return out;
    for (const auto& id : it->second) {
      const auto& t = label_tasks_.at(id);
      if (!status || t.status == *status) out.push_back(t);
    }
    return out;
  }

  std::vector<FindTask> find_tasks_locked(const std::string& run_id,
                                          std::optional<TaskStatus> status) const {
    std::vector<FindTask> out;
    auto it = find_order_.find(run_id);
    if (it == find_order_.end()) return out;
    for (const auto& id : it->second) {
      const auto& t = find_tasks_.at(id);
      if (!status || t.status == *status) out.push_back(t);
    }
    return out;
  }

  fs::path pool_path(const std::string& run_id, const char* what) const {
    return dir_ / "pools" / (sha256_hex(run_id).substr(0, 16) + what);
  }

  void store_pool(const std::string& run_id, const Dataset& x_train) {
    fs::create_directories(dir_ / "pools");
    detail::write_file_atomic(pool_path(run_id, ".images.idx"),
                              serialize_idx(idx_from_images(x_train.images)));
    if (x_train.labels)
      detail::write_file_atomic(pool_path(run_id, ".labels.idx"),
                                serialize_idx(idx_from_labels(*x_train.labels)));
    pools_[run_id] = x_train;
  }

  void load_pool(const std::string& run_id) {
    if (pools_.contains(run_id)) return;
    auto images = pool_path(run_id, ".images.idx");
    if (!fs::exists(images)) throw IoError("candidate pool for run '" + run_id + "' is missing");
    Dataset d{parse_idx(read_binary(images)).images(), std::nullopt, run_id};
    auto labels = pool_path(run_id, ".labels.idx");
    if (fs::exists(labels)) d.labels = parse_idx(read_binary(labels)).labels();
    pools_[run_id] = std::move(d);
  }

  // Journal first, then apply.
  void commit(const nlohmann::json& ev) {
    detail::append_line(dir_ / "journal.jsonl", ev.dump());
    apply(ev);
  }

  void apply(const nlohmann::json& ev) {
    const auto kind = ev.at("ev").get<std::string>();
    if (kind == "enqueue_labels") {
      batches_.insert(ev.at("fp").get<std::string>());
      auto run = ev.at("run_id").get<std::string>();
      for (const auto& jt : ev.at("tasks")) {
        LabelTask t;
        t.task_id = jt.at("task_id").get<std::string>();
        t.run_id = run;
        t.rank = jt.at("rank").get<std::size_t>();
        t.origin_index = jt.at("origin_index").get<std::size_t>();
        t.sample = jt.at("sample").get<std::vector<float>>();
        label_order_[run].push_back(t.task_id);
        label_tasks_[t.task_id] = std::move(t);
        ++next_id_;
      }
    } else if (kind == "label") {
      auto& t = label_tasks_.at(ev.at("task_id").get<std::string>());
      t.status = TaskStatus::kLabeled;
      t.label = ev.at("label").get<int>();
    } else if (kind == "skip_label") {
      label_tasks_.at(ev.at("task_id").get<std::string>()).status = TaskStatus::kSkipped;
    } else if (kind == "enqueue_find") {
      batches_.insert(ev.at("fp").get<std::string>());
      auto run = ev.at("run_id").get<std::string>();
      load_pool(run);
      for (const auto& jt : ev.at("tasks")) {
        FindTask t;
        t.task_id = jt.at("task_id").get<std::string>();
        t.run_id = run;
        t.rank = jt.at("rank").get<std::size_t>();
        t.origin_index = jt.at("origin_index").get<std::size_t>();
        t.corrupted_sample = jt.at("corrupted_sample").get<std::vector<float>>();
        t.candidate_pool = jt.at("candidate_pool").get<std::vector<std::size_t>>();
        t.candidate_distances = jt.at("candidate_distances").get<std::vector<double>>();
        find_order_[run].push_back(t.task_id);
        find_tasks_[t.task_id] = std::move(t);
        ++next_id_;
      }
    } else if (kind == "match") {
      auto& t = find_tasks_.at(ev.at("task_id").get<std::string>());
      t.status = TaskStatus::kLabeled;
      t.match_index = ev.at("match_index").get<std::size_t>();
    } else if (kind == "skip_find") {
      find_tasks_.at(ev.at("task_id").get<std::string>()).status = TaskStatus::kSkipped;
    } else if (kind == "set_active") {
      active_ = ev.at("ref").get<std::string>();
    } else if (kind == "promotion") {
      const auto& r = ev.at("request");
      PromotionRequest p{r.at("id"),    r.at("run_id"), r.at("old_model_ref"), r.at("new_model_ref"),
                         r.at("old_q"), r.at("new_q"),  Decision::kPending};
      promotion_order_.push_back(p.id);
      promotions_[p.id] = std::move(p);
      ++next_id_;
    } else if (kind == "resolve") {
      auto& p = promotions_.at(ev.at("id").get<std::string>());
      bool approve = ev.at("decision").get<std::string>() == "approved";
      p.decision = approve ? Decision::kApproved : Decision::kRejected;
      if (approve) {
        active_ = p.new_model_ref;
        ledger_.append(p.run_id, p.new_q - p.old_q);
      }
    }
  }

  void replay() {
    auto path = dir_ / "journal.jsonl";
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::string line;
    std::size_t good = 0;
    bool torn = false;
    while (std::getline(in, line)) {
      bool complete = !in.eof();
      auto ev = nlohmann::json::parse(line, nullptr, false);
      if (!complete || ev.is_discarded()) {
        torn = true;
        break;
      }
      apply(ev);
      good += line.size() + 1;
    }
    in.close();
    if (torn) fs::resize_file(path, good);
  }

  fs::path dir_;
  bool auto_approve_;
  mutable std::mutex mu_;
  std::size_t next_id_ = 0;
  std::set<std::string> batches_;
  std::map<std::string, LabelTask> label_tasks_;
  std::map<std::string, std::vector<std::string>> label_order_;
  std::map<std::string, FindTask> find_tasks_;
  std::map<std::string, std::vector<std::string>> find_order_;
  std::map<std::string, Dataset> pools_;
  std::map<std::string, PromotionRequest> promotions_;
  std::vector<std::string> promotion_order_;
  std::optional<std::string> active_;
  ImprovementLedger ledger_;
};

}  // namespace scanflow
