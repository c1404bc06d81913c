#include <atomic>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "scanflow/feedback.hpp"
#include "support.hpp"

using namespace scanflow;

namespace {

// Report over a 4x4 "test set": sample r is filled with value (idx+1)/100.
CriticalReport report(std::vector<std::size_t> idx, std::size_t side = 4) {
  CriticalReport r;
  r.indices = idx;
  r.samples = Tensor<float>({idx.size(), side, side});
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t p = 0; p < side * side; ++p)
      r.samples[k * side * side + p] = static_cast<float>(idx[k] + 1) / 100.0f;
  return r;
}

// Training pool of n 4x4 images, image i is constant i/100, label i % 10.
Dataset pool(std::size_t n) {
  Dataset d{Tensor<float>({n, 4, 4}), std::vector<int>(n), "pool"};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < 16; ++p) d.images[i * 16 + p] = static_cast<float>(i) / 100.0f;
    (*d.labels)[i] = static_cast<int>(i % 10);
  }
  return d;
}

}  // namespace

TEST(NearestNeighbors, SortedByDistanceTiesToLowerIndex) {
  // Quarter steps are exact in float, so the 4/5 and 3/6 ties are real.
  Tensor<float> p({10, 4, 4});
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(i / 16) * 0.25f;
  std::vector<float> s(16, 1.125f);
  auto nn = nearest_neighbors(p, s.data(), 4);
  ASSERT_EQ(nn.size(), 4u);
  EXPECT_EQ(nn[0].first, 4u);
  EXPECT_EQ(nn[1].first, 5u);
  EXPECT_EQ(nn[2].first, 3u);
  EXPECT_EQ(nn[3].first, 6u);
  EXPECT_EQ(nn[0].second, 0.5);
  EXPECT_EQ(nn[2].second, 1.5);
  EXPECT_EQ(nearest_neighbors(p, s.data(), 99).size(), 10u);
}

TEST(Feedback, LabelingLifecycle) {
  test::TempDir dir;
  FeedbackService fs(dir.path());
  auto tasks = fs.enqueue_labeling(report({7, 2, 9}), "run-a");
  ASSERT_EQ(tasks.size(), 3u);
  EXPECT_EQ(tasks[0].origin_index, 7u);
  EXPECT_EQ(tasks[1].rank, 1u);
  EXPECT_FLOAT_EQ(tasks[2].sample[0], 0.10f);
  EXPECT_THROW(fs.collect_feedback("run-a", FeedbackKind::kLabels), Incomplete);
  fs.submit_label(tasks[0].task_id, 3);
  fs.skip_label(tasks[1].task_id);
  EXPECT_THROW(fs.submit_label(tasks[2].task_id, 10), InvalidLabel);
  EXPECT_THROW(fs.submit_label(tasks[2].task_id, -1), InvalidLabel);
  EXPECT_EQ(fs.label_tasks("run-a", TaskStatus::kPending).size(), 1u);
  fs.submit_label(tasks[2].task_id, 0);
  EXPECT_THROW(fs.submit_label(tasks[0].task_id, 4), Conflict);
  EXPECT_THROW(fs.skip_label(tasks[1].task_id), Conflict);
  EXPECT_THROW(fs.submit_label("L999", 1), NotFound);
  auto fb = fs.collect_feedback("run-a", FeedbackKind::kLabels);
  ASSERT_EQ(fb.size(), 2u);
  EXPECT_EQ(fb.items[0].origin_index, 7u);
  EXPECT_EQ(*fb.items[0].label, 3);
  EXPECT_EQ(fb.items[1].origin_index, 9u);
  EXPECT_EQ(fb.items[1].sample.shape(), (nn::Shape{4, 4}));
  EXPECT_TRUE(fs.collect_feedback("other", FeedbackKind::kLabels).empty());
}

TEST(Feedback, EmptyAndDuplicateBatchesRejected) {
  test::TempDir dir;
  FeedbackService fs(dir.path());
  EXPECT_THROW(fs.enqueue_labeling(CriticalReport{}, "r"), EmptyCriticalSet);
  fs.enqueue_labeling(report({1, 2}), "r");
  EXPECT_THROW(fs.enqueue_labeling(report({1, 2}), "r"), DuplicateBatch);
  EXPECT_NO_THROW(fs.enqueue_labeling(report({1, 2}), "r2"));
  EXPECT_NO_THROW(fs.enqueue_labeling(report({1, 3}), "r"));
  EXPECT_THROW(fs.enqueue_finding(CriticalReport{}, pool(5), "r", 3), EmptyCriticalSet);
  EXPECT_THROW(fs.enqueue_finding(report({1}), pool(5), "r", 0), InvalidSpec);
}

TEST(Feedback, FindingYieldsPairsWithMatchedLabels) {
  test::TempDir dir;
  FeedbackService fs(dir.path());
  auto tasks = fs.enqueue_finding(report({12, 30}), pool(40), "run-f", 3);
  ASSERT_EQ(tasks.size(), 2u);
  // Sample 12 is constant 0.13, closest pool images are 13, 12, 14.
  EXPECT_EQ(tasks[0].candidate_pool, (std::vector<std::size_t>{13, 12, 14}));
  EXPECT_THROW(fs.submit_match(tasks[0].task_id, 20), InvalidSpec);
  fs.submit_match(tasks[0].task_id, 12);
  EXPECT_THROW(fs.collect_feedback("run-f", FeedbackKind::kPairs), Incomplete);
  fs.skip_find(tasks[1].task_id);
  EXPECT_THROW(fs.submit_match(tasks[1].task_id, 31), Conflict);
  auto fb = fs.collect_feedback("run-f", FeedbackKind::kPairs);
  ASSERT_EQ(fb.size(), 1u);
  EXPECT_EQ(fb.kind, FeedbackKind::kPairs);
  EXPECT_EQ(*fb.items[0].match_index, 12u);
  EXPECT_EQ(*fb.items[0].label, 2);
  EXPECT_FLOAT_EQ(fb.items[0].clean[0], 0.12f);
  EXPECT_FLOAT_EQ(fb.items[0].sample[0], 0.13f);
  ASSERT_TRUE(fs.candidate_pool("run-f"));
  EXPECT_EQ(fs.candidate_pool("run-f")->size(), 40u);
  EXPECT_FALSE(fs.candidate_pool("nope"));
}

TEST(Feedback, PromotionGateIsStrict) {
  test::TempDir dir;
  FeedbackService fs(dir.path());
  EXPECT_THROW(fs.request_promotion("a", "b", 0.9, 0.9), NotAnImprovement);
  EXPECT_THROW(fs.request_promotion("a", "b", 0.9, 0.8), NotAnImprovement);
  EXPECT_THROW(fs.request_promotion("a", "b", 0.9, NAN), NotAnImprovement);
  auto p = fs.request_promotion("a", "b", 0.9, 0.95, "r1");
  EXPECT_EQ(p.decision, Decision::kPending);
  EXPECT_FALSE(fs.active_model());
  auto q = fs.request_promotion("a", "c", 0.9, 0.91, "r2");
  fs.resolve_promotion(p.id, Decision::kApproved);
  fs.resolve_promotion(q.id, Decision::kRejected);
  EXPECT_THROW(fs.resolve_promotion(p.id, Decision::kRejected), Conflict);
  EXPECT_THROW(fs.resolve_promotion("P404", Decision::kApproved), NotFound);
  EXPECT_THROW(fs.resolve_promotion(q.id, Decision::kPending), InvalidSpec);
  EXPECT_EQ(fs.active_model(), "b");
  auto ledger = fs.ledger();
  ASSERT_EQ(ledger.entries().size(), 1u);
  EXPECT_NEAR(return_function(ledger), 0.05, 1e-12);
  EXPECT_EQ(fs.promotions().size(), 2u);
}

TEST(Feedback, AutoApprove) {
  test::TempDir dir;
  FeedbackService fs(dir.path(), true);
  fs.set_active_model("m0");
  auto p = fs.request_promotion("m0", "m1", 0.5, 0.6, "r");
  EXPECT_EQ(p.decision, Decision::kApproved);
  EXPECT_EQ(fs.active_model(), "m1");
}

TEST(Feedback, RestartReplaysJournal) {
  test::TempDir dir;
  std::string lid, fid, pid;
  {
    FeedbackService fs(dir.path());
    auto l = fs.enqueue_labeling(report({1, 2, 3}), "r");
    fs.submit_label(l[0].task_id, 5);
    fs.skip_label(l[1].task_id);
    lid = l[2].task_id;
    auto f = fs.enqueue_finding(report({4}), pool(10), "r", 2);
    fid = f[0].task_id;
    fs.set_active_model("m0");
    pid = fs.request_promotion("m0", "m1", 0.1, 0.2, "r").id;
  }
  FeedbackService fs(dir.path());
  EXPECT_EQ(fs.label_tasks("r", TaskStatus::kLabeled).size(), 1u);
  EXPECT_EQ(fs.label_tasks("r", TaskStatus::kSkipped).size(), 1u);
  EXPECT_EQ(fs.label_task(lid).status, TaskStatus::kPending);
  EXPECT_EQ(fs.active_model(), "m0");
  fs.submit_label(lid, 1);
  fs.submit_match(fid, fs.find_task(fid).candidate_pool[1]);
  fs.resolve_promotion(pid, Decision::kApproved);
  EXPECT_THROW(fs.enqueue_labeling(report({1, 2, 3}), "r"), DuplicateBatch);
  // Fresh ids continue after the replayed ones.
  auto more = fs.enqueue_labeling(report({8}), "r");
  EXPECT_NE(more[0].task_id, lid);
  EXPECT_THROW(fs.label_task("L12345"), NotFound);

  FeedbackService again(dir.path());
  EXPECT_EQ(again.active_model(), "m1");
  auto pairs = again.collect_feedback("r", FeedbackKind::kPairs);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs.items[0].clean.size(), 16u);
  EXPECT_EQ(again.label_tasks("r").size(), 4u);
}

TEST(Feedback, TornJournalTailDropped) {
  test::TempDir dir;
  {
    FeedbackService fs(dir.path());
    fs.enqueue_labeling(report({1}), "r");
  }
  {
    std::ofstream out(dir / "journal.jsonl", std::ios::app);
    out << R"({"ev":"label","task_id":"L0","la)";
  }
  FeedbackService fs(dir.path());
  EXPECT_EQ(fs.label_task("L0").status, TaskStatus::kPending);
  fs.submit_label("L0", 4);
  FeedbackService again(dir.path());
  EXPECT_EQ(*again.label_task("L0").label, 4);
}

// Many threads race to answer the same tasks; each task is answered
// exactly once and the journal replays to the same state.
TEST(Feedback, ConcurrentAnswersResolveOnce) {
  test::TempDir dir;
  std::vector<std::size_t> idx(40);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::atomic<int> wins{0}, conflicts{0};
  std::vector<LabelTask> tasks;
  {
    FeedbackService fs(dir.path());
    tasks = fs.enqueue_labeling(report(idx), "r");
    std::vector<std::thread> ts;
    for (int t = 0; t < 4; ++t)
      ts.emplace_back([&, t] {
        std::mt19937_64 rng(t);
        auto order = tasks;
        std::shuffle(order.begin(), order.end(), rng);
        for (const auto& task : order) {
          try {
            if (rng() % 5 == 0)
              fs.skip_label(task.task_id);
            else
              fs.submit_label(task.task_id, t);
            ++wins;
          } catch (const Conflict&) {
            ++conflicts;
          }
        }
      });
    for (auto& t : ts) t.join();
    EXPECT_EQ(wins.load(), 40);
    EXPECT_EQ(conflicts.load(), 120);
    EXPECT_TRUE(fs.label_tasks("r", TaskStatus::kPending).empty());
  }
  FeedbackService a(dir.path()), b(dir.path());
  for (const auto& t : tasks) {
    EXPECT_EQ(a.label_task(t.task_id).status, b.label_task(t.task_id).status);
    EXPECT_EQ(a.label_task(t.task_id).label, b.label_task(t.task_id).label);
  }
}

TEST(Feedback, JsonViews) {
  LabelTask t{"L1", "r", 0, 3, {0.5f}, TaskStatus::kLabeled, 7};
  auto j = to_json(t, false);
  EXPECT_EQ(j["status"], "labeled");
  EXPECT_EQ(j["label"], 7);
  EXPECT_FALSE(j.contains("sample"));
  EXPECT_EQ(task_status_from_string("matched"), TaskStatus::kLabeled);
  EXPECT_THROW(task_status_from_string("done"), InvalidSpec);
}
