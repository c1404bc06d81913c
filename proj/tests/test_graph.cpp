#include <map>
#include <random>

#include <gtest/gtest.h>

#include "scanflow/graph.hpp"
#include "support.hpp"

using namespace scanflow;

namespace {

NodeSpec task(std::string id, NodeKind k = NodeKind::kTask) {
  NodeSpec n;
  n.id = std::move(id);
  n.kind = k;
  n.command = "true";
  return n;
}

// Random DAG: depends-on edges only go from lower to higher index, plus
// some non-dependency edges in arbitrary directions.
WorkflowGraph random_dag(std::mt19937_64& rng, std::size_t n, double p) {
  WorkflowGraph g;
  for (std::size_t i = 0; i < n; ++i) g.add_node(task("n" + std::to_string(i)));
  std::bernoulli_distribution edge(p);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (edge(rng)) g.add_edge({"n" + std::to_string(i), "n" + std::to_string(j)});
  for (std::size_t k = 0; k < n / 2; ++k)
    g.add_edge({"n" + std::to_string(pick(rng)), "n" + std::to_string(pick(rng)), "log",
                Channel::kTrackerQuery});
  return g;
}

}  // namespace

TEST(Graph, AddNodeRejectsDuplicatesAndEmptyIds) {
  WorkflowGraph g;
  g.add_node(task("a"));
  EXPECT_THROW(g.add_node(task("a")), DuplicateNode);
  EXPECT_THROW(g.add_node(task("")), ConfigError);
  EXPECT_EQ(g.node_count(), 1u);
}

TEST(Graph, EdgesNeedKnownEndpoints) {
  WorkflowGraph g;
  g.add_node(task("a"));
  EXPECT_THROW(g.add_edge({"a", "b"}), UnknownNode);
  EXPECT_THROW(g.add_edge({"x", "a"}), UnknownNode);
}

TEST(Graph, DependencyCyclesRejectedAtInsertion) {
  WorkflowGraph g;
  for (auto id : {"a", "b", "c"}) g.add_node(task(id));
  g.add_edge({"a", "b"});
  g.add_edge({"b", "c"});
  EXPECT_THROW(g.add_edge({"c", "a"}), CycleDetected);
  EXPECT_THROW(g.add_edge({"a", "a"}), CycleDetected);
  EXPECT_EQ(g.edge_count(), 2u);
  // Non-dependency edges may point backwards.
  EXPECT_NO_THROW(g.add_edge({"c", "a", "log", Channel::kTrackerQuery}));
  EXPECT_NO_THROW(g.execution_plan());
}

TEST(Graph, ParallelEdgesKeptApart) {
  WorkflowGraph g;
  g.add_node(task("a")).add_node(task("b"));
  auto e1 = g.add_edge({"a", "b"});
  auto e2 = g.add_edge({"a", "b", "train"});
  auto e3 = g.add_edge({"a", "b"});
  EXPECT_NE(e1, e3);
  EXPECT_EQ(g.endpoints(e1), g.endpoints(e3));
  EXPECT_EQ(g.edge_label(e2), "train");
  EXPECT_EQ(g.edge_count(), 3u);
  EXPECT_TRUE(g.edge_labels().contains("train"));
}

TEST(Graph, ClosedAlphabetsRejectUnknownLabels) {
  WorkflowGraph g({NodeKind::kTask, NodeKind::kTracker}, {kDependsOn});
  g.add_node(task("a"));
  g.add_node(task("t", NodeKind::kTracker));
  EXPECT_THROW(g.add_node(task("c", NodeKind::kChecker)), ConfigError);
  EXPECT_THROW(g.add_edge({"a", "t", "log"}), ConfigError);
  EXPECT_NO_THROW(g.add_edge({"a", "t"}));
}

TEST(Graph, LabelingsAndNeighbors) {
  WorkflowGraph g;
  g.add_node(task("train"));
  g.add_node(task("tracker", NodeKind::kTracker));
  g.add_node(task("checker", NodeKind::kChecker));
  g.add_node(task("improver", NodeKind::kImprover));
  g.add_edge({"train", "checker"});
  g.add_edge({"checker", "improver"});
  g.add_edge({"train", "tracker", "log", Channel::kTrackerQuery});
  EXPECT_EQ(g.node_label("checker"), NodeKind::kChecker);
  EXPECT_EQ(g.nodes_of_kind(NodeKind::kImprover), std::vector<std::string>{"improver"});
  EXPECT_EQ(g.neighbors("train", Direction::kSuccessors),
            (std::set<std::string>{"checker", "tracker"}));
  EXPECT_EQ(g.neighbors("improver", Direction::kPredecessors), (std::set<std::string>{"checker"}));
  EXPECT_THROW(g.neighbors("nope", Direction::kSuccessors), UnknownNode);
}

TEST(Graph, PlanStagesAreSortedLayers) {
  WorkflowGraph g;
  for (auto id : {"d", "c", "b", "a"}) g.add_node(task(id));
  g.add_edge({"a", "c"});
  g.add_edge({"b", "c"});
  g.add_edge({"c", "d"});
  std::vector<std::vector<std::string>> want{{"a", "b"}, {"c"}, {"d"}};
  EXPECT_EQ(g.execution_plan(), want);
}

TEST(Graph, EmptyGraphHasEmptyPlan) {
  EXPECT_TRUE(WorkflowGraph{}.execution_plan().empty());
}

TEST(Graph, RandomDagPlansRespectEveryDependency) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 1 + rng() % 30;
    auto g = random_dag(rng, n, 0.15);
    auto plan = g.execution_plan();
    std::map<std::string, std::size_t> stage;
    std::size_t placed = 0;
    for (std::size_t s = 0; s < plan.size(); ++s) {
      EXPECT_TRUE(std::is_sorted(plan[s].begin(), plan[s].end()));
      for (const auto& id : plan[s]) {
        EXPECT_TRUE(stage.emplace(id, s).second) << id << " placed twice";
        ++placed;
      }
    }
    ASSERT_EQ(placed, n);
    for (const auto& e : g.edges())
      if (e.label == kDependsOn) {
        EXPECT_LT(stage[e.from], stage[e.to]) << e.from << "->" << e.to;
      }
    // Layers are tight: every node after stage 0 has a predecessor one stage back.
    for (const auto& [id, s] : stage) {
      if (s == 0) continue;
      bool tight = false;
      for (const auto& e : g.edges())
        if (e.label == kDependsOn && e.to == id && stage[e.from] + 1 == s) tight = true;
      EXPECT_TRUE(tight) << id;
    }
  }
}

TEST(Graph, JsonRoundTrip) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto g = random_dag(rng, 8, 0.3);
    auto copy = graph_from_json(to_json(g));
    EXPECT_EQ(to_json(copy), to_json(g));
    EXPECT_EQ(copy.execution_plan(), g.execution_plan());
  }
}

TEST(Graph, FileRoundTripKeepsParams) {
  test::TempDir dir;
  WorkflowGraph g;
  auto n = task("train");
  n.inputs = {"data.idx"};
  n.outputs = {"model.bin"};
  n.params = {{"epochs", "3"}, {"timeout", "5"}};
  g.add_node(n);
  save_workflow(g, (dir / "wf.json").string());
  auto back = load_workflow((dir / "wf.json").string());
  EXPECT_EQ(back.node("train"), n);
}

TEST(Graph, MalformedConfigIsConfigError) {
  EXPECT_THROW(graph_from_json(nlohmann::json::parse(R"({"nodes":[{"kind":"task"}]})")), ConfigError);
  EXPECT_THROW(graph_from_json(nlohmann::json::parse(R"({"nodes":[{"id":"a","kind":"robot"}]})")),
               ConfigError);
  EXPECT_THROW(
      graph_from_json(nlohmann::json::parse(
          R"({"nodes":[{"id":"a"},{"id":"b"}],"edges":[{"from":"a","to":"b","channel":"pigeon"}]})")),
      ConfigError);
  EXPECT_THROW(load_workflow("/nonexistent/wf.json"), ConfigError);
}

TEST(Graph, ReturnFunctionSumsLedger) {
  ImprovementLedger ledger;
  EXPECT_DOUBLE_EQ(return_function(ledger), 0.0);
  ledger.append("r1", 0.5);
  ledger.append("r2", 0.25);
  ledger.append("r3", -0.125);
  EXPECT_DOUBLE_EQ(return_function(ledger), 0.625);
  EXPECT_EQ(ledger.entries().size(), 3u);
}
