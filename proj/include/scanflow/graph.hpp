#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/error.hpp"

namespace scanflow {

enum class NodeKind { kTask, kTracker, kChecker, kImprover };

inline std::string to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::kTask: return "task";
    case NodeKind::kTracker: return "tracker";
    case NodeKind::kChecker: return "checker";
    case NodeKind::kImprover: return "improver";
  }
  return "task";
}

inline NodeKind node_kind_from_string(const std::string& s) {
  if (s == "task") return NodeKind::kTask;
  if (s == "tracker") return NodeKind::kTracker;
  if (s == "checker") return NodeKind::kChecker;
  if (s == "improver") return NodeKind::kImprover;
  throw ConfigError("unknown node kind '" + s + "'");
}

// The two ways nodes exchange data: files under the shared working
// directory, or queries answered by the tracker.
enum class Channel { kSharedVolume, kTrackerQuery };

inline std::string to_string(Channel c) {
  return c == Channel::kSharedVolume ? "shared-volume" : "tracker-query";
}

inline Channel channel_from_string(const std::string& s) {
  if (s == "shared-volume") return Channel::kSharedVolume;
  if (s == "tracker-query") return Channel::kTrackerQuery;
  throw ConfigError("unknown channel '" + s + "'");
}

// Only edges carrying this label constrain execution order.
inline const std::string kDependsOn = "depends-on";

struct NodeSpec {
  std::string id;
  NodeKind kind = NodeKind::kTask;
  std::string command;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::map<std::string, std::string> params;

  bool operator==(const NodeSpec&) const = default;
};

struct EdgeSpec {
  std::string from;
  std::string to;
  std::string label = kDependsOn;
  Channel channel = Channel::kSharedVolume;

  bool operator==(const EdgeSpec&) const = default;
};

using EdgeId = std::size_t;

enum class Direction { kPredecessors, kSuccessors };

/// Directed labeled multigraph of task and special nodes.
///
/// Holds the vertex and edge label alphabets, the node set, the ordered
/// edge multiset, the edge -> (from, to) map and both labelings. Parallel
/// edges are kept apart by their EdgeId (position in insertion order).
class WorkflowGraph {
 public:
  /// All four node kinds are declared; the edge alphabet is open and grows
  /// as labels are used.
  WorkflowGraph()
      : vertex_labels_{NodeKind::kTask, NodeKind::kTracker, NodeKind::kChecker,
                       NodeKind::kImprover},
        edge_labels_{kDependsOn} {}

  /// Closed alphabets: nodes or edges outside them are rejected.
  WorkflowGraph(std::set<NodeKind> vertex_labels, std::set<std::string> edge_labels)
      : vertex_labels_(std::move(vertex_labels)),
        edge_labels_(std::move(edge_labels)),
        closed_edge_alphabet_(true) {}

  WorkflowGraph& add_node(NodeSpec spec) {
    if (spec.id.empty()) throw ConfigError("node id must be nonempty");
    if (index_.contains(spec.id)) throw DuplicateNode(spec.id);
    if (!vertex_labels_.contains(spec.kind))
      throw ConfigError("node kind '" + to_string(spec.kind) + "' not in vertex alphabet");
    index_.emplace(spec.id, nodes_.size());
    nodes_.push_back(std::move(spec));
    return *this;
  }

  EdgeId add_edge(EdgeSpec edge) {
    if (!index_.contains(edge.from)) throw UnknownNode(edge.from);
    if (!index_.contains(edge.to)) throw UnknownNode(edge.to);
    if (!edge_labels_.contains(edge.label)) {
      if (closed_edge_alphabet_)
        throw ConfigError("edge label '" + edge.label + "' not in edge alphabet");
      edge_labels_.insert(edge.label);
    }
    if (edge.label == kDependsOn) {
      if (edge.from == edge.to) throw CycleDetected("self-loop on " + edge.from);
      if (reaches(edge.to, edge.from))
        throw CycleDetected(edge.from + " -> " + edge.to + " closes a dependency cycle");
    }
    edges_.push_back(std::move(edge));
    return edges_.size() - 1;
  }

  const std::vector<NodeSpec>& nodes() const { return nodes_; }
  const std::vector<EdgeSpec>& edges() const { return edges_; }
  const std::set<NodeKind>& vertex_labels() const { return vertex_labels_; }
  const std::set<std::string>& edge_labels() const { return edge_labels_; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  bool contains(const std::string& id) const { return index_.contains(id); }

  const NodeSpec& node(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw UnknownNode(id);
    return nodes_[it->second];
  }

  // f : E -> V x V
  std::pair<std::string, std::string> endpoints(EdgeId e) const {
    if (e >= edges_.size()) throw UnknownNode("edge #" + std::to_string(e));
    return {edges_[e].from, edges_[e].to};
  }

  NodeKind node_label(const std::string& id) const { return node(id).kind; }

  const std::string& edge_label(EdgeId e) const {
    if (e >= edges_.size()) throw UnknownNode("edge #" + std::to_string(e));
    return edges_[e].label;
  }

  std::vector<std::string> nodes_of_kind(NodeKind kind) const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
      if (n.kind == kind) out.push_back(n.id);
    return out;
  }

  /// Adjacency over every edge regardless of label.
  std::set<std::string> neighbors(const std::string& id, Direction dir) const {
    if (!contains(id)) throw UnknownNode(id);
    std::set<std::string> out;
    for (const auto& e : edges_) {
      if (dir == Direction::kSuccessors && e.from == id) out.insert(e.to);
      if (dir == Direction::kPredecessors && e.to == id) out.insert(e.from);
    }
    return out;
  }

  /// Kahn layering over depends-on edges. Each stage holds the nodes whose
  /// dependencies all sit in earlier stages, sorted by id.
  std::vector<std::vector<std::string>> execution_plan() const {
    std::map<std::string, std::size_t> indegree;
    std::map<std::string, std::vector<std::string>> succ;
    for (const auto& n : nodes_) indegree[n.id] = 0;
    for (const auto& e : edges_) {
      if (e.label != kDependsOn) continue;
      ++indegree[e.to];
      succ[e.from].push_back(e.to);
    }
    std::vector<std::vector<std::string>> stages;
    std::vector<std::string> frontier;
    for (const auto& [id, deg] : indegree)
      if (deg == 0) frontier.push_back(id);
    std::size_t placed = 0;
    while (!frontier.empty()) {
      std::sort(frontier.begin(), frontier.end());
      std::vector<std::string> next;
      for (const auto& id : frontier)
        for (const auto& s : succ[id])
          if (--indegree[s] == 0) next.push_back(s);
      placed += frontier.size();
      stages.push_back(std::move(frontier));
      frontier = std::move(next);
    }
    if (placed != nodes_.size()) throw CycleDetected("dependency subgraph is not acyclic");
    return stages;
  }

  bool operator==(const WorkflowGraph&) const = default;

 private:
  bool reaches(const std::string& from, const std::string& target) const {
    std::vector<std::string> stack{from};
    std::set<std::string> seen;
    while (!stack.empty()) {
      auto cur = stack.back();
      stack.pop_back();
      if (cur == target) return true;
      if (!seen.insert(cur).second) continue;
      for (const auto& e : edges_)
        if (e.label == kDependsOn && e.from == cur) stack.push_back(e.to);
    }
    return false;
  }

  std::set<NodeKind> vertex_labels_;
  std::set<std::string> edge_labels_;
  bool closed_edge_alphabet_ = false;
  std::vector<NodeSpec> nodes_;
  std::vector<EdgeSpec> edges_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Improvement ledger and return function

struct ImprovementEntry {
  std::string run_id;
  double delta = 0.0;
};

/// Append-only record of quality gains delivered by Improver jobs.
class ImprovementLedger {
 public:
  void append(std::string run_id, double delta) {
    entries_.push_back({std::move(run_id), delta});
  }
  const std::vector<ImprovementEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<ImprovementEntry> entries_;
};

/// Cumulative improvement of a graph: the sum of every recorded delta.
inline double return_function(const ImprovementLedger& ledger) {
  double sum = 0.0;
  for (const auto& e : ledger.entries()) sum += e.delta;
  return sum;
}

// ---------------------------------------------------------------------------
// Workflow config (JSON)
//
// {
//   "vertex_labels": ["task", "tracker", "checker", "improver"],   optional
//   "edge_labels":   ["depends-on", "train", "infer"],             optional, closes the alphabet
//   "nodes": [{"id": "...", "kind": "task", "command": "...",
//              "inputs": [], "outputs": [], "params": {"k": "v"}}],
//   "edges": [{"from": "a", "to": "b", "label": "depends-on",
//              "channel": "shared-volume"}]
// }

inline nlohmann::json to_json(const WorkflowGraph& g) {
  using nlohmann::json;
  json j;
  j["vertex_labels"] = json::array();
  for (auto k : g.vertex_labels()) j["vertex_labels"].push_back(to_string(k));
  j["edge_labels"] = g.edge_labels();
  j["nodes"] = json::array();
  for (const auto& n : g.nodes()) {
    j["nodes"].push_back({{"id", n.id},
                          {"kind", to_string(n.kind)},
                          {"command", n.command},
                          {"inputs", n.inputs},
                          {"outputs", n.outputs},
                          {"params", n.params}});
  }
  j["edges"] = json::array();
  for (const auto& e : g.edges()) {
    j["edges"].push_back({{"from", e.from},
                          {"to", e.to},
                          {"label", e.label},
                          {"channel", to_string(e.channel)}});
  }
  return j;
}

inline WorkflowGraph graph_from_json(const nlohmann::json& j) {
  try {
    WorkflowGraph g;
    if (j.contains("vertex_labels") || j.contains("edge_labels")) {
      std::set<NodeKind> vl{NodeKind::kTask, NodeKind::kTracker, NodeKind::kChecker,
                            NodeKind::kImprover};
      if (j.contains("vertex_labels")) {
        vl.clear();
        for (const auto& s : j.at("vertex_labels")) vl.insert(node_kind_from_string(s));
      }
      std::set<std::string> el{kDependsOn};
      if (j.contains("edge_labels")) el = j.at("edge_labels").get<std::set<std::string>>();
      g = WorkflowGraph(std::move(vl), std::move(el));
    }
    for (const auto& jn : j.value("nodes", nlohmann::json::array())) {
      NodeSpec n;
      n.id = jn.at("id").get<std::string>();
      n.kind = node_kind_from_string(jn.value("kind", "task"));
      n.command = jn.value("command", "");
      n.inputs = jn.value("inputs", std::vector<std::string>{});
      n.outputs = jn.value("outputs", std::vector<std::string>{});
      n.params = jn.value("params", std::map<std::string, std::string>{});
      g.add_node(std::move(n));
    }
    for (const auto& je : j.value("edges", nlohmann::json::array())) {
      EdgeSpec e;
      e.from = je.at("from").get<std::string>();
      e.to = je.at("to").get<std::string>();
      e.label = je.value("label", kDependsOn);
      e.channel = channel_from_string(je.value("channel", "shared-volume"));
      g.add_edge(std::move(e));
    }
    return g;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(ex.what());
  }
}

inline WorkflowGraph load_workflow(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open workflow file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(path + ": " + ex.what());
  }
  return graph_from_json(j);
}

inline void save_workflow(const WorkflowGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << to_json(g).dump(2) << "\n";
}

}  // namespace scanflow
