// scanflow command line: run workflows, corrupt IDX files, run and compare
// scenarios, and serve the tracker/feedback HTTP endpoints.

#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "scanflow/dataset.hpp"
#include "scanflow/feedback.hpp"
#include "scanflow/graph.hpp"
#include "scanflow/runtime.hpp"
#include "scanflow/scenario.hpp"
#include "scanflow/server.hpp"
#include "scanflow/tracker.hpp"

namespace {

using namespace scanflow;

constexpr double kOrderingTolerance = 0.003;  // 0.3 accuracy points

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!detail::trim(item).empty()) out.push_back(detail::trim(item));
  return out;
}

int cmd_run(const std::string& workflow, const fs::path& shared_root, const fs::path& root, std::string run_id) {
  auto graph = load_workflow(workflow);
  TrackerStore store(root / "tracker");
  LocalTracker tracker(store);
  if (run_id.empty()) run_id = "run-" + std::to_string(std::chrono::system_clock::now().time_since_epoch().count());
  ExecutionContext ctx{run_id, shared_root, tracker.endpoint(), {}};
  ProcessExecutor exec;
  auto results = run_workflow(graph, ctx, tracker, exec);
  bool ok = true;
  std::printf("run %s\n", run_id.c_str());
  for (const auto& r : results) {
    std::printf("  %-20s %-8s %8.3fs  %zu artifact(s)\n", r.node_id.c_str(),
                r.skipped ? "skipped" : (r.ok() ? "ok" : "failed"), r.duration, r.artifacts.size());
    if (!r.ok() && !r.log_excerpt.empty()) std::printf("    %s\n", r.log_excerpt.c_str());
    ok = ok && r.ok();
  }
  return ok ? 0 : 1;
}

int cmd_corrupt(const fs::path& in, const std::string& kind, int severity, std::uint64_t seed, const fs::path& out) {
  auto idx = parse_idx(read_binary(in));
  Dataset d{idx.images(), std::nullopt, in.filename().string()};
  auto c = corrupt(d, {corruption_from_string(kind), severity, seed});
  write_binary(out, serialize_idx(idx_from_images(c.images)));
  std::printf("%zu image(s) -> %s\n", c.size(), out.string().c_str());
  return 0;
}

void print_ordering(const OrderingReport& rep) {
  std::printf("metric: %s\n", rep.metric.c_str());
  for (const auto& [name, v] : rep.values) std::printf("  %-10s %7.2f\n", name.c_str(), 100 * v);
  auto get = [&](const char* s) { return rep.values.count(s) ? 100 * rep.values.at(s) : NAN; };
  std::printf("  mdwi_hfc - ddc_hlc  %+6.2f\n", get("mdwi_hfc") - get("ddc_hlc"));
  std::printf("  ddc_hlc - rnd_hlc   %+6.2f\n", get("ddc_hlc") - get("rnd_hlc"));
  std::printf("  rnd_hlc - baseline  %+6.2f\n", get("rnd_hlc") - get("baseline"));
  std::printf("ordering mdwi_hfc >= ddc_hlc >= rnd_hlc > baseline: %s\n", rep.holds ? "holds" : "does not hold");
}

struct ScenarioArgs {
  std::string name = "baseline";
  std::size_t labels = 50;
  std::uint64_t seed = 0;
  bool simulated = false;
  fs::path data = default_data_dir();
  fs::path root = "scanflow-root";
  int severity = DeskConfig{}.severity;
  bool assert_ordering = false;
  std::string host = "127.0.0.1";
  int port = 8080;
  bool json = false;
};

int cmd_scenario_run(const ScenarioArgs& a) {
  TrackerStore store(a.root / "tracker");
  LocalTracker tracker(store);
  std::unique_ptr<FeedbackService> feedback;
  std::unique_ptr<Server> server;
  if (!a.simulated) {
    feedback = std::make_unique<FeedbackService>(a.root / "feedback", false);
    server = std::make_unique<Server>(store, feedback.get());
    int port = server->start(a.host, a.port);
    std::fprintf(stderr, "feedback service on http://%s:%d (waiting for human input)\n", a.host.c_str(), port);
  }
  ScenarioCache cache;
  ScenarioEnv env{&tracker, a.root / "shared", feedback.get(), &cache};
  std::vector<std::string> names;
  if (a.name == "all")
    names = {"baseline", "naive", "ddc_hlc", "rnd_hlc", "mdwi_hfc"};
  else
    names = split_csv(a.name);
  std::vector<ScoreRow> rows;
  for (const auto& n : names) {
    ScenarioSpec spec;
    spec.name = n;
    spec.n_labels = a.labels;
    spec.seed = a.seed;
    spec.data_dir = a.data;
    spec.desk.severity = a.severity;
    spec.simulated_human = a.simulated;
    rows.push_back(run_scenario(spec, env));
    std::fprintf(stderr, "%s done in %.1fs (run %s)\n", n.c_str(), rows.back().seconds, rows.back().run_id.c_str());
  }
  if (a.json) {
    auto j = nlohmann::json::array();
    for (const auto& r : rows) j.push_back(to_json(r));
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << format_table(rows);
    for (const auto& r : rows) std::cout << "run " << r.scenario << ": " << r.run_id << "\n";
  }
  if (a.assert_ordering) {
    std::vector<ScoreRow> ordered;
    for (const auto& r : rows)
      if (r.scenario != "naive") ordered.push_back(r);
    auto rep = compare(ordered, "corrupted", kOrderingTolerance);
    print_ordering(rep);
    return rep.holds ? 0 : 2;
  }
  return 0;
}

int cmd_scenario_compare(const std::string& runs, const fs::path& root, const std::string& metric, bool assert_ordering) {
  TrackerStore store(root / "tracker");
  LocalTracker tracker(store);
  std::vector<ScoreRow> rows;
  for (const auto& id : split_csv(runs)) rows.push_back(load_score_row(tracker, id));
  std::cout << format_table(rows);
  auto rep = compare(rows, metric, kOrderingTolerance);
  print_ordering(rep);
  return assert_ordering && !rep.holds ? 2 : 0;
}

int cmd_serve(const fs::path& root, const std::string& host, int port, bool auto_approve) {
  TrackerStore store(root / "tracker");
  FeedbackService feedback(root / "feedback", auto_approve);
  Server server(store, &feedback);
  std::fprintf(stderr, "serving %s on http://%s:%d\n", root.string().c_str(), host.c_str(), port);
  server.listen(host, port);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scanflow: workflow supervision and debugging"};
  app.require_subcommand(1);

  std::string workflow, run_id;
  fs::path shared_root = "shared", root = "scanflow-root";
  auto* run = app.add_subcommand("run", "Execute a workflow graph from a JSON config");
  run->add_option("--workflow", workflow, "workflow JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--shared-root", shared_root, "shared working directory");
  run->add_option("--root", root, "state directory holding the tracker store");
  run->add_option("--run-id", run_id, "run identifier (default: generated)");

  fs::path in, out;
  std::string kind;
  int severity = 0;
  std::uint64_t seed = 0;
  auto* cor = app.add_subcommand("corrupt", "Corrupt an IDX image file");
  cor->add_option("--in", in)->required()->check(CLI::ExistingFile);
  cor->add_option("--kind", kind, "gaussian_noise|impulse_noise|translate|scale")->required();
  cor->add_option("--severity", severity, "0..5")->required();
  cor->add_option("--seed", seed);
  cor->add_option("--out", out)->required();

  ScenarioArgs sa;
  auto* scen = app.add_subcommand("scenario", "Desk-scale scenarios");
  scen->require_subcommand(1);
  auto* srun = scen->add_subcommand("run", "Run one scenario, a comma list, or 'all'");
  srun->add_option("--name", sa.name, "baseline|naive|ddc_hlc|rnd_hlc|mdwi_hfc|all");
  srun->add_option("--labels", sa.labels, "n_labels");
  srun->add_option("--seed", sa.seed);
  srun->add_flag("--simulated-human", sa.simulated, "answer label/find tasks from ground truth");
  srun->add_option("--data", sa.data, "directory with the digit IDX files");
  srun->add_option("--root", sa.root, "state directory (tracker, shared volume, feedback)");
  srun->add_option("--severity", sa.severity, "corruption severity 1..5");
  srun->add_flag("--assert-ordering", sa.assert_ordering, "exit 2 unless mdwi_hfc >= ddc_hlc >= rnd_hlc > baseline");
  srun->add_option("--host", sa.host, "feedback service host in live mode");
  srun->add_option("--port", sa.port, "feedback service port in live mode (0 = any)");
  srun->add_flag("--json", sa.json, "print rows as JSON");

  std::string runs, metric = "corrupted";
  bool cmp_assert = false;
  fs::path cmp_root = "scanflow-root";
  auto* scmp = scen->add_subcommand("compare", "Compare finished scenario runs");
  scmp->add_option("--runs", runs, "comma-separated run ids")->required();
  scmp->add_option("--root", cmp_root);
  scmp->add_option("--metric", metric, "clean|corrupted|mean");
  scmp->add_flag("--assert-ordering", cmp_assert);

  fs::path serve_root = "scanflow-root";
  std::string host = "127.0.0.1";
  int port = 8080;
  bool auto_approve = false;
  auto* serve = app.add_subcommand("serve", "Serve tracker and feedback endpoints over HTTP");
  serve->add_option("--root", serve_root);
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_flag("--auto-approve", auto_approve, "approve promotions without a human");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(workflow, shared_root, root, run_id);
    if (*cor) return cmd_corrupt(in, kind, severity, seed, out);
    if (*srun) return cmd_scenario_run(sa);
    if (*scmp) return cmd_scenario_compare(runs, cmp_root, metric, cmp_assert);
    if (*serve) return cmd_serve(serve_root, host, port, auto_approve);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
