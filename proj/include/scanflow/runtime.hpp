#pragma once

#include <fcntl.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "scanflow/error.hpp"
#include "scanflow/graph.hpp"
#include "scanflow/tracker.hpp"

namespace scanflow {

struct ExecutionContext {
  std::string run_id;
  fs::path shared_root;
  std::string tracker_endpoint;
  std::map<std::string, std::string> env;
  std::chrono::milliseconds default_timeout{300'000};
};

enum class ExitStatus { kOk, kFailed };

struct NodeResult {
  std::string node_id;
  ExitStatus exit_status = ExitStatus::kFailed;
  bool skipped = false;  // never started because a dependency failed
  double duration = 0.0;  // seconds
  std::vector<fs::path> artifacts;
  std::string log_excerpt;

  bool ok() const { return exit_status == ExitStatus::kOk; }
};

/// Backend that executes one node. The default runs a subprocess inside
/// shared_root/node_id; a container runtime would be another implementation.
class Executor {
 public:
  virtual ~Executor() = default;
  virtual NodeResult run(const NodeSpec& spec, const ExecutionContext& ctx) = 0;
};

namespace detail {

// Whitespace split honouring single and double quotes.
inline std::vector<std::string> split_command(const std::string& cmd) {
  std::vector<std::string> out;
  std::string cur;
  bool in_token = false;
  char quote = 0;
  for (char c : cmd) {
    if (quote) {
      if (c == quote)
        quote = 0;
      else
        cur.push_back(c);
    } else if (c == '\'' || c == '"') {
      quote = c;
      in_token = true;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      if (in_token) out.push_back(std::move(cur));
      cur.clear();
      in_token = false;
    } else {
      cur.push_back(c);
      in_token = true;
    }
  }
  if (quote) throw SpawnError("unterminated quote in command: " + cmd);
  if (in_token) out.push_back(std::move(cur));
  return out;
}

inline std::string tail_of_file(const fs::path& p, std::size_t max_bytes = 2048) {
  if (!fs::exists(p)) return {};
  auto text = read_file(p);
  return text.size() > max_bytes ? text.substr(text.size() - max_bytes) : text;
}

inline std::vector<fs::path> collect_artifacts(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (auto it = fs::recursive_directory_iterator(dir); it != fs::recursive_directory_iterator();
       ++it) {
    if (it->is_directory() && it->path().filename() == ".scanflow") {
      it.disable_recursion_pending();
      continue;
    }
    if (it->is_regular_file()) out.push_back(fs::absolute(it->path()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string env_key(std::string s) {
  for (auto& c : s)
    c = std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::toupper(c)) : '_';
  return s;
}

}  // namespace detail

/// Environment injected into every node process.
inline std::map<std::string, std::string> node_environment(const NodeSpec& spec,
                                                           const ExecutionContext& ctx) {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    std::string kv(*e);
    auto eq = kv.find('=');
    if (eq != std::string::npos) env[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  for (const auto& [k, v] : ctx.env) env[k] = v;
  for (const auto& [k, v] : spec.params) env["PARAM_" + detail::env_key(k)] = v;
  std::string joined;
  for (std::size_t i = 0; i < spec.inputs.size(); ++i) {
    // Input slots name another node's output as "<node>/<relative path>".
    auto path = (fs::absolute(ctx.shared_root) / spec.inputs[i]).string();
    env["INPUT_" + std::to_string(i)] = path;
    joined += (i ? ":" : "") + path;
  }
  env["INPUTS"] = joined;
  env["RUN_ID"] = ctx.run_id;
  env["SHARED_ROOT"] = fs::absolute(ctx.shared_root).string();
  env["TRACKER_ENDPOINT"] = ctx.tracker_endpoint;
  env["NODE_ID"] = spec.id;
  return env;
}

inline std::chrono::milliseconds node_timeout(const NodeSpec& spec, const ExecutionContext& ctx) {
  auto it = spec.params.find("timeout");
  if (it == spec.params.end()) return ctx.default_timeout;
  return std::chrono::milliseconds(static_cast<long long>(std::stod(it->second) * 1000.0));
}

/// Run one node as a child process with cwd = shared_root/node_id and
/// stdout/stderr captured under .scanflow/. Throws SpawnError when the
/// executable cannot be started and Timeout when it outlives its budget.
inline NodeResult run_node(const NodeSpec& spec, const ExecutionContext& ctx) {
  auto argv_s = detail::split_command(spec.command);
  if (argv_s.empty()) throw SpawnError(spec.id + ": empty command");
  auto cwd = fs::absolute(ctx.shared_root) / spec.id;
  auto logdir = cwd / ".scanflow";
  fs::create_directories(logdir);
  auto out_path = logdir / "output.log";

  std::vector<std::string> env_s;
  for (const auto& [k, v] : node_environment(spec, ctx)) env_s.push_back(k + "=" + v);
  std::vector<char*> argv, envp;
  for (auto& s : argv_s) argv.push_back(s.data());
  argv.push_back(nullptr);
  for (auto& s : env_s) envp.push_back(s.data());
  envp.push_back(nullptr);

  int err_pipe[2];
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) throw SpawnError(spec.id + ": pipe failed");

  auto start = std::chrono::steady_clock::now();
  pid_t pid = ::fork();
  if (pid < 0) {
    ::close(err_pipe[0]);
    ::close(err_pipe[1]);
    throw SpawnError(spec.id + ": fork failed");
  }
  if (pid == 0) {
    ::setpgid(0, 0);
    ::close(err_pipe[0]);
    int fd = ::open(out_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd >= 0) {
      ::dup2(fd, STDOUT_FILENO);
      ::dup2(fd, STDERR_FILENO);
      ::close(fd);
    }
    if (::chdir(cwd.c_str()) != 0) {
      int e = errno;
      (void)!::write(err_pipe[1], &e, sizeof e);
      ::_exit(127);
    }
    ::execvpe(argv[0], argv.data(), envp.data());
    int e = errno;
    (void)!::write(err_pipe[1], &e, sizeof e);
    ::_exit(127);
  }
  ::close(err_pipe[1]);
  int child_errno = 0;
  auto n = ::read(err_pipe[0], &child_errno, sizeof child_errno);
  ::close(err_pipe[0]);
  if (n == sizeof child_errno) {
    ::waitpid(pid, nullptr, 0);
    throw SpawnError(spec.id + ": cannot execute '" + argv_s[0] + "': " +
                     std::strerror(child_errno));
  }

  auto timeout = node_timeout(spec, ctx);
  int status = 0;
  for (;;) {
    pid_t r = ::waitpid(pid, &status, WNOHANG);
    if (r == pid) break;
    if (std::chrono::steady_clock::now() - start > timeout) {
      ::kill(-pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      throw Timeout(spec.id + " exceeded " + std::to_string(timeout.count()) + " ms");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }

  NodeResult res;
  res.node_id = spec.id;
  res.duration = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.exit_status = WIFEXITED(status) && WEXITSTATUS(status) == 0 ? ExitStatus::kOk
                                                                  : ExitStatus::kFailed;
  res.artifacts = detail::collect_artifacts(cwd);
  res.log_excerpt = detail::tail_of_file(out_path);
  return res;
}

class ProcessExecutor : public Executor {
 public:
  NodeResult run(const NodeSpec& spec, const ExecutionContext& ctx) override {
    return run_node(spec, ctx);
  }
};

/// Dispatches commands of the form "builtin:<name>" to in-process
/// functions and everything else to a subprocess. Built-in functions get
/// the same working directory contract as processes.
class BuiltinExecutor : public Executor {
 public:
  using Task = std::function<void(const NodeSpec&, const ExecutionContext&)>;

  void register_task(std::string name, Task fn) { tasks_[std::move(name)] = std::move(fn); }

  NodeResult run(const NodeSpec& spec, const ExecutionContext& ctx) override {
    static constexpr std::string_view kPrefix = "builtin:";
    if (!spec.command.starts_with(kPrefix)) return fallback_.run(spec, ctx);
    auto name = spec.command.substr(kPrefix.size());
    auto it = tasks_.find(name);
    if (it == tasks_.end()) throw SpawnError(spec.id + ": no builtin task '" + name + "'");
    auto cwd = fs::absolute(ctx.shared_root) / spec.id;
    fs::create_directories(cwd);
    NodeResult res;
    res.node_id = spec.id;
    auto start = std::chrono::steady_clock::now();
    try {
      it->second(spec, ctx);
      res.exit_status = ExitStatus::kOk;
    } catch (const std::exception& ex) {
      res.exit_status = ExitStatus::kFailed;
      res.log_excerpt = ex.what();
    }
    res.duration = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.artifacts = detail::collect_artifacts(cwd);
    return res;
  }

 private:
  std::map<std::string, Task> tasks_;
  ProcessExecutor fallback_;
};

/// Execute the graph stage by stage. Nodes in a stage run concurrently;
/// a failed node marks every transitive depends-on successor as failed
/// and skipped while independent branches continue. Results come back in
/// plan order (stage, then node id) and each is recorded to the tracker.
inline std::vector<NodeResult> run_workflow(const WorkflowGraph& graph, const ExecutionContext& ctx,
                                            TrackerClient& tracker, Executor& executor) {
  auto plan = graph.execution_plan();
  if (!tracker.ping()) throw TrackerUnavailable(ctx.tracker_endpoint);
  std::error_code ec;
  fs::create_directories(ctx.shared_root, ec);
  if (ec || ::access(ctx.shared_root.c_str(), W_OK) != 0)
    throw IoError("shared root not writable: " + ctx.shared_root.string());

  std::map<std::string, std::set<std::string>> deps;
  for (const auto& e : graph.edges())
    if (e.label == kDependsOn) deps[e.to].insert(e.from);

  std::set<std::string> failed;
  std::vector<NodeResult> results;
  for (const auto& stage : plan) {
    std::vector<std::future<NodeResult>> pending;
    std::vector<NodeResult> stage_results(stage.size());
    std::vector<bool> launched(stage.size(), false);
    for (std::size_t i = 0; i < stage.size(); ++i) {
      const auto& id = stage[i];
      bool blocked = std::any_of(deps[id].begin(), deps[id].end(),
                                 [&](const auto& d) { return failed.contains(d); });
      if (blocked) {
        stage_results[i].node_id = id;
        stage_results[i].skipped = true;
        stage_results[i].log_excerpt = "skipped: upstream dependency failed";
        continue;
      }
      launched[i] = true;
      pending.push_back(std::async(std::launch::async, [&, id] {
        const auto& spec = graph.node(id);
        try {
          return executor.run(spec, ctx);
        } catch (const Error& ex) {
          NodeResult r;
          r.node_id = id;
          r.log_excerpt = ex.what();
          return r;
        }
      }));
    }
    std::size_t next = 0;
    for (std::size_t i = 0; i < stage.size(); ++i)
      if (launched[i]) stage_results[i] = pending[next++].get();
    for (auto& r : stage_results) {
      if (!r.ok()) failed.insert(r.node_id);
      std::vector<MetadataInput> batch{
          tag(r.node_id, "runtime/status", r.skipped ? "skipped" : (r.ok() ? "ok" : "failed")),
          metric(r.node_id, "runtime/duration", r.duration),
          metric(r.node_id, "runtime/artifacts", static_cast<double>(r.artifacts.size()))};
      if (!tracker.save_metadata(std::move(batch), ctx.run_id))
        throw TrackerUnavailable("failed to record result of " + r.node_id);
      results.push_back(std::move(r));
    }
  }
  return results;
}

}  // namespace scanflow
