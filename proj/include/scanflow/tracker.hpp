#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanflow/error.hpp"

namespace scanflow {

namespace fs = std::filesystem;

enum class MetaKind { kParam, kMetric, kTag, kArtifactRef };

inline std::string to_string(MetaKind k) {
  switch (k) {
    case MetaKind::kParam: return "param";
    case MetaKind::kMetric: return "metric";
    case MetaKind::kTag: return "tag";
    case MetaKind::kArtifactRef: return "artifact-ref";
  }
  return "tag";
}

inline MetaKind meta_kind_from_string(const std::string& s) {
  if (s == "param") return MetaKind::kParam;
  if (s == "metric") return MetaKind::kMetric;
  if (s == "tag") return MetaKind::kTag;
  if (s == "artifact-ref") return MetaKind::kArtifactRef;
  throw ConfigError("unknown metadata kind '" + s + "'");
}

using MetaValue = std::variant<std::string, double>;

/// One committed, immutable record. `timestamp` is a strictly increasing
/// nanosecond clock per store, so (run, node, key, timestamp) is unique.
struct MetadataEntry {
  std::string run_id;
  std::string node_id;
  std::string key;
  MetaKind kind = MetaKind::kTag;
  MetaValue value;
  std::int64_t timestamp = 0;

  bool operator==(const MetadataEntry&) const = default;
};

/// What callers hand to save_metadata before normalization. Kind is
/// inferred from the value when omitted (numbers are metrics, text is a tag).
struct MetadataInput {
  std::string node_id;
  std::string key;
  MetaValue value;
  std::optional<MetaKind> kind;
};

inline MetadataInput metric(std::string node, std::string key, double v) {
  return {std::move(node), std::move(key), v, MetaKind::kMetric};
}
inline MetadataInput param(std::string node, std::string key, std::string v) {
  return {std::move(node), std::move(key), std::move(v), MetaKind::kParam};
}
inline MetadataInput tag(std::string node, std::string key, std::string v) {
  return {std::move(node), std::move(key), std::move(v), MetaKind::kTag};
}

struct TrackerQuery {
  std::string run_id;
  std::optional<std::string> node_id;
  std::optional<std::string> key_prefix;
  std::optional<MetaKind> kind;
};

inline bool matches(const TrackerQuery& q, const MetadataEntry& e) {
  if (e.run_id != q.run_id) return false;
  if (q.node_id && e.node_id != *q.node_id) return false;
  if (q.key_prefix && !e.key.starts_with(*q.key_prefix)) return false;
  if (q.kind && e.kind != *q.kind) return false;
  return true;
}

inline nlohmann::json to_json(const MetadataEntry& e) {
  nlohmann::json j{{"run_id", e.run_id},
                   {"node_id", e.node_id},
                   {"key", e.key},
                   {"kind", to_string(e.kind)},
                   {"timestamp", e.timestamp}};
  if (std::holds_alternative<double>(e.value))
    j["value"] = std::get<double>(e.value);
  else
    j["value"] = std::get<std::string>(e.value);
  return j;
}

inline MetadataEntry entry_from_json(const nlohmann::json& j) {
  MetadataEntry e;
  e.run_id = j.at("run_id").get<std::string>();
  e.node_id = j.at("node_id").get<std::string>();
  e.key = j.at("key").get<std::string>();
  e.kind = meta_kind_from_string(j.at("kind").get<std::string>());
  const auto& v = j.at("value");
  if (v.is_number())
    e.value = v.get<double>();
  else
    e.value = v.get<std::string>();
  e.timestamp = j.at("timestamp").get<std::int64_t>();
  return e;
}

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

inline bool valid_run_id(const std::string& id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
}

namespace detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && ws(s.back())) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && ws(s[i])) ++i;
  return s.substr(i);
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-then-rename so readers never observe a half-written file.
inline void write_file_atomic(const fs::path& p, std::string_view bytes) {
  auto tmp = p;
  tmp += ".tmp";
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw IoError("cannot open " + tmp.string());
  std::size_t off = 0;
  while (off < bytes.size()) {
    auto n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n <= 0) {
      ::close(fd);
      throw IoError("write failed on " + tmp.string());
    }
    off += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  fs::rename(tmp, p);
}

// Appends one line with a single write() and fsyncs it.
inline void append_line(const fs::path& p, const std::string& line) {
  int fd = ::open(p.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw IoError("cannot open " + p.string());
  std::string buf = line + "\n";
  std::size_t off = 0;
  while (off < buf.size()) {
    auto n = ::write(fd, buf.data() + off, buf.size() - off);
    if (n <= 0) {
      ::close(fd);
      throw IoError("append failed on " + p.string());
    }
    off += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

}  // namespace detail

/// Append-only metadata and artifact store.
///
/// Layout under `root`:
///   runs/{run_id}/run.json    registration (endpoint)
///   runs/{run_id}/log.jsonl   one line per committed batch
///   artifacts/{sha256}        content-addressed blobs
///
/// A batch is a single line, so a crash mid-write leaves at most one torn
/// trailing line which is discarded on reload. Commits are serialized by
/// one mutex; readers take a shared lock on the in-memory index only.
class TrackerStore {
 public:
  explicit TrackerStore(fs::path root, std::string endpoint = "local")
      : root_(std::move(root)), endpoint_(std::move(endpoint)) {
    fs::create_directories(root_ / "runs");
    fs::create_directories(root_ / "artifacts");
    load();
  }

  const fs::path& root() const { return root_; }
  const std::string& endpoint() const { return endpoint_; }

  void register_run(const std::string& run_id) {
    if (!valid_run_id(run_id)) throw ConfigError("invalid run id '" + run_id + "'");
    std::unique_lock lock(mu_);
    register_locked(run_id);
  }

  bool has_run(const std::string& run_id) const {
    std::shared_lock lock(mu_);
    return runs_.contains(run_id);
  }

  std::vector<std::string> runs() const {
    std::shared_lock lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, _] : runs_) out.push_back(id);
    return out;
  }

  /// Validate and normalize a raw batch: keys trimmed and required
  /// nonempty, kind inferred from the value when absent.
  static std::vector<MetadataInput> process_metadata(std::vector<MetadataInput> batch) {
    for (auto& m : batch) {
      m.key = detail::trim(m.key);
      m.node_id = detail::trim(m.node_id);
      if (m.key.empty()) throw ConfigError("metadata key must be nonempty");
      if (!m.kind)
        m.kind = std::holds_alternative<double>(m.value) ? MetaKind::kMetric : MetaKind::kTag;
      if (*m.kind == MetaKind::kMetric && !std::holds_alternative<double>(m.value))
        throw ConfigError("metric '" + m.key + "' must be numeric");
    }
    return batch;
  }

  /// Commit a batch all-or-nothing. Returns false (with last_error() set)
  /// on validation or IO failure; nothing from the batch is then visible.
  bool save_metadata(std::vector<MetadataInput> batch, const std::string& run_id) {
    try {
      if (!valid_run_id(run_id)) throw ConfigError("invalid run id '" + run_id + "'");
      auto processed = process_metadata(std::move(batch));
      std::unique_lock lock(mu_);
      register_locked(run_id);
      if (processed.empty()) return true;
      std::vector<MetadataEntry> entries;
      nlohmann::json line = nlohmann::json::array();
      for (auto& m : processed) {
        MetadataEntry e{run_id, m.node_id, m.key, *m.kind, m.value, next_timestamp()};
        line.push_back(to_json(e));
        entries.push_back(std::move(e));
      }
      detail::append_line(root_ / "runs" / run_id / "log.jsonl", line.dump());
      auto& log = runs_[run_id];
      log.insert(log.end(), std::make_move_iterator(entries.begin()),
                 std::make_move_iterator(entries.end()));
      return true;
    } catch (const std::exception& ex) {
      std::lock_guard lk(err_mu_);
      last_error_ = ex.what();
      return false;
    }
  }

  std::string last_error() const {
    std::lock_guard lk(err_mu_);
    return last_error_;
  }

  /// Entries matching every filter, in timestamp order. Unknown runs raise
  /// NotFound; a known run with no matches yields an empty list.
  std::vector<MetadataEntry> gather_log(const TrackerQuery& q) const {
    std::shared_lock lock(mu_);
    auto it = runs_.find(q.run_id);
    if (it == runs_.end()) throw NotFound("run '" + q.run_id + "'");
    std::vector<MetadataEntry> out;
    for (const auto& e : it->second)
      if (matches(q, e)) out.push_back(e);
    return out;
  }

  std::string get_tracker_uri(const std::string& run_id) const {
    std::shared_lock lock(mu_);
    auto it = endpoints_.find(run_id);
    if (it == endpoints_.end()) throw NotFound("run '" + run_id + "'");
    return it->second;
  }

  /// Store a blob under its SHA-256 and append an artifact-ref entry whose
  /// key is the artifact name.
  std::string log_artifact(const std::string& run_id, const std::string& node_id,
                           const std::string& name, std::string_view bytes) {
    if (detail::trim(name).empty()) throw ConfigError("artifact name must be nonempty");
    auto ref = sha256_hex(bytes);
    auto path = root_ / "artifacts" / ref;
    {
      std::unique_lock lock(artifact_mu_);
      if (!fs::exists(path)) detail::write_file_atomic(path, bytes);
    }
    MetadataInput m{node_id, name, ref, MetaKind::kArtifactRef};
    if (!save_metadata({m}, run_id)) throw IoError(last_error());
    return ref;
  }

  std::string fetch_artifact(const std::string& ref) const {
    bool ok = ref.size() == 64 && std::all_of(ref.begin(), ref.end(), [](char c) {
                return std::isxdigit(static_cast<unsigned char>(c));
              });
    auto path = root_ / "artifacts" / ref;
    if (!ok || !fs::exists(path)) throw NotFound("artifact '" + ref + "'");
    return detail::read_file(path);
  }

  /// Every committed entry across runs, ordered by timestamp.
  std::vector<MetadataEntry> dump() const {
    std::shared_lock lock(mu_);
    std::vector<MetadataEntry> out;
    for (const auto& [_, log] : runs_) out.insert(out.end(), log.begin(), log.end());
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    return out;
  }

 private:
  void register_locked(const std::string& run_id) {
    if (endpoints_.contains(run_id)) return;
    auto dir = root_ / "runs" / run_id;
    fs::create_directories(dir);
    nlohmann::json j{{"run_id", run_id}, {"endpoint", endpoint_}};
    detail::write_file_atomic(dir / "run.json", j.dump());
    endpoints_[run_id] = endpoint_;
    runs_.try_emplace(run_id);
  }

  std::int64_t next_timestamp() {
    auto now = std::chrono::duration_cast<std::chrono::nanoseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
                   .count();
    last_ts_ = std::max<std::int64_t>(now, last_ts_ + 1);
    return last_ts_;
  }

  void load() {
    for (const auto& dir : fs::directory_iterator(root_ / "runs")) {
      if (!dir.is_directory()) continue;
      auto run_id = dir.path().filename().string();
      auto meta = dir.path() / "run.json";
      if (fs::exists(meta)) {
        auto j = nlohmann::json::parse(detail::read_file(meta), nullptr, false);
        endpoints_[run_id] = j.is_discarded() ? endpoint_ : j.value("endpoint", endpoint_);
      } else {
        endpoints_[run_id] = endpoint_;
      }
      auto& log = runs_[run_id];
      auto log_path = dir.path() / "log.jsonl";
      if (!fs::exists(log_path)) continue;
      std::ifstream in(log_path);
      std::string line;
      std::size_t good_bytes = 0;
      bool torn = false;
      while (std::getline(in, line)) {
        bool complete = !in.eof();
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (!complete || j.is_discarded() || !j.is_array()) {
          torn = true;
          break;
        }
        for (const auto& je : j) {
          log.push_back(entry_from_json(je));
          last_ts_ = std::max(last_ts_, log.back().timestamp);
        }
        good_bytes += line.size() + 1;
      }
      in.close();
      // Drop a torn tail so the next append starts on a clean line.
      if (torn) fs::resize_file(log_path, good_bytes);
    }
  }

  fs::path root_;
  std::string endpoint_;
  mutable std::shared_mutex mu_;
  std::mutex artifact_mu_;
  mutable std::mutex err_mu_;
  std::string last_error_;
  std::map<std::string, std::vector<MetadataEntry>> runs_;
  std::map<std::string, std::string> endpoints_;
  std::int64_t last_ts_ = 0;
};

/// How nodes and special nodes talk to a tracker: in-process or over HTTP.
class TrackerClient {
 public:
  virtual ~TrackerClient() = default;
  virtual bool ping() = 0;
  virtual std::string endpoint() const = 0;
  virtual bool save_metadata(std::vector<MetadataInput> batch, const std::string& run_id) = 0;
  virtual std::vector<MetadataEntry> gather_log(const TrackerQuery& q) = 0;
  virtual std::string log_artifact(const std::string& run_id, const std::string& node_id,
                                   const std::string& name, std::string_view bytes) = 0;
  virtual std::string fetch_artifact(const std::string& ref) = 0;
  virtual std::string get_tracker_uri(const std::string& run_id) = 0;
};

class LocalTracker final : public TrackerClient {
 public:
  explicit LocalTracker(TrackerStore& store) : store_(store) {}
  bool ping() override { return true; }
  std::string endpoint() const override { return store_.endpoint(); }
  bool save_metadata(std::vector<MetadataInput> batch, const std::string& run_id) override {
    return store_.save_metadata(std::move(batch), run_id);
  }
  std::vector<MetadataEntry> gather_log(const TrackerQuery& q) override {
    return store_.gather_log(q);
  }
  std::string log_artifact(const std::string& run_id, const std::string& node_id,
                           const std::string& name, std::string_view bytes) override {
    return store_.log_artifact(run_id, node_id, name, bytes);
  }
  std::string fetch_artifact(const std::string& ref) override {
    return store_.fetch_artifact(ref);
  }
  std::string get_tracker_uri(const std::string& run_id) override {
    return store_.get_tracker_uri(run_id);
  }
  TrackerStore& store() { return store_; }

 private:
  TrackerStore& store_;
};

}  // namespace scanflow
