#pragma once

#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "scanflow/error.hpp"
#include "scanflow/feedback.hpp"
#include "scanflow/png.hpp"
#include "scanflow/tracker.hpp"

namespace scanflow {

// HTTP surface shared by the tracker-query channel and the labeling UI.
//
//   GET  /health
//   GET  /runs
//   PUT  /runs/{id}/metadata            [{node_id, key, value, kind?}, ...]
//   GET  /runs/{id}/metadata?node_id=&key_prefix=&kind=
//   GET  /runs/{id}/uri
//   PUT  /runs/{id}/artifacts/{name}?node_id=   raw bytes -> {ref}
//   GET  /artifacts/{ref}
//
//   GET  /runs/{id}/label-tasks?status=
//   GET  /label-tasks/{id}
//   GET  /label-tasks/{id}/image.png
//   POST /label-tasks/{id}              {label} | {skip: true}
//   GET  /runs/{id}/find-tasks?status=
//   GET  /find-tasks/{id}
//   GET  /find-tasks/{id}/image.png
//   GET  /find-tasks/{id}/candidates/{k}.png
//   POST /find-tasks/{id}               {match_index} | {skip: true}
//   GET  /runs/{id}/feedback?kind=labels|pairs
//   GET  /promotions
//   POST /promotions/{id}               {decision: approve|reject}
//   GET  /active-model
//
// Errors come back as {error, message}: 404 NotFound, 409 Conflict /
// DuplicateBatch / Incomplete, 422 NotAnImprovement, 400 everything else
// the caller got wrong.

inline int http_status_for(const std::exception& ex) {
  if (dynamic_cast<const NotFound*>(&ex)) return 404;
  if (dynamic_cast<const Conflict*>(&ex) || dynamic_cast<const DuplicateBatch*>(&ex) ||
      dynamic_cast<const Incomplete*>(&ex))
    return 409;
  if (dynamic_cast<const NotAnImprovement*>(&ex)) return 422;
  if (dynamic_cast<const IoError*>(&ex)) return 500;
  if (dynamic_cast<const Error*>(&ex) || dynamic_cast<const nlohmann::json::exception*>(&ex)) return 400;
  return 500;
}

inline std::string error_name(const std::exception& ex) {
  std::string what = ex.what();
  auto colon = what.find(':');
  if (dynamic_cast<const Error*>(&ex) && colon != std::string::npos) return what.substr(0, colon);
  if (dynamic_cast<const nlohmann::json::exception*>(&ex)) return "BadRequest";
  return "InternalError";
}

inline MetadataInput metadata_input_from_json(const nlohmann::json& j) {
  MetadataInput m;
  m.node_id = j.at("node_id").get<std::string>();
  m.key = j.at("key").get<std::string>();
  const auto& v = j.at("value");
  if (v.is_number())
    m.value = v.get<double>();
  else if (v.is_string())
    m.value = v.get<std::string>();
  else
    throw ConfigError("metadata value must be a number or a string");
  if (j.contains("kind") && !j["kind"].is_null()) m.kind = meta_kind_from_string(j["kind"].get<std::string>());
  return m;
}

inline nlohmann::json to_json(const MetadataInput& m) {
  nlohmann::json j{{"node_id", m.node_id}, {"key", m.key}};
  if (std::holds_alternative<double>(m.value))
    j["value"] = std::get<double>(m.value);
  else
    j["value"] = std::get<std::string>(m.value);
  if (m.kind) j["kind"] = to_string(*m.kind);
  return j;
}

class Server {
 public:
  /// `feedback` may be null, in which case only the tracker routes exist.
  Server(TrackerStore& store, FeedbackService* feedback, std::size_t png_zoom = 8)
      : store_(store), feedback_(feedback), zoom_(png_zoom) {
    routes();
  }

  ~Server() { stop(); }

  /// Bind (port 0 picks a free one) and serve on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? svr_.bind_to_any_port(host) : (svr_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
    return port_;
  }

  /// Serve on the calling thread until stop().
  void listen(const std::string& host, int port) {
    if (!svr_.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    svr_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  httplib::Server& raw() { return svr_; }

 private:
  using Req = httplib::Request;
  using Res = httplib::Response;

  static void send(Res& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static nlohmann::json body_json(const Req& req) {
    auto j = nlohmann::json::parse(req.body.empty() ? "{}" : req.body, nullptr, false);
    if (j.is_discarded()) throw ConfigError("request body is not JSON");
    return j;
  }

  static std::optional<TaskStatus> status_param(const Req& req) {
    if (!req.has_param("status")) return std::nullopt;
    return task_status_from_string(req.get_param_value("status"));
  }

  FeedbackService& fb() {
    if (!feedback_) throw NotFound("feedback service not enabled");
    return *feedback_;
  }

  void png(Res& res, const std::vector<float>& px) {
    auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(px.size()))));
    if (side * side != px.size()) throw ShapeError("sample is not square");
    res.set_content(encode_png_gray(px.data(), side, side, zoom_), "image/png");
  }

  void routes() {
    svr_.set_exception_handler([](const Req&, Res& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& ex) {
        send(res, {{"error", error_name(ex)}, {"message", ex.what()}}, http_status_for(ex));
      } catch (...) {
        send(res, {{"error", "InternalError"}, {"message", "unknown"}}, 500);
      }
    });
    svr_.set_post_routing_handler([](const Req&, Res& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    svr_.Options(".*", [](const Req&, Res& res) { res.status = 204; });

    // -- tracker
    svr_.Get("/health", [this](const Req&, Res& res) {
      send(res, {{"status", "ok"}, {"endpoint", store_.endpoint()}, {"feedback", feedback_ != nullptr}});
    });
    svr_.Get("/runs", [this](const Req&, Res& res) { send(res, store_.runs()); });
    svr_.Put("/runs/:id/metadata", [this](const Req& req, Res& res) {
      auto j = body_json(req);
      if (!j.is_array()) throw ConfigError("metadata body must be a JSON array");
      std::vector<MetadataInput> batch;
      for (const auto& e : j) batch.push_back(metadata_input_from_json(e));
      const auto& run = req.path_params.at("id");
      if (!store_.save_metadata(std::move(batch), run))
        return send(res, {{"error", "Rejected"}, {"message", store_.last_error()}}, 400);
      send(res, {{"saved", true}, {"count", j.size()}});
    });
    svr_.Get("/runs/:id/metadata", [this](const Req& req, Res& res) {
      TrackerQuery q{req.path_params.at("id"), {}, {}, {}};
      if (req.has_param("node_id")) q.node_id = req.get_param_value("node_id");
      if (req.has_param("key_prefix")) q.key_prefix = req.get_param_value("key_prefix");
      if (req.has_param("kind")) q.kind = meta_kind_from_string(req.get_param_value("kind"));
      auto out = nlohmann::json::array();
      for (const auto& e : store_.gather_log(q)) out.push_back(to_json(e));
      send(res, out);
    });
    svr_.Get("/runs/:id/uri", [this](const Req& req, Res& res) {
      send(res, {{"uri", store_.get_tracker_uri(req.path_params.at("id"))}});
    });
    svr_.Put("/runs/:id/artifacts/:name", [this](const Req& req, Res& res) {
      auto node = req.has_param("node_id") ? req.get_param_value("node_id") : std::string("external");
      auto ref = store_.log_artifact(req.path_params.at("id"), node, req.path_params.at("name"), req.body);
      send(res, {{"ref", ref}});
    });
    svr_.Get("/artifacts/:ref", [this](const Req& req, Res& res) {
      res.set_content(store_.fetch_artifact(req.path_params.at("ref")), "application/octet-stream");
    });

    // -- labeling
    svr_.Get("/runs/:id/label-tasks", [this](const Req& req, Res& res) {
      auto out = nlohmann::json::array();
      for (const auto& t : fb().label_tasks(req.path_params.at("id"), status_param(req))) out.push_back(to_json(t));
      send(res, out);
    });
    svr_.Get("/label-tasks/:id", [this](const Req& req, Res& res) {
      send(res, to_json(fb().label_task(req.path_params.at("id"))));
    });
    svr_.Get("/label-tasks/:id/image.png", [this](const Req& req, Res& res) {
      png(res, fb().label_task(req.path_params.at("id")).sample);
    });
    svr_.Post("/label-tasks/:id", [this](const Req& req, Res& res) {
      auto j = body_json(req);
      const auto& id = req.path_params.at("id");
      if (j.value("skip", false)) return send(res, to_json(fb().skip_label(id)));
      if (!j.contains("label") || !j["label"].is_number_integer()) throw InvalidLabel("body needs an integer label");
      send(res, to_json(fb().submit_label(id, j["label"].get<int>())));
    });

    // -- finding
    svr_.Get("/runs/:id/find-tasks", [this](const Req& req, Res& res) {
      auto out = nlohmann::json::array();
      for (const auto& t : fb().find_tasks(req.path_params.at("id"), status_param(req))) out.push_back(to_json(t));
      send(res, out);
    });
    svr_.Get("/find-tasks/:id", [this](const Req& req, Res& res) {
      send(res, to_json(fb().find_task(req.path_params.at("id"))));
    });
    svr_.Get("/find-tasks/:id/image.png", [this](const Req& req, Res& res) {
      png(res, fb().find_task(req.path_params.at("id")).corrupted_sample);
    });
    svr_.Get(R"(/find-tasks/([^/]+)/candidates/(\d+)\.png)", [this](const Req& req, Res& res) {
      auto t = fb().find_task(req.matches[1].str());
      auto k = std::stoul(req.matches[2].str());
      if (k >= t.candidate_pool.size()) throw NotFound("candidate " + std::to_string(k));
      auto pool = fb().candidate_pool(t.run_id);
      if (!pool) throw NotFound("candidate pool for run " + t.run_id);
      const std::size_t px = pool->height() * pool->width(), i = t.candidate_pool[k];
      png(res, std::vector<float>(pool->images.data() + i * px, pool->images.data() + (i + 1) * px));
    });
    svr_.Post("/find-tasks/:id", [this](const Req& req, Res& res) {
      auto j = body_json(req);
      const auto& id = req.path_params.at("id");
      if (j.value("skip", false)) return send(res, to_json(fb().skip_find(id)));
      if (!j.contains("match_index") || !j["match_index"].is_number_unsigned())
        throw InvalidSpec("body needs a match_index");
      send(res, to_json(fb().submit_match(id, j["match_index"].get<std::size_t>())));
    });

    svr_.Get("/runs/:id/feedback", [this](const Req& req, Res& res) {
      auto kind = req.has_param("kind") && req.get_param_value("kind") == "pairs" ? FeedbackKind::kPairs
                                                                                  : FeedbackKind::kLabels;
      auto b = fb().collect_feedback(req.path_params.at("id"), kind);
      nlohmann::json items = nlohmann::json::array();
      for (const auto& it : b.items) {
        nlohmann::json ji{{"origin_index", it.origin_index}};
        ji["label"] = it.label ? nlohmann::json(*it.label) : nlohmann::json(nullptr);
        ji["match_index"] = it.match_index ? nlohmann::json(*it.match_index) : nlohmann::json(nullptr);
        items.push_back(ji);
      }
      send(res, {{"run_id", b.run_id}, {"kind", kind == FeedbackKind::kPairs ? "pairs" : "labels"}, {"items", items}});
    });

    // -- promotions
    svr_.Get("/promotions", [this](const Req&, Res& res) {
      auto out = nlohmann::json::array();
      for (const auto& p : fb().promotions()) out.push_back(to_json(p));
      send(res, out);
    });
    svr_.Post("/promotions/:id", [this](const Req& req, Res& res) {
      auto j = body_json(req);
      auto d = j.value("decision", std::string());
      Decision decision = d == "approve" || d == "approved" ? Decision::kApproved
                          : d == "reject" || d == "rejected" ? Decision::kRejected
                                                             : throw InvalidSpec("decision must be approve or reject");
      send(res, to_json(fb().resolve_promotion(req.path_params.at("id"), decision)));
    });
    svr_.Get("/active-model", [this](const Req&, Res& res) {
      auto a = fb().active_model();
      send(res, {{"ref", a ? nlohmann::json(*a) : nlohmann::json(nullptr)},
                 {"return", return_function(fb().ledger())}});
    });
  }

  TrackerStore& store_;
  FeedbackService* feedback_;
  std::size_t zoom_;
  httplib::Server svr_;
  std::thread thread_;
  int port_ = -1;
};

/// Tracker client speaking to a remote Server.
class HttpTracker final : public TrackerClient {
 public:
  explicit HttpTracker(const std::string& base_url) : url_(base_url), cli_(base_url) {
    cli_.set_connection_timeout(std::chrono::seconds(5));
    cli_.set_read_timeout(std::chrono::seconds(30));
  }

  bool ping() override {
    auto r = cli_.Get("/health");
    return r && r->status == 200;
  }
  std::string endpoint() const override { return url_; }

  bool save_metadata(std::vector<MetadataInput> batch, const std::string& run_id) override {
    auto body = nlohmann::json::array();
    for (const auto& m : batch) body.push_back(to_json(m));
    auto r = cli_.Put("/runs/" + run_id + "/metadata", body.dump(), "application/json");
    return r && r->status == 200;
  }

  std::vector<MetadataEntry> gather_log(const TrackerQuery& q) override {
    httplib::Params p;
    if (q.node_id) p.emplace("node_id", *q.node_id);
    if (q.key_prefix) p.emplace("key_prefix", *q.key_prefix);
    if (q.kind) p.emplace("kind", to_string(*q.kind));
    auto r = cli_.Get("/runs/" + q.run_id + "/metadata", p, httplib::Headers{});
    auto j = check(r, "gather_log");
    std::vector<MetadataEntry> out;
    for (const auto& e : j) out.push_back(entry_from_json(e));
    return out;
  }

  std::string log_artifact(const std::string& run_id, const std::string& node_id, const std::string& name,
                           std::string_view bytes) override {
    auto r = cli_.Put("/runs/" + run_id + "/artifacts/" + name + "?node_id=" + httplib::detail::encode_query_param(node_id),
                      std::string(bytes), "application/octet-stream");
    return check(r, "log_artifact").at("ref").get<std::string>();
  }

  std::string fetch_artifact(const std::string& ref) override {
    auto r = cli_.Get("/artifacts/" + ref);
    if (!r) throw TrackerUnavailable(url_);
    if (r->status == 404) throw NotFound("artifact " + ref);
    if (r->status != 200) throw IoError("fetch_artifact: HTTP " + std::to_string(r->status));
    return r->body;
  }

  std::string get_tracker_uri(const std::string& run_id) override {
    return check(cli_.Get("/runs/" + run_id + "/uri"), "get_tracker_uri").at("uri").get<std::string>();
  }

 private:
  nlohmann::json check(const httplib::Result& r, const char* what) {
    if (!r) throw TrackerUnavailable(url_);
    if (r->status == 404) throw NotFound(std::string(what) + ": " + r->body);
    if (r->status != 200) throw IoError(std::string(what) + ": HTTP " + std::to_string(r->status) + " " + r->body);
    return nlohmann::json::parse(r->body);
  }

  std::string url_;
  httplib::Client cli_;
};

}  // namespace scanflow
