#pragma once

// REST service: localisation, retrieval and multi-product search over
// multipart/form-data requests with `image` and `params` parts.
//
// Handlers are plain member functions returning an HttpReply so they can be
// exercised without a socket; HttpServer adapts them to cpp-httplib.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "vsearch/filter_bank.hpp"
#include "vsearch/localiser.hpp"
#include "vsearch/pipeline.hpp"
#include "vsearch/remote_detector.hpp"

namespace vsearch {

struct ServiceLimits {
  std::size_t max_image_bytes = 10u << 20;
  std::size_t max_top_k = 100;
};

struct ServiceConfig {
  std::string host = "0.0.0.0";
  int port = 8080;
  std::filesystem::path database_config;  // empty: no databases
  std::filesystem::path detector_config;  // empty: fixture-free defaults
  ServiceLimits limits;
  std::string instance_id = "vsearch";
  unsigned threads = 8;

  void validate() const {
    if (port < 0 || port > 65535) throw Error(ErrorCode::kInvalidArgument, "port out of range");
    if (limits.max_image_bytes == 0 || limits.max_top_k == 0) throw Error(ErrorCode::kInvalidArgument, "limits must be positive");
    if (threads == 0) throw Error(ErrorCode::kInvalidArgument, "threads must be positive");
  }

  /// JSON config; relative paths resolve against the config file's directory.
  static ServiceConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kIoError, "cannot open service config " + path.string());
    ServiceConfig c;
    try {
      const auto j = nlohmann::json::parse(in);
      const auto base = path.parent_path();
      c.host = j.value("host", c.host);
      c.port = j.value("port", c.port);
      c.instance_id = j.value("instance_id", c.instance_id);
      c.threads = j.value("threads", c.threads);
      if (j.contains("databases")) c.database_config = base / j.at("databases").get<std::string>();
      if (j.contains("detectors")) c.detector_config = base / j.at("detectors").get<std::string>();
      if (j.contains("limits")) {
        c.limits.max_image_bytes = j["limits"].value("max_image_bytes", c.limits.max_image_bytes);
        c.limits.max_top_k = j["limits"].value("max_top_k", c.limits.max_top_k);
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + ": " + e.what());
    }
    c.validate();
    return c;
  }
};

/// Detector config JSON:
///   {"categories": [...], "default": "name",
///    "detectors": [{"name": "...", "type": "fixture", "annotations": "file.json"},
///                  {"name": "...", "type": "wholeframe"},
///                  {"name": "...", "type": "remote", "url": "http://host:port", "model": "..."}]}
inline std::shared_ptr<DetectorRegistry> load_detector_registry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open detector config " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    auto categories = j.value("categories", default_categories());
    auto reg = std::make_shared<DetectorRegistry>(categories);
    for (const auto& d : j.value("detectors", nlohmann::json::array())) {
      const auto name = d.at("name").get<std::string>();
      const auto type = d.at("type").get<std::string>();
      if (type == "fixture") {
        reg->install(name, std::make_shared<FixtureDetector>(
                               load_annotations(path.parent_path() / d.at("annotations").get<std::string>())));
      } else if (type == "wholeframe") {
        reg->install(name, std::make_shared<WholeFrameDetector>(categories));
      } else if (type == "remote") {
        reg->install(name, std::make_shared<RemoteDetector>(d.at("url").get<std::string>(), d.value("model", "")));
      } else {
        throw Error(ErrorCode::kInvalidArgument, "unknown detector type '" + type + "'");
      }
    }
    if (j.contains("default")) reg->set_default(j.at("default").get<std::string>());
    return reg;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, path.string() + ": " + e.what());
  }
}

struct HttpReply {
  int status = 200;
  std::string body;
  std::optional<double> elapsed_ms;  // reported as a header, never in the body
};

/// The two multipart parts of a request.
struct Upload {
  std::optional<std::string> image;
  std::optional<std::string> params;
};

class Service {
 public:
  Service(ServiceConfig config, CategoryDatabases databases, std::shared_ptr<DetectorRegistry> detectors)
      : config_(std::move(config)), databases_(std::move(databases)), detectors_(std::move(detectors)) {
    config_.validate();
    if (!detectors_) detectors_ = std::make_shared<DetectorRegistry>();
  }

  static Service from_config(const ServiceConfig& config) {
    CategoryDatabases dbs;
    if (!config.database_config.empty()) dbs = load_databases(config.database_config);
    std::shared_ptr<DetectorRegistry> reg;
    if (!config.detector_config.empty()) reg = load_detector_registry(config.detector_config);
    return Service(config, std::move(dbs), std::move(reg));
  }

  const ServiceConfig& config() const { return config_; }
  DetectorRegistry& detectors() { return *detectors_; }
  const CategoryDatabases& databases() const { return databases_; }

  HttpReply localise(const Upload& up) const {
    return guarded([&] {
      const auto params = parse_params(up);
      const auto img = decode_upload(up);
      const auto dets = detect(*detectors_, params.value("model", ""), img, params.value("conf_thresh", 0.5));
      return HttpReply{200, nlohmann::json{{"detections", dets}}.dump()};
    });
  }

  HttpReply retrieve(const Upload& up) const {
    return guarded([&] {
      const auto params = parse_params(up);
      const auto top_k = parse_top_k(params);
      if (!params.contains("database")) return error(400, "BadRequest", "params.database is required");
      const auto name = params.at("database").get<std::string>();
      const auto it = databases_.find(name);
      if (it == databases_.end()) return error(404, "UnknownDatabase", "no database named '" + name + "'");
      const auto img = decode_upload(up);
      const auto result = vsearch::retrieve(img, it->second, bank_, top_k);
      return HttpReply{200, nlohmann::json{{"database", name},
                                           {"degraded", result.degraded},
                                           {"results", ranked_json(result.ranked)}}
                                .dump()};
    });
  }

  HttpReply multisearch(const Upload& up) const {
    return guarded([&] {
      const auto params = parse_params(up);
      MultiSearchOptions opts;
      opts.model = params.value("model", "");
      opts.conf_threshold = params.value("conf_thresh", 0.5);
      opts.top_k = parse_top_k(params);
      const auto img = decode_upload(up);
      const auto result = multi_search(img, databases_, *detectors_, bank_, opts);
      nlohmann::json groups = nlohmann::json::array();
      for (const auto& g : result.groups) {
        nlohmann::json jg = g.detection;
        jg["degraded"] = g.degraded;
        jg["results"] = ranked_json(g.ranked);
        if (!g.error.empty()) jg["error"] = g.error;
        groups.push_back(std::move(jg));
      }
      HttpReply reply{200, nlohmann::json{{"degraded", result.degraded}, {"groups", groups}}.dump()};
      reply.elapsed_ms = std::chrono::duration<double, std::milli>(result.wall_time).count();
      return reply;
    });
  }

  /// 503 until at least one detector and one database are loaded.
  HttpReply health() const {
    nlohmann::json dbs = nlohmann::json::object();
    for (const auto& [name, db] : databases_) {
      nlohmann::json shards = nlohmann::json::array();
      for (const auto& s : db.shards.shards()) {
        nlohmann::json js = {{"lo", s.range.lo}, {"hi", s.range.hi}, {"available", s.up()}};
        if (!s.unavailable_reason.empty()) js["reason"] = s.unavailable_reason;
        shards.push_back(std::move(js));
      }
      dbs[name] = {{"available", db.shards.all_up()}, {"shards", shards}};
    }
    const bool ready = !detectors_->empty() && !databases_.empty();
    nlohmann::json body = {{"status", ready ? "ok" : "not_ready"},
                           {"instance", config_.instance_id},
                           {"databases", dbs},
                           {"detectors", detectors_->names()},
                           {"default_detector", detectors_->default_name()}};
    return {ready ? 200 : 503, body.dump()};
  }

  static HttpReply error(int status, const std::string& code, const std::string& message) {
    return {status, nlohmann::json{{"code", code}, {"message", message}}.dump()};
  }

 private:
  template <typename Fn>
  HttpReply guarded(Fn&& fn) const {
    try {
      return fn();
    } catch (const RequestError& e) {
      return error(e.status, e.code, e.what());
    } catch (const Error& e) {
      return error(status_for(e.code()), std::string(to_string(e.code())), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, "BadRequest", e.what());
    } catch (const std::exception& e) {
      return error(500, "Internal", e.what());
    }
  }

  struct RequestError : std::runtime_error {
    RequestError(int s, std::string c, const std::string& m) : std::runtime_error(m), status(s), code(std::move(c)) {}
    int status;
    std::string code;
  };

  static int status_for(ErrorCode code) {
    switch (code) {
      case ErrorCode::kDecodeError:
      case ErrorCode::kTooSmall:
      case ErrorCode::kEmptyDescriptorSet: return 422;
      case ErrorCode::kUnknownModel: return 404;
      case ErrorCode::kNoShardsAvailable: return 503;
      case ErrorCode::kInvalidArgument: return 400;
      default: return 500;
    }
  }

  nlohmann::json parse_params(const Upload& up) const {
    if (!up.params || up.params->empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(*up.params, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw RequestError(400, "BadRequest", "params is not a JSON object");
    return j;
  }

  std::size_t parse_top_k(const nlohmann::json& params) const {
    const auto fallback = static_cast<std::int64_t>(std::min<std::size_t>(10, config_.limits.max_top_k));
    const auto top_k = params.value("top_k", fallback);
    if (top_k < 1 || static_cast<std::size_t>(top_k) > config_.limits.max_top_k) {
      throw RequestError(400, "BadRequest", "top_k must be in [1, " + std::to_string(config_.limits.max_top_k) + "]");
    }
    return static_cast<std::size_t>(top_k);
  }

  RgbImage decode_upload(const Upload& up) const {
    if (!up.image) throw RequestError(400, "BadRequest", "missing multipart part 'image'");
    if (up.image->size() > config_.limits.max_image_bytes) {
      throw RequestError(413, "PayloadTooLarge", "image exceeds " + std::to_string(config_.limits.max_image_bytes) + " bytes");
    }
    return decode_image(*up.image);
  }

  static nlohmann::json ranked_json(const std::vector<RankedResult>& ranked) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : ranked) out.push_back({{"image_id", r.image_id}, {"distance", r.distance}});
    return out;
  }

  ServiceConfig config_;
  CategoryDatabases databases_;
  std::shared_ptr<DetectorRegistry> detectors_;
  FilterBank bank_;
};

/// cpp-httplib front end. Request handling runs on a worker pool; stop() lets
/// in-flight requests finish.
class HttpServer {
 public:
  explicit HttpServer(Service& service) : service_(service) {
    const auto threads = service_.config().threads;
    server_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    // Transport limit above the image limit so the handler can answer 413 with a JSON body.
    server_.set_payload_max_length(service_.config().limits.max_image_bytes + (1u << 20));
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
      const auto reply = Service::error(res.status, res.status == 413 ? "PayloadTooLarge" : "HttpError",
                                        httplib::status_message(res.status));
      res.set_content(reply.body, "application/json");
      return httplib::Server::HandlerResponse::Handled;
    });
    auto bind = [this](auto member) {
      return [this, member](const httplib::Request& req, httplib::Response& res) {
        if (!req.is_multipart_form_data()) {
          send(res, Service::error(400, "BadRequest", "expected multipart/form-data"));
          return;
        }
        Upload up;
        if (req.has_file("image")) up.image = req.get_file_value("image").content;
        if (req.has_file("params")) up.params = req.get_file_value("params").content;
        send(res, (service_.*member)(up));
      };
    };
    server_.Post("/v1/localise", bind(&Service::localise));
    server_.Post("/v1/retrieve", bind(&Service::retrieve));
    server_.Post("/v1/multisearch", bind(&Service::multisearch));
    server_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) { send(res, service_.health()); });
  }

  /// Binds; port 0 picks a free port. Returns the bound port or -1.
  int bind(const std::string& host, int port) {
    if (port == 0) return server_.bind_to_any_port(host);
    return server_.bind_to_port(host, port) ? port : -1;
  }

  /// Blocks serving until stop().
  bool listen() { return server_.listen_after_bind(); }

  void stop() { server_.stop(); }
  bool running() const { return server_.is_running(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  static void send(httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    if (reply.elapsed_ms) res.set_header("X-Elapsed-Ms", std::to_string(*reply.elapsed_ms));
    res.set_content(reply.body, "application/json");
  }

  Service& service_;
  httplib::Server server_;
};

}  // namespace vsearch
