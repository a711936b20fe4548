#pragma once

// JSON-over-HTTP selection service. Handlers are plain functions of the
// request body so they can be exercised without a socket.

#include <atomic>
#include <fstream>
#include <iterator>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gate/error.hpp"
#include "gate/graph.hpp"
#include "gate/json_util.hpp"
#include "gate/neural.hpp"
#include "gate/prompt.hpp"
#include "gate/selector.hpp"
#include "gate/text_encode.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

namespace gate {

// Graph, parameters, provider and selector loaded together. Not movable: the
// selector holds pointers into the graph and provider.
class RuntimeBundle {
 public:
  RuntimeBundle(UnifiedGraph graph, std::unique_ptr<EmbeddingProvider> provider, ModelParams params,
                SelectorConfig cfg)
      : graph_(std::move(graph)), provider_(std::move(provider)), params_(std::move(params)) {
    if (!provider_) throw ConfigError("bundle needs an embedding provider");
    params_.dims.validate();
    if (params_.dims.d_in != provider_->dimension())
      throw ShapeError("checkpoint expects " + std::to_string(params_.dims.d_in) + "-dim embeddings, provider gives " +
                       std::to_string(provider_->dimension()));
    auto problems = validate(graph_);
    if (!problems.empty()) throw ValidationError("graph: " + problems.front());
    selector_.emplace(graph_, *provider_, cfg);
  }
  RuntimeBundle(const RuntimeBundle&) = delete;
  RuntimeBundle& operator=(const RuntimeBundle&) = delete;

  const UnifiedGraph& graph() const { return graph_; }
  const ModelParams& params() const { return params_; }
  const Selector& selector() const { return *selector_; }
  std::size_t node_count() const { return graph_.process_nodes().size() + graph_.knowledge_nodes().size(); }

 private:
  UnifiedGraph graph_;
  std::unique_ptr<EmbeddingProvider> provider_;
  ModelParams params_;
  std::optional<Selector> selector_;
};

struct BundlePaths {
  std::string graph;
  std::string checkpoint;
  std::string embeddings;  // empty: hashed bag-of-words at the checkpoint's width
  SelectorConfig selector;
};

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return detail::parse_json_text(text);
}

inline std::unique_ptr<EmbeddingProvider> make_provider(const std::string& embeddings, std::size_t dim) {
  if (embeddings.empty()) return std::make_unique<HashedBowProvider>(dim);
  return std::make_unique<FileEmbeddingProvider>(FileEmbeddingProvider::load_file(embeddings));
}

inline std::shared_ptr<const RuntimeBundle> load_bundle(const BundlePaths& paths) {
  auto graph = graph_from_json(read_json_file(paths.graph));
  auto params = load_checkpoint(paths.checkpoint);
  auto provider = make_provider(paths.embeddings, params.dims.d_in);
  return std::make_shared<const RuntimeBundle>(std::move(graph), std::move(provider), std::move(params),
                                               paths.selector);
}

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

inline HttpReply error_reply(int status, const std::string& message, const std::string& field = {}) {
  nlohmann::json b = {{"error", message}};
  if (!field.empty()) b["field"] = field;
  return {status, std::move(b)};
}

// Bad request naming the offending field.
struct FieldError {
  std::string field;
  std::string message;
};

namespace detail {

inline nlohmann::json parse_body(const std::string& body) {
  try {
    auto j = nlohmann::json::parse(body);
    if (!j.is_object()) throw FieldError{"body", "request body must be a JSON object"};
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FieldError{"body", std::string("malformed JSON: ") + e.what()};
  }
}

inline std::vector<std::string> string_array(const nlohmann::json& j, const char* field, bool required) {
  if (!j.contains(field)) {
    if (required) throw FieldError{field, std::string("missing field \"") + field + "\""};
    return {};
  }
  const auto& v = j.at(field);
  if (!v.is_array()) throw FieldError{field, std::string("\"") + field + "\" must be an array of strings"};
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw FieldError{field, std::string("\"") + field + "\" must be an array of strings"};
    out.push_back(e.get<std::string>());
  }
  return out;
}

inline std::string string_field(const nlohmann::json& j, const char* field) {
  if (!j.contains(field)) throw FieldError{field, std::string("missing field \"") + field + "\""};
  if (!j.at(field).is_string()) throw FieldError{field, std::string("\"") + field + "\" must be a string"};
  return j.at(field).get<std::string>();
}

// Pool entries may be plain strings or objects carrying "text" (as returned by /select).
inline std::vector<std::string> pool_texts(const nlohmann::json& j) {
  if (!j.contains("pool")) return {};
  const auto& v = j.at("pool");
  if (!v.is_array()) throw FieldError{"pool", "\"pool\" must be an array"};
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (e.is_string()) {
      out.push_back(e.get<std::string>());
    } else if (e.is_object() && e.contains("text") && e.at("text").is_string()) {
      out.push_back(e.at("text").get<std::string>());
    } else {
      throw FieldError{"pool", "\"pool\" entries must be strings or objects with a \"text\" string"};
    }
  }
  return out;
}

}  // namespace detail

inline HttpReply handle_select(const RuntimeBundle& bundle, const std::string& body) {
  try {
    auto j = detail::parse_body(body);
    DialogueSample s;
    s.history = detail::string_array(j, "history", false);
    s.utterance = detail::string_field(j, "utterance");
    if (detail::is_blank(s.utterance)) throw FieldError{"utterance", "\"utterance\" must not be empty"};
    if (j.contains("start_node")) {
      s.start_node = detail::string_field(j, "start_node");
      if (!bundle.graph().has_process(*s.start_node))
        throw FieldError{"start_node", "unknown start node \"" + *s.start_node + "\""};
    }
    return {200, to_json(bundle.selector().select(bundle.params(), s))};
  } catch (const FieldError& e) {
    return error_reply(400, e.message, e.field);
  } catch (const Error& e) {
    return error_reply(422, e.what());
  }
}

inline HttpReply handle_render(const std::string& body) {
  try {
    auto j = detail::parse_body(body);
    auto history = detail::string_array(j, "history", false);
    auto pool = detail::pool_texts(j);
    PromptMode mode = PromptMode::with_knowledge;
    if (j.contains("mode")) {
      try {
        mode = prompt_mode_from_string(detail::string_field(j, "mode"));
      } catch (const ValidationError& e) {
        throw FieldError{"mode", e.what()};
      }
    }
    if (mode == PromptMode::with_knowledge && pool.empty())
      throw FieldError{"pool", "with_knowledge mode needs a non-empty \"pool\""};
    return {200, {{"prompt", render_prompt(history, pool, mode)}}};
  } catch (const FieldError& e) {
    return error_reply(400, e.message, e.field);
  }
}

inline HttpReply handle_healthz(const RuntimeBundle& bundle) {
  return {200, {{"status", "ok"}, {"graph_nodes", bundle.node_count()}}};
}

struct ServiceOptions {
  std::size_t max_inflight = 64;
};

class SelectionService {
 public:
  SelectionService(std::shared_ptr<const RuntimeBundle> bundle, ServiceOptions opt = {},
                   std::optional<BundlePaths> source = std::nullopt)
      : bundle_(std::move(bundle)), opt_(opt), source_(std::move(source)) {
    if (!bundle_) throw ConfigError("service needs a loaded bundle");
    if (opt_.max_inflight < 1) throw ConfigError("max_inflight must be >= 1");
  }

  std::shared_ptr<const RuntimeBundle> snapshot() const {
    std::lock_guard lock(mu_);
    return bundle_;
  }

  void swap(std::shared_ptr<const RuntimeBundle> next) {
    if (!next) throw ConfigError("cannot swap in an empty bundle");
    std::lock_guard lock(mu_);
    bundle_ = std::move(next);
  }

  // Reloads from the configured paths, optionally with a different checkpoint.
  // The current snapshot stays live if loading fails.
  HttpReply reload(const std::string& body) {
    std::lock_guard writer(reload_mu_);
    try {
      if (!source_) return error_reply(409, "service was not started from files; nothing to reload");
      BundlePaths paths = *source_;
      if (!body.empty()) {
        auto j = detail::parse_body(body);
        if (j.contains("checkpoint")) paths.checkpoint = detail::string_field(j, "checkpoint");
      }
      auto next = load_bundle(paths);
      std::size_t nodes = next->node_count();
      swap(std::move(next));
      source_ = paths;
      return {200, {{"status", "reloaded"}, {"graph_nodes", nodes}}};
    } catch (const FieldError& e) {
      return error_reply(400, e.message, e.field);
    } catch (const Error& e) {
      return error_reply(422, std::string("reload failed: ") + e.what());
    }
  }

  // Admission control; a request that cannot get a slot is answered with 503.
  bool try_acquire() {
    auto n = inflight_.fetch_add(1);
    if (n >= opt_.max_inflight) {
      inflight_.fetch_sub(1);
      return false;
    }
    return true;
  }
  void release() { inflight_.fetch_sub(1); }
  std::size_t inflight() const { return inflight_.load(); }

  HttpReply dispatch(const std::string& method, const std::string& path, const std::string& body) {
    if (!try_acquire()) return error_reply(503, "server overloaded, retry later");
    struct Slot {
      SelectionService* s;
      ~Slot() { s->release(); }
    } slot{this};
    if (method == "GET" && path == "/healthz") return handle_healthz(*snapshot());
    if (method == "POST" && path == "/select") return handle_select(*snapshot(), body);
    if (method == "POST" && path == "/render") return handle_render(body);
    if (method == "POST" && path == "/reload") return reload(body);
    return error_reply(404, "no route for " + method + " " + path);
  }

  void mount(httplib::Server& server) {
    auto route = [this](const std::string& method) {
      return [this, method](const httplib::Request& req, httplib::Response& res) {
        auto reply = dispatch(method, req.path, req.body);
        res.status = reply.status;
        res.set_content(reply.body.dump(), "application/json");
      };
    };
    server.Get("/healthz", route("GET"));
    server.Post("/select", route("POST"));
    server.Post("/render", route("POST"));
    server.Post("/reload", route("POST"));
  }

 private:
  mutable std::mutex mu_;
  std::mutex reload_mu_;
  std::shared_ptr<const RuntimeBundle> bundle_;
  ServiceOptions opt_;
  std::optional<BundlePaths> source_;
  std::atomic<std::size_t> inflight_{0};
};

}  // namespace gate
