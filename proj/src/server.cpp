#include "aelab/server.hpp"

#include <fstream>
#include <iterator>
#include <regex>
#include <thread>

#include "aelab/errors.hpp"
#include "httplib.h"
#include "json.hpp"

namespace aelab {
namespace {

using nlohmann::json;

constexpr const char* kJson = "application/json; charset=utf-8";

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_header("Cache-Control", "no-store");
  res.set_content(body.dump(), kJson);
}

void fail(httplib::Response& res, int status, const std::string& message) {
  reply(res, status, json{{"error", message}});
}

json parse_body(const httplib::Request& req) {
  auto body = json::parse(req.body, nullptr, false);
  if (body.is_discarded() || !body.is_object()) {
    throw ValidationError("request body must be a JSON object");
  }
  return body;
}

std::string string_field(const json& body, const char* name) {
  const auto it = body.find(name);
  if (it == body.end() || !it->is_string()) {
    throw ValidationError(std::string("field '") + name + "' must be a string");
  }
  return it->get<std::string>();
}

/// Maps the service's error types onto status codes.
template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    fail(res, 400, e.what());
  } catch (const NotFoundError& e) {
    fail(res, 404, e.what());
  } catch (const ConflictError& e) {
    fail(res, 409, e.what());
  } catch (const std::exception& e) {
    fail(res, 500, e.what());
  }
}

}  // namespace

struct RatingServer::Impl {
  RatingService& service;
  RatingServerOptions options;
  httplib::Server http;
  int port = -1;
  std::thread thread;

  Impl(RatingService& s, RatingServerOptions o) : service(s), options(std::move(o)) {}

  void routes() {
    http.set_payload_max_length(64 * 1024);

    http.Post("/api/session", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        std::string rater;
        if (!req.body.empty()) {
          const auto body = parse_body(req);
          if (body.contains("rater_id")) rater = string_field(body, "rater_id");
        }
        reply(res, 200, json{{"session_id", service.create_session(rater)}});
      });
    });

    http.Get("/api/next", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.has_param("session")) throw ValidationError("missing query parameter 'session'");
        const auto next = service.schedule_next(req.get_param_value("session"));
        const json progress = {{"rated", next.rated}, {"total", next.total}};
        if (next.exhausted) {
          reply(res, 200, json{{"exhausted", true}, {"progress", progress}});
          return;
        }
        reply(res, 200,
              json{{"item_id", next.item_id},
                   {"image_url", next.image_url},
                   {"original_url", next.original_url},
                   {"progress", progress}});
      });
    });

    http.Post("/api/rating", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        const auto session = string_field(body, "session_id");
        const auto item = string_field(body, "item_id");
        const auto it = body.find("rating");
        if (it == body.end() || !it->is_number_integer()) {
          throw ValidationError("field 'rating' must be an integer from 1 to 5");
        }
        const auto value = it->get<long long>();
        if (value < 1 || value > 5) {
          throw ValidationError("rating must be an integer from 1 to 5, got " + std::to_string(value));
        }
        service.record_rating(session, item, static_cast<int>(value));
        reply(res, 200, json{{"accepted", true}});
      });
    });

    http.Get("/api/report", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        res.status = 200;
        res.set_header("Cache-Control", "no-store");
        res.set_content(mos_report_json(service.report()), kJson);
      });
    });

    http.Get(R"(/img/([0-9a-z]+\.png))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string file = req.matches[1];
      if (!service.is_servable(file)) {
        fail(res, 404, "no such image");
        return;
      }
      std::ifstream in(options.image_dir / file, std::ios::binary);
      if (!in) {
        fail(res, 404, "no such image");
        return;
      }
      std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      res.status = 200;
      res.set_content(std::move(bytes), "image/png");
    });

    if (options.ui_dir && !http.set_mount_point("/", options.ui_dir->string())) {
      throw ConfigError("UI directory " + options.ui_dir->string() + " does not exist");
    }
  }
};

RatingServer::RatingServer(RatingService& service, RatingServerOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  impl_->routes();
}

RatingServer::~RatingServer() { stop(); }

int RatingServer::bind(int port) {
  if (port == 0) {
    impl_->port = impl_->http.bind_to_any_port(impl_->options.host);
  } else if (impl_->http.bind_to_port(impl_->options.host, port)) {
    impl_->port = port;
  } else {
    impl_->port = -1;
  }
  if (impl_->port < 0) {
    throw IoError("cannot bind " + impl_->options.host + ":" + std::to_string(port));
  }
  return impl_->port;
}

void RatingServer::run() {
  if (impl_->port < 0) throw ContractError("RatingServer::run before bind");
  impl_->http.listen_after_bind();
}

void RatingServer::start() {
  if (impl_->port < 0) throw ContractError("RatingServer::start before bind");
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
}

void RatingServer::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int RatingServer::port() const { return impl_->port; }

}  // namespace aelab
