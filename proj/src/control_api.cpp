// Copyright 2026 The promptreco Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <chrono>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "promptreco/control.hpp"
#include "promptreco/monitor.hpp"
#include "promptreco/net.hpp"

namespace promptreco {

namespace {

struct HttpError {
  int status;
  std::string message;
};

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::uint32_t run_param(const httplib::Request& req) {
  try {
    const auto v = std::stoul(req.matches[1].str());
    RunId check(static_cast<std::uint32_t>(v));
    return check.value();
  } catch (const std::exception&) {
    throw HttpError{400, fmt::format("bad run number '{}'", req.matches[1].str())};
  }
}

double number_param(const httplib::Request& req, const std::string& name, double fallback) {
  if (!req.has_param(name)) return fallback;
  try {
    return std::stod(req.get_param_value(name));
  } catch (const std::exception&) {
    throw HttpError{400, fmt::format("parameter '{}' is not a number", name)};
  }
}

template <typename T>
T& need(T* p, const char* what) {
  if (!p) throw HttpError{404, fmt::format("{} is not attached to this control instance", what)};
  return *p;
}

nlohmann::json series_json(const std::vector<RatePoint>& pts) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : pts) out.push_back({{"t0", p.t0}, {"t1", p.t1}, {"events", p.events}, {"rate", p.rate()}});
  return out;
}

}  // namespace

ControlServer::ControlServer(ApiHooks hooks, const std::string& host, int port)
    : hooks_(std::move(hooks)), server_(std::make_unique<httplib::Server>()) {
  if (!hooks_.clock)
    hooks_.clock = [] {
      return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    };
  auto& h = hooks_;

  // Wraps a handler with the error mapping shared by every route.
  auto route = [](auto fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        send_json(res, {{"error", e.message}}, e.status);
      } catch (const NotFoundError& e) {
        send_json(res, {{"error", e.what()}}, 404);
      } catch (const MonitorError& e) {
        send_json(res, {{"error", e.what()}}, 404);
      } catch (const ConflictError& e) {
        send_json(res, {{"error", e.what()}}, 409);
      } catch (const nlohmann::json::exception& e) {
        send_json(res, {{"error", fmt::format("malformed request body: {}", e.what())}}, 400);
      } catch (const NamingError& e) {
        send_json(res, {{"error", e.what()}}, 400);
      } catch (const ConfigError& e) {
        send_json(res, {{"error", e.what()}}, 400);
      } catch (const std::exception& e) {
        spdlog::error("control api {} {}: {}", req.method, req.path, e.what());
        send_json(res, {{"error", e.what()}}, 500);
      }
    };
  };

  server_->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  server_->Get("/status", route([&h](const httplib::Request&, httplib::Response& res) {
    auto body = need(h.orchestrator, "orchestrator").status_json();
    if (h.metrics) {
      body["rates"] = h.metrics->to_json();
      for (auto& f : body["farms"]) {
        const std::string id = f["id"];
        f["rate"] = body["rates"].contains(id) ? body["rates"][id]["rate"] : nlohmann::json(0.0);
      }
    }
    if (h.alerts) body["open_alerts"] = h.alerts->open().size();
    send_json(res, body);
  }));

  server_->Get("/runs", route([&h](const httplib::Request&, httplib::Response& res) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : need(h.orchestrator, "orchestrator").runs()) out.push_back(r.to_json());
    send_json(res, out);
  }));

  server_->Get(R"(/runs/(\d+))", route([&h](const httplib::Request& req, httplib::Response& res) {
    auto& o = need(h.orchestrator, "orchestrator");
    const RunId run(run_param(req));
    auto body = o.run(run).to_json();
    nlohmann::json transitions = nlohmann::json::array();
    for (const auto& e : o.log())
      if (e.kind == LogEntry::transition && e.run == run) transitions.push_back(e.to_json());
    body["transitions"] = transitions;
    body["qa"] = o.qa(run) ? o.qa(run)->to_json() : nlohmann::json();
    send_json(res, body);
  }));

  server_->Post("/runs", route([&h](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    if (!j.is_object() || !j.contains("run") || !j.contains("xtc") || !j["run"].is_number_unsigned() || !j["xtc"].is_string())
      throw HttpError{400, "body must be {\"run\": <number>, \"xtc\": <path>}"};
    const auto view = need(h.orchestrator, "orchestrator").submit_run(RunId(j["run"].get<std::uint32_t>()), j["xtc"].get<std::string>());
    send_json(res, view.to_json(), 201);
  }));

  server_->Post(R"(/runs/(\d+)/(hold|release))", route([&h](const httplib::Request& req, httplib::Response& res) {
    auto& o = need(h.orchestrator, "orchestrator");
    const RunId run(run_param(req));
    if (req.matches[2] == "hold") o.hold(run);
    else o.release(run);
    send_json(res, o.run(run).to_json());
  }));

  server_->Get("/alerts", route([&h](const httplib::Request& req, httplib::Response& res) {
    auto& book = need(h.alerts, "alert book");
    const bool only_open = req.has_param("open") && req.get_param_value("open") != "0";
    nlohmann::json out = nlohmann::json::array();
    for (const auto& a : only_open ? book.open() : book.all()) out.push_back(a.to_json());
    send_json(res, out);
  }));

  server_->Post(R"(/alerts/(\d+)/ack)", route([&h](const httplib::Request& req, httplib::Response& res) {
    auto& book = need(h.alerts, "alert book");
    std::uint64_t id = 0;
    try {
      id = std::stoull(req.matches[1].str());
    } catch (const std::exception&) {
      throw HttpError{400, "bad alert id"};
    }
    if (!book.acknowledge(id)) throw HttpError{404, fmt::format("alert {} does not exist", id)};
    send_json(res, book.get(id)->to_json());
  }));

  server_->Post(R"(/farms/([A-Za-z0-9_.\-]+)/(pause|resume))", route([&h](const httplib::Request& req, httplib::Response& res) {
    auto& o = need(h.orchestrator, "orchestrator");
    const auto farm = req.matches[1].str();
    if (req.matches[2] == "pause") o.pause_farm(farm);
    else o.resume_farm(farm);
    for (const auto& f : o.farms())
      if (f.spec.id == farm) return send_json(res, f.to_json());
  }));

  server_->Get(R"(/qa/(\d+))", route([&h](const httplib::Request& req, httplib::Response& res) {
    const RunId run(run_param(req));
    const auto qa = need(h.orchestrator, "orchestrator").qa(run);
    if (!qa) throw HttpError{404, fmt::format("no QA for run {}", run.str())};
    send_json(res, qa->to_json());
  }));

  server_->Get("/rates", route([&h](const httplib::Request& req, httplib::Response& res) {
    auto& m = need(h.metrics, "metrics collector");
    const double window = number_param(req, "window", 1e300);
    if (!(window > 0)) throw HttpError{400, "window must be positive"};
    const double now = h.clock();
    nlohmann::json out = nlohmann::json::object();
    if (req.has_param("farm")) {
      const auto farm = req.get_param_value("farm");
      out[farm] = series_json(m.rate_series(farm, now - window, now));
    } else {
      for (const auto& farm : m.farms()) out[farm] = series_json(m.rate_series(farm, now - window, now));
    }
    send_json(res, out);
  }));

  server_->Get("/import/status", route([&h](const httplib::Request&, httplib::Response& res) {
    if (!h.import_status) throw HttpError{404, "no import pipeline is attached"};
    send_json(res, h.import_status());
  }));

  server_->Get("/monitor/devices", route([&h](const httplib::Request&, httplib::Response& res) {
    send_json(res, need(h.monitor, "farm monitor").devices_json());
  }));

  server_->Get("/monitor/series", route([&h](const httplib::Request& req, httplib::Response& res) {
    auto& m = need(h.monitor, "farm monitor");
    if (!req.has_param("device") || !req.has_param("metric"))
      throw HttpError{400, "device and metric parameters are required"};
    const double window = number_param(req, "window", 3600);
    if (!(window > 0)) throw HttpError{400, "window must be positive"};
    const auto cap = static_cast<std::size_t>(number_param(req, "cap", 0));
    const double now = h.clock();
    const auto device = req.get_param_value("device"), metric = req.get_param_value("metric");
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : m.series(device, metric, now - window, now, cap))
      pts.push_back({{"time", p.time}, {"value", p.value}, {"min", p.min}, {"max", p.max}, {"samples", p.samples}});
    send_json(res, {{"device", device}, {"metric", metric}, {"window", window}, {"points", pts}});
  }));

  port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (port_ <= 0) throw NetError(fmt::format("control API cannot bind {}:{}", host, port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

ControlServer::~ControlServer() { stop(); }

void ControlServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace promptreco
