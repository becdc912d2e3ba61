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

// Single binary, one subcommand per role.

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "promptreco/bookkeeping.hpp"
#include "promptreco/conditions.hpp"
#include "promptreco/control.hpp"
#include "promptreco/dispatch.hpp"
#include "promptreco/evstore.hpp"
#include "promptreco/monitor.hpp"
#include "promptreco/services.hpp"
#include "promptreco/sim.hpp"
#include "promptreco/transfer.hpp"
#include "promptreco/worker.hpp"

namespace fs = std::filesystem;
using namespace promptreco;

namespace {

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

// Blocks until SIGINT/SIGTERM, or for `seconds` when positive.
void wait_for_stop(double seconds) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
  while (!g_stop && (seconds <= 0 || std::chrono::steady_clock::now() < until))
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
}

void announce(const std::string& role, const std::string& where) {
  std::cout << fmt::format("{} listening on {}", role, where) << std::endl;
}

// --config file then --set key=value overrides, shared by every subcommand.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "PipelineConfig file (key=value lines or JSON)");
    app->add_option("--set", sets, "override one config key, key=value");
  }
  std::map<std::string, std::string> overrides() const {
    std::map<std::string, std::string> out;
    if (!file.empty()) out = read_key_values(file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(fmt::format("--set expects key=value, got '{}'", s));
      out[s.substr(0, eq)] = s.substr(eq + 1);
    }
    return out;
  }
  PipelineConfig load() const {
    PipelineConfig cfg;
    for (const auto& [k, v] : overrides()) cfg.set(k, v);
    cfg.validate();
    return cfg;
  }
};

LookupMode parse_mode(const std::string& s) {
  if (s == "two_pass") return LookupMode::two_pass;
  if (s == "one_pass") return LookupMode::one_pass;
  throw ConfigError(fmt::format("mode must be two_pass or one_pass, not '{}'", s));
}

void write_json(const nlohmann::json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << std::endl;
    return;
  }
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw Error(fmt::format("cannot write {}", path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-pass prompt reconstruction: daemons, tools and the end-to-end simulation"};
  app.require_subcommand(1);
  app.add_option_function<std::string>(
      "--log-level", [](const std::string& l) { spdlog::set_level(spdlog::level::from_str(l)); },
      "trace, debug, info, warn, error");
  int rc = 0;

  // gen
  auto* gen = app.add_subcommand("gen", "write a synthetic XTC run file");
  ConfigArgs gen_cfg;
  gen_cfg.attach(gen);
  std::string gen_out;
  std::uint32_t gen_run = 1, gen_events = 2000;
  double gen_duration = 600;
  DetectorTruth truth;
  gen->add_option("--out", gen_out, "output path")->required();
  gen->add_option("--run", gen_run, "run number")->required();
  gen->add_option("--events", gen_events, "events in the run");
  gen->add_option("--duration", gen_duration, "seconds of data taking covered");
  gen->add_option("--pedestal-drift", truth.pedestal_drift, "pedestal change per run");
  gen->add_option("--gain-drift", truth.gain_drift, "gain change per run");
  gen->add_option("--reference-run", truth.reference_run, "run with the nominal constants");
  gen->add_option("--noise", truth.noise_sigma, "readout noise sigma");
  gen->add_option("--seed", truth.seed, "truth seed");
  gen->callback([&] {
    const auto cfg = gen_cfg.load();
    auto h = generate_run(gen_out, RunId(gen_run), gen_events, gen_duration, truth, cfg.event_payload_bytes);
    write_json({{"file", gen_out}, {"run", h.run.value()}, {"events", h.event_count}}, "-");
  });

  // lm
  auto* lm = app.add_subcommand("lm", "logging manager: serve one run's events to workers");
  ConfigArgs lm_cfg;
  lm_cfg.attach(lm);
  std::string lm_xtc, lm_listen = "127.0.0.1:0", lm_log;
  lm->add_option("--xtc", lm_xtc, "run file")->required()->check(CLI::ExistingFile);
  lm->add_option("--listen", lm_listen, "host:port");
  lm->add_option("--decision-log", lm_log, "JSON-lines decision log");
  lm->callback([&] {
    auto summary = serve(lm_xtc, Endpoint::parse(lm_listen), lm_cfg.load(),
                         lm_log.empty() ? std::nullopt : std::optional<fs::path>(lm_log),
                         [](const Endpoint& ep) { announce("lm", ep.str()); });
    write_json(summary.to_json(), "-");
    if (!summary.balanced()) rc = 1;
  });

  // worker
  auto* worker = app.add_subcommand("worker", "reconstruction worker");
  ConfigArgs w_cfg;
  w_cfg.attach(worker);
  std::string w_lm, w_store, w_cond, w_fed = "ER", w_release = "14.5.2", w_mode = "two_pass";
  std::uint32_t w_id = 1, w_run = 0, w_version = 0;
  std::uint64_t w_seed = 1;
  worker->add_option("--lm", w_lm, "logging manager host:port")->required();
  worker->add_option("--store", w_store, "event store host:port")->required();
  worker->add_option("--conditions", w_cond, "conditions host:port")->required();
  worker->add_option("--federation", w_fed, "conditions federation to read");
  worker->add_option("--id", w_id, "worker id, unique per run");
  worker->add_option("--run", w_run, "run being processed (names the output collections)")->required();
  worker->add_option("--version", w_version, "processing version, zero-based");
  worker->add_option("--release", w_release, "software release");
  worker->add_option("--mode", w_mode, "two_pass or one_pass");
  worker->add_option("--seed", w_seed, "commit jitter seed");
  worker->callback([&] {
    WorkerContext ctx;
    ctx.worker_id = w_id;
    ctx.config = w_cfg.load();
    ctx.mode = parse_mode(w_mode);
    ctx.collections = collection_names(ctx.registry, w_release, true, w_version, RunId(w_run));
    ctx.seed = w_seed;
    LmClient l(Endpoint::parse(w_lm), w_id);
    StoreClient s(Endpoint::parse(w_store), w_id);
    ConditionsClient c(Endpoint::parse(w_cond), w_fed);
    auto sum = run_worker(ctx, l, s, c);
    write_json({{"worker", sum.worker},
                {"assigned", sum.assigned},
                {"accepted", sum.accepted},
                {"filtered", sum.filtered},
                {"committed", sum.committed},
                {"flushes", sum.flushes},
                {"calib_version", sum.calib_version.value_or("")},
                {"error", sum.error.value_or("")}},
               "-");
    if (sum.crashed || sum.error) rc = 1;
  });

  // store / chs
  ConfigArgs st_cfg;
  std::string st_dir, st_listen = "127.0.0.1:0";
  double st_for = 0;
  auto store_main = [&] {
    auto opts = StoreOptions::from(st_cfg.load(), st_dir);
    EventStore store(opts);
    StoreServer server(store, Endpoint::parse(st_listen));
    announce("store", server.endpoint().str());
    wait_for_stop(st_for);
    server.stop();
  };
  for (const char* name : {"store", "chs"}) {
    auto* st = app.add_subcommand(name, std::string(name) == "chs" ? "alias of store: clustering hint server role"
                                                                     : "event store daemon with the clustering hint server");
    st_cfg.attach(st);
    st->add_option("--dir", st_dir, "database directory")->required();
    st->add_option("--listen", st_listen, "host:port");
    st->add_option("--for", st_for, "exit after this many seconds (0: until signalled)");
    st->callback(store_main);
  }

  // conditions
  auto* cond = app.add_subcommand("conditions", "conditions database: serve, look up, list");
  ConfigArgs c_cfg;
  c_cfg.attach(cond);
  std::string c_root, c_listen = "127.0.0.1:0", c_fed = "PC", c_mode = "two_pass";
  std::uint32_t c_run = 0;
  double c_for = 0;
  cond->add_option("--root", c_root, "conditions directory")->required();
  auto* c_serve = cond->add_subcommand("serve", "answer lookups over TCP");
  c_serve->add_option("--listen", c_listen, "host:port");
  c_serve->add_option("--for", c_for, "exit after this many seconds");
  c_serve->callback([&] {
    ConditionsStore store(c_root);
    ConditionsServer server(store, Endpoint::parse(c_listen));
    announce("conditions", server.endpoint().str());
    wait_for_stop(c_for);
    server.stop();
  });
  auto* c_lookup = cond->add_subcommand("lookup", "print the constants a run would use");
  c_lookup->add_option("--federation", c_fed, "federation");
  c_lookup->add_option("--run", c_run, "run")->required();
  c_lookup->add_option("--mode", c_mode, "two_pass or one_pass");
  c_lookup->callback([&] {
    ConditionsStore store(c_root);
    std::cout << store.lookup(c_fed, RunId(c_run), parse_mode(c_mode)).encode();
  });
  auto* c_list = cond->add_subcommand("list", "validity starts in a federation");
  c_list->add_option("--federation", c_fed, "federation");
  c_list->callback([&] {
    ConditionsStore store(c_root);
    nlohmann::json out = nlohmann::json::array();
    for (auto v : store.validity_starts(c_fed)) out.push_back(v.value());
    write_json({{"federation", c_fed}, {"validity_starts", out}}, "-");
  });
  std::string c_xtc;
  auto* c_cal = cond->add_subcommand("calibrate", "PC one run file and publish its constants");
  c_cal->add_option("--xtc", c_xtc, "run file")->required()->check(CLI::ExistingFile);
  c_cal->add_option("--federation", c_fed, "federation to publish into");
  c_cal->callback([&] {
    const auto cfg = c_cfg.load();
    XtcReader reader(c_xtc);
    PcSampler sampler(cfg.sample_interval_s);
    CalibrationStats stats;
    while (auto e = reader.next())
      if (sampler.accept(*e)) stats = accumulate(std::move(stats), *e);
    const std::array<RunStats, 1> window = {RunStats{reader.header().run, stats}};
    auto cal = roll(window, cfg.calib_min_samples);
    if (!cal) throw ConditionsError(fmt::format("{} has only {} calibration samples", c_xtc, stats.samples()));
    ConditionsStore store(c_root);
    store.publish(c_fed, *cal);
    std::cout << cal->encode();
  });
  cond->require_subcommand(1);

  // control
  auto* ctl = app.add_subcommand("control", "run state machine and the operator HTTP API");
  ConfigArgs ctl_cfg;
  ctl_cfg.attach(ctl);
  std::string ctl_root, ctl_host = "127.0.0.1", ctl_mode = "two_pass", ctl_webhook, ctl_devices;
  int ctl_port = 8080;
  std::uint32_t ctl_pc = 1, ctl_er = 2, ctl_workers = 4;
  double ctl_for = 0;
  ctl->add_option("--root", ctl_root, "state directory (conditions, bookkeeping, control log)")->required();
  ctl->add_option("--host", ctl_host, "API bind address");
  ctl->add_option("--port", ctl_port, "API port (0 picks one)");
  ctl->add_option("--pc-farms", ctl_pc, "PC farms");
  ctl->add_option("--er-farms", ctl_er, "ER farms");
  ctl->add_option("--workers", ctl_workers, "workers per farm");
  ctl->add_option("--mode", ctl_mode, "two_pass or one_pass");
  ctl->add_option("--webhook", ctl_webhook, "alert webhook URL");
  ctl->add_option("--devices", ctl_devices, "farm monitor device file");
  ctl->add_option("--for", ctl_for, "exit after this many seconds");
  ctl->callback([&] {
    ctl_cfg.load();
    fs::create_directories(ctl_root);
    auto clock = [] {
      return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    };
    ConditionsStore conditions(fs::path(ctl_root) / "conditions");
    Bookkeeping bk(fs::path(ctl_root) / "bookkeeping.jsonl");
    AlertBook alerts(clock);
    alerts.add_sink(std::make_shared<LogSink>());
    if (!ctl_webhook.empty()) alerts.add_sink(std::make_shared<WebhookSink>(ctl_webhook));
    std::vector<FarmSpec> farms;
    for (std::uint32_t i = 1; i <= ctl_pc; ++i) farms.push_back({fmt::format("pc-{}", i), FarmKind::PC, ctl_workers, {}});
    for (std::uint32_t i = 1; i <= ctl_er; ++i) farms.push_back({fmt::format("er-{}", i), FarmKind::ER, ctl_workers, {}});
    ControlOptions opts;
    opts.mode = parse_mode(ctl_mode);
    opts.log = fs::path(ctl_root) / "control.jsonl";
    Orchestrator orch(farms, conditions, bk, alerts, opts, clock);
    MetricsCollector metrics(clock, &alerts);
    std::unique_ptr<Monitor> monitor;
    std::unique_ptr<Scraper> scraper;
    if (!ctl_devices.empty()) {
      monitor = std::make_unique<Monitor>(load_devices(ctl_devices), MonitorOptions{},
                                          [&alerts](const std::string& src, const std::string& msg) {
                                            alerts.raise(Severity::warning, src, msg, src);
                                          });
      scraper = std::make_unique<Scraper>(*monitor, clock);
    }
    ControlServer api({&orch, &alerts, &metrics, monitor.get(), {}, clock}, ctl_host, ctl_port);
    announce("control", fmt::format("http://{}:{}", ctl_host, api.port()));
    wait_for_stop(ctl_for);
    if (scraper) scraper->stop();
    api.stop();
  });

  // import
  auto* imp = app.add_subcommand("import", "bring run files from the remote site: stage, transfer, verify, archive");
  ConfigArgs imp_cfg;
  imp_cfg.attach(imp);
  ImportOptions iopts;
  std::vector<std::string> imp_files;
  std::string imp_source, imp_staging, imp_dest, imp_archive, imp_log;
  imp->add_option("--source", imp_source, "remote directory")->required();
  imp->add_option("--staging", imp_staging, "remote staging directory")->required();
  imp->add_option("--dest", imp_dest, "local directory")->required();
  imp->add_option("--archive", imp_archive, "local archive directory")->required();
  imp->add_option("--retry-interval", iopts.retry_interval_s, "seconds between retries");
  imp->add_option("--max-retries", iopts.max_retries, "retries before a file fails for good");
  imp->add_option("--event-log", imp_log, "JSON-lines event log");
  imp->add_option("files", imp_files, "file names under --source")->required();
  imp->callback([&] {
    imp_cfg.load();
    iopts.source_dir = imp_source;
    iopts.staging_dir = imp_staging;
    iopts.dest_dir = imp_dest;
    iopts.archive_dir = imp_archive;
    if (!imp_log.empty()) iopts.event_log = imp_log;
    auto rep = run_import(imp_files, iopts);
    write_json(rep.final_state.to_json(), "-");
    for (const auto& j : rep.final_state.jobs)
      if (j.state != ImportStage::done) rc = 1;
  });

  // export
  auto* exp = app.add_subcommand("export", "ship closed database files: QA, transfer, verify");
  ConfigArgs exp_cfg;
  exp_cfg.attach(exp);
  ExportOptions eopts;
  std::vector<std::string> exp_files;
  std::string exp_dest, exp_log;
  exp->add_option("--cycle", eopts.cycle_id, "export cycle id");
  exp->add_option("--dest", exp_dest, "destination directory")->required();
  exp->add_option("--status-log", exp_log, "status table (JSON lines); resumes an interrupted cycle")->required();
  exp->add_option("files", exp_files, "database files")->required();
  exp->callback([&] {
    exp_cfg.load();
    eopts.dest_dir = exp_dest;
    eopts.status_log = exp_log;
    eopts.alert = [](const std::string& key, const std::string& msg) { spdlog::error("[{}] {}", key, msg); };
    fs::create_directories(exp_dest);
    std::vector<fs::path> files(exp_files.begin(), exp_files.end());
    auto rep = run_export(files, eopts);
    write_json(rep.cycle.to_json(), "-");
    for (const auto& [n, f] : rep.cycle.files)
      if (f.state != ExportState::verified) rc = 1;
  });

  // monitor
  auto* mon = app.add_subcommand("monitor", "farm node monitoring");
  ConfigArgs mon_cfg;
  mon_cfg.attach(mon);
  std::string mon_device, mon_host = "127.0.0.1", mon_devices;
  int mon_port = 0;
  double mon_for = 0;
  std::uint64_t mon_seed = 1;
  auto* agent = mon->add_subcommand("agent", "serve synthetic node metrics on GET /metrics");
  agent->add_option("--device", mon_device, "device id")->required();
  agent->add_option("--host", mon_host, "bind address");
  agent->add_option("--port", mon_port, "port (0 picks one)");
  agent->add_option("--seed", mon_seed, "sample seed");
  agent->add_option("--for", mon_for, "exit after this many seconds");
  agent->callback([&] {
    auto device = mon_device;
    auto seed = mon_seed;
    NodeAgent a(device, mon_host, mon_port, [device, seed](double t) { return synthesize_sample(device, t, seed); });
    announce("agent", fmt::format("{}:{}", mon_host, a.port()));
    wait_for_stop(mon_for);
    a.stop();
  });
  auto* watch = mon->add_subcommand("watch", "scrape the configured devices and print their state");
  watch->add_option("--devices", mon_devices, "device file")->required()->check(CLI::ExistingFile);
  watch->add_option("--for", mon_for, "seconds to watch")->required();
  watch->callback([&] {
    Monitor m(load_devices(mon_devices), {}, [](const std::string& src, const std::string& msg) {
      spdlog::warn("[{}] {}", src, msg);
    });
    {
      Scraper s(m);
      wait_for_stop(mon_for);
      s.stop();
    }
    write_json(m.devices_json(), "-");
  });
  mon->require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "end-to-end run: generate, import, PC, ER, audits, report");
  ConfigArgs sim_cfg;
  sim_cfg.attach(sim);
  std::string sim_plan, sim_work = "sim-work", sim_report;
  bool sim_in_process = false;
  int sim_api = -1;
  sim->add_option("--plan", sim_plan, "plan file (JSON)")->check(CLI::ExistingFile);
  sim->add_option("--work", sim_work, "work directory (emptied first)");
  sim->add_option("--report", sim_report, "report path (default <work>/report.json only)");
  sim->add_flag("--in-process", sim_in_process, "call daemons directly instead of over loopback sockets");
  sim->add_option("--api-port", sim_api, "serve the control API while running (0 picks a port)");
  sim->callback([&] {
    auto plan = sim_plan.empty() ? SimulationPlan{} : SimulationPlan::load(sim_plan);
    for (const auto& [k, v] : sim_cfg.overrides()) plan.config[k] = v;
    if (sim_in_process) plan.in_process = true;
    if (sim_api >= 0) plan.api_port = sim_api;
    auto report = simulate(plan, sim_work);
    if (!sim_report.empty()) write_json(report.json, sim_report);
    const auto& rt = report.json["runtime"];
    std::cout << fmt::format("runs {}  wall {:.2f}s  workers {}  crashes {}  mean|residual| {:.5f}\n",
                             report.json["deterministic"]["runs"].size(), rt["wall_s"].get<double>(),
                             rt["workers_spawned"].get<std::uint64_t>(), rt["worker_crashes"].get<std::uint64_t>(),
                             report.json["deterministic"]["mean_abs_residual"].get<double>());
    for (const auto& [name, a] : report.json["audits"].items())
      std::cout << fmt::format("  audit {:<12} {}\n", name, a["ok"].get<bool>() ? "ok" : "FAILED");
    for (const auto& v : report.violations()) std::cout << "  violation " << v << '\n';
    std::cout << "report " << (fs::path(sim_work) / "report.json").string() << std::endl;
    if (!report.ok()) rc = 1;
  });

  // plot
  auto* plt = app.add_subcommand("plot", "rate and residual plots from a simulation report");
  ConfigArgs plt_cfg;
  plt_cfg.attach(plt);
  std::string plt_report, plt_out = "plots";
  plt->add_option("--report", plt_report, "report.json")->required()->check(CLI::ExistingFile);
  plt->add_option("--out", plt_out, "output directory");
  plt->callback([&] {
    std::ifstream in(plt_report);
    auto summary = plot(nlohmann::json::parse(in), plt_out);
    for (const auto& f : summary.files) std::cout << f.string() << '\n';
    for (const auto& [farm, g] : summary.gaps) std::cout << fmt::format("{}: {} gaps\n", farm, g.size());
    for (const auto& p : summary.problems) std::cout << "problem: " << p << '\n';
    if (!summary.ok()) rc = 1;
  });

  // bookkeeping
  auto* bk = app.add_subcommand("bookkeeping", "query the processing attempt log");
  ConfigArgs bk_cfg;
  bk_cfg.attach(bk);
  std::string bk_log;
  std::uint32_t bk_run = 0;
  bk->add_option("--log", bk_log, "bookkeeping log")->required()->check(CLI::ExistingFile);
  auto* hist = bk->add_subcommand("history", "every attempt for a run");
  hist->add_option("--run", bk_run, "run")->required();
  hist->callback([&] {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& a : Bookkeeping::replay(bk_log))
      if (a.run == RunId(bk_run)) out.push_back(to_json(a));
    write_json(out, "-");
  });
  auto* csv = bk->add_subcommand("csv", "export every attempt as CSV");
  csv->callback([&] {
    Bookkeeping b(bk_log);
    b.export_csv(std::cout);
  });
  bk->require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return rc;
}
