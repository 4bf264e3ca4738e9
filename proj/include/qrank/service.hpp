#pragma once

// HTTP backend for the CLI and the web workbench. State lives under a data
// directory as append-only JSONL logs (datasets, models, sessions) plus one
// directory per dataset and one bundle file per trained model; the in-memory
// index is rebuilt from those files at startup.
//
// Routes (JSON bodies, errors as {code, message}):
//   GET   /health
//   POST  /datasets                     generation config -> {id, ...}
//   GET   /datasets, /datasets/{id}
//   GET   /datasets/{id}/scenarios?split=
//   GET   /datasets/{id}/scenarios/{sid}
//   POST  /models                       {dataset, hyper?, ablation?} -> job
//   GET   /models, /models/{id}
//   POST  /predict                      {model, scenario | logs, report?, k?}
//   POST  /execute                      {scenario, query, session?}
//   POST  /sessions                     {scenario, model?, report?, k?}
//   GET   /sessions/{id}
//   PATCH /sessions/{id}                {executed?: [query], verdict?: index | null}

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

// Eigen must precede httplib: <resolv.h> defines a `_res` macro.
#include "json.hpp"
#include "qrank/common.hpp"
#include "qrank/faultlab.hpp"
#include "qrank/queryexec.hpp"
#include "qrank/ranker.hpp"
#include "httplib.h"

namespace qrank::service {

using nlohmann::json;
namespace fs = std::filesystem;

// 409: the model exists but cannot serve predictions yet.
class NotReady : public Error {
 public:
  explicit NotReady(const std::string& message) : Error("model_not_ready", message) {}
};

struct Reply {
  int status = 200;
  json body;
};

inline json error_body(const Error& e) { return json{{"code", e.code()}, {"message", e.what()}}; }

inline int status_for(const Error& e) {
  if (dynamic_cast<const NotFound*>(&e)) return 404;
  if (dynamic_cast<const NotReady*>(&e)) return 409;
  if (dynamic_cast<const ModelError*>(&e)) return 500;
  return 400;
}

struct ModelRecord {
  std::string id;
  std::string dataset;
  json hyper = json::object();
  std::string ablation = "none";
  std::string status = "queued";  // queued | training | trained | failed
  json metrics = nullptr;
  std::string error;
  json history = nullptr;
};

inline json to_json(const ModelRecord& m) {
  return json{{"id", m.id},         {"dataset", m.dataset}, {"hyper", m.hyper},
              {"ablation", m.ablation}, {"status", m.status}, {"metrics", m.metrics},
              {"error", m.error},   {"history", m.history}};
}

inline ModelRecord model_record_from_json(const json& j) {
  ModelRecord m;
  m.id = j.at("id").get<std::string>();
  m.dataset = j.at("dataset").get<std::string>();
  m.hyper = j.value("hyper", json::object());
  m.ablation = j.value("ablation", "none");
  m.status = j.value("status", "queued");
  m.metrics = j.value("metrics", json(nullptr));
  m.error = j.value("error", "");
  m.history = j.value("history", json(nullptr));
  return m;
}

struct ExecutedQuery {
  std::string query;
  std::uint64_t time = 0;  // service logical clock
  bool predicted = false;  // one of the session's returned predictions
};

struct SessionRecord {
  std::string id;
  std::string scenario;  // "dataset/scenario"
  std::string report;
  std::string model;
  json prediction = nullptr;
  std::vector<ExecutedQuery> executed;
  std::optional<std::size_t> verdict;  // index into prediction queries
};

inline json to_json(const SessionRecord& s) {
  json ex = json::array();
  for (const auto& e : s.executed)
    ex.push_back({{"query", e.query}, {"time", e.time}, {"predicted", e.predicted}});
  return json{{"id", s.id},
              {"scenario", s.scenario},
              {"report", s.report},
              {"model", s.model},
              {"prediction", s.prediction},
              {"executed", ex},
              {"verdict", s.verdict ? json(*s.verdict) : json(nullptr)}};
}

inline SessionRecord session_from_json(const json& j) {
  SessionRecord s;
  s.id = j.at("id").get<std::string>();
  s.scenario = j.at("scenario").get<std::string>();
  s.report = j.value("report", "");
  s.model = j.value("model", "");
  s.prediction = j.value("prediction", json(nullptr));
  for (const auto& e : j.value("executed", json::array()))
    s.executed.push_back({e.at("query").get<std::string>(), e.at("time").get<std::uint64_t>(),
                          e.value("predicted", false)});
  if (j.contains("verdict") && !j["verdict"].is_null()) s.verdict = j["verdict"].get<std::size_t>();
  return s;
}

// A scenario located through the service; `data` keeps the dataset alive.
struct Resolved {
  std::string dataset;
  std::shared_ptr<const faultlab::Dataset> data;
  const faultlab::Scenario* scenario = nullptr;
  std::string ref() const { return dataset + "/" + scenario->id; }
};

class Service {
 public:
  explicit Service(std::string data_dir, bool start_worker = true) : dir_(std::move(data_dir)) {
    fs::create_directories(fs::path(dir_) / "datasets");
    fs::create_directories(fs::path(dir_) / "models");
    load();
    if (start_worker) worker_ = std::thread([this] { work(); });
  }

  ~Service() { stop(); }
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Stops the training worker. A job cut short stays "training" on disk and
  // is queued again by the next start.
  void stop() {
    {
      std::lock_guard lk(queue_mu_);
      stopping_ = true;
    }
    queue_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  // Blocks until no training job is queued or running.
  void wait_idle() {
    std::unique_lock lk(queue_mu_);
    idle_cv_.wait(lk, [&] { return queue_.empty() && !busy_; });
  }

  const std::string& data_dir() const { return dir_; }

  // -------------------------------------------------------------------------
  // Datasets

  json create_dataset(const json& body) {
    const auto cfg = faultlab::dataset_config_from_json(body.is_null() ? json::object() : body);
    auto ds = std::make_shared<faultlab::Dataset>(faultlab::generate_dataset(cfg));
    std::unique_lock lk(mu_);
    const std::string id = "ds-" + std::to_string(datasets_.size() + 1);
    const fs::path path = fs::path(dir_) / "datasets" / id;
    fs::create_directories(path);
    faultlab::write_dataset(*ds, path.string());
    append("datasets.jsonl", json{{"id", id}, {"config", faultlab::to_json(cfg)}});
    datasets_[id] = ds;
    dataset_order_.push_back(id);
    return dataset_summary(id, *ds);
  }

  json list_datasets() const {
    std::shared_lock lk(mu_);
    json out = json::array();
    for (const auto& id : dataset_order_) out.push_back(dataset_summary(id, *datasets_.at(id)));
    return out;
  }

  json get_dataset(const std::string& id) const {
    std::shared_lock lk(mu_);
    return dataset_summary(id, *dataset(id));
  }

  json list_scenarios(const std::string& id, const std::string& split) const {
    std::shared_lock lk(mu_);
    const auto ds = dataset(id);
    std::optional<faultlab::Split> only;
    if (!split.empty()) only = faultlab::split_from_string(split);
    json out = json::array();
    for (const auto& s : ds->scenarios)
      if (!only || s.split == *only) out.push_back(scenario_summary(id, s));
    return out;
  }

  json get_scenario(const std::string& ds_id, const std::string& sid) const {
    std::shared_lock lk(mu_);
    const auto& s = scenario(ds_id, sid);
    json j = faultlab::to_json(s);
    j["ref"] = ds_id + "/" + s.id;
    j["dataset"] = ds_id;
    return j;
  }

  // Resolves "dataset/scenario", or a bare scenario id within `dataset_hint`.
  Resolved resolve(const std::string& ref, const std::string& dataset_hint = "") const {
    std::shared_lock lk(mu_);
    return resolve_locked(ref, dataset_hint);
  }

  // -------------------------------------------------------------------------
  // Models

  json create_model(const json& body) {
    if (!body.is_object()) throw InvalidArgument("bad_request", "body must be a JSON object");
    ModelRecord rec;
    try {
      rec.dataset = body.at("dataset").get<std::string>();
      rec.hyper = body.value("hyper", json::object());
      rec.ablation = body.value("ablation", "none");
    } catch (const json::exception& e) {
      throw InvalidArgument("bad_request", std::string("malformed model request: ") + e.what());
    }
    ranker::hyper_from_json(rec.hyper);
    rec.ablation = ranker::Ablation::parse(rec.ablation).str();
    {
      std::unique_lock lk(mu_);
      dataset(rec.dataset);
      rec.id = "m-" + std::to_string(models_.size() + 1);
      models_[rec.id] = rec;
      model_order_.push_back(rec.id);
      append("models.jsonl", to_json(rec));
    }
    enqueue(rec.id);
    return to_json(rec);
  }

  json list_models() const {
    std::shared_lock lk(mu_);
    json out = json::array();
    for (const auto& id : model_order_) out.push_back(model_summary(models_.at(id)));
    return out;
  }

  json get_model(const std::string& id) const {
    std::shared_lock lk(mu_);
    return to_json(model_record(id));
  }

  // -------------------------------------------------------------------------
  // Prediction and execution

  json predict(const json& body) const {
    if (!body.is_object()) throw InvalidArgument("bad_request", "body must be a JSON object");
    const std::string model_id = field<std::string>(body, "model");
    const std::size_t k = body.contains("k") ? field<std::size_t>(body, "k") : 5;
    std::string ds_id;
    {
      std::shared_lock lk(mu_);
      const auto& rec = model_record(model_id);
      if (rec.status != "trained")
        throw NotReady("model " + model_id + " is " + rec.status);
      ds_id = rec.dataset;
    }
    const auto model = load_model(model_id);

    faultlab::UserReport report;
    telemetry::TelemetryStore inline_logs;
    const telemetry::TelemetryStore* logs = nullptr;
    std::string scenario_ref;
    std::shared_ptr<const faultlab::Dataset> keep;
    if (body.contains("scenario")) {
      const auto r = resolve(field<std::string>(body, "scenario"), ds_id);
      keep = r.data;
      report = r.scenario->report;
      logs = &r.scenario->logs;
      scenario_ref = r.ref();
    } else if (body.contains("logs")) {
      try {
        inline_logs = telemetry::store_from_json(body.at("logs"));
      } catch (const json::exception& e) {
        throw InvalidArgument("bad_request", std::string("malformed logs: ") + e.what());
      }
      logs = &inline_logs;
    } else {
      throw InvalidArgument("bad_request", "predict needs a scenario or inline logs");
    }
    if (body.contains("report")) {
      report.text = field<std::string>(body, "report");
      if (body.contains("choices")) {
        report.choices.clear();
        for (const auto& [c, on] : body.at("choices").items()) report.choices[c] = on.get<bool>();
      }
    }
    if (logs->empty()) throw InvalidArgument("bad_request", "logs are empty");
    const auto pred = model->predict(model->prepare(report, *logs), k);
    json out = ranker::to_json(pred);
    out["model"] = model_id;
    out["scenario"] = scenario_ref.empty() ? json(nullptr) : json(scenario_ref);
    return out;
  }

  json execute(const json& body) {
    if (!body.is_object()) throw InvalidArgument("bad_request", "body must be a JSON object");
    const std::string query = field<std::string>(body, "query");
    std::string ref = body.contains("scenario") ? field<std::string>(body, "scenario") : "";
    std::optional<std::string> session_id;
    if (body.contains("session")) {
      session_id = field<std::string>(body, "session");
      std::shared_lock lk(mu_);
      const auto& s = session(*session_id);
      if (ref.empty()) ref = s.scenario;
    }
    if (ref.empty()) throw InvalidArgument("bad_request", "execute needs a scenario");
    const auto r = resolve(ref, body.value("dataset", ""));
    const auto table = queryexec::execute(query, r.scenario->logs, r.ref());
    if (session_id) record_execution(*session_id, table.query);
    return queryexec::to_json(table);
  }

  // -------------------------------------------------------------------------
  // Sessions

  json create_session(const json& body) {
    if (!body.is_object()) throw InvalidArgument("bad_request", "body must be a JSON object");
    SessionRecord rec;
    const std::string model_id = body.value("model", "");
    std::string hint;
    if (!model_id.empty()) {
      std::shared_lock lk(mu_);
      hint = model_record(model_id).dataset;
    }
    const auto r = resolve(field<std::string>(body, "scenario"), hint);
    rec.scenario = r.ref();
    rec.report = body.contains("report") ? field<std::string>(body, "report") : r.scenario->report.text;
    rec.model = model_id;
    if (!model_id.empty()) {
      json req{{"model", model_id}, {"scenario", rec.scenario}, {"k", body.value("k", 5)}};
      if (body.contains("report")) req["report"] = rec.report;
      rec.prediction = predict(req);
    }
    std::unique_lock lk(mu_);
    rec.id = "s-" + std::to_string(sessions_.size() + 1);
    sessions_[rec.id] = rec;
    append("sessions.jsonl", to_json(rec));
    return to_json(rec);
  }

  json get_session(const std::string& id) const {
    std::shared_lock lk(mu_);
    return to_json(session(id));
  }

  json update_session(const std::string& id, const json& body) {
    if (!body.is_object()) throw InvalidArgument("bad_request", "body must be a JSON object");
    std::vector<std::string> queries;
    if (body.contains("executed")) {
      if (!body["executed"].is_array()) throw InvalidArgument("bad_request", "executed must be a list");
      for (const auto& q : body["executed"]) {
        if (!q.is_string()) throw InvalidArgument("bad_request", "executed entries must be strings");
        queries.push_back(dsl::render_query(dsl::parse_query(q.get<std::string>())));
      }
    }
    std::unique_lock lk(mu_);
    SessionRecord rec = session(id);
    for (const auto& q : queries) add_execution(rec, q);
    if (body.contains("verdict")) {
      const auto& v = body["verdict"];
      if (v.is_null()) {
        rec.verdict.reset();
      } else {
        if (!v.is_number_unsigned()) throw InvalidArgument("bad_request", "verdict must be an index or null");
        const auto idx = v.get<std::size_t>();
        const std::size_t n = rec.prediction.is_null() ? 0 : rec.prediction["queries"].size();
        if (idx >= n) throw InvalidArgument("bad_request", "verdict index out of range");
        rec.verdict = idx;
      }
    }
    sessions_[id] = rec;
    append("sessions.jsonl", to_json(rec));
    return to_json(rec);
  }

  // Content digest of all persisted state, for restart round-trip checks.
  json digest() const {
    std::shared_lock lk(mu_);
    json out = json::object();
    for (const auto& id : dataset_order_) {
      std::string all;
      for (const auto& s : datasets_.at(id)->scenarios) all += faultlab::to_json(s).dump();
      out["datasets"][id] = hash_string(all);
    }
    for (const auto& id : model_order_) out["models"][id] = hash_string(to_json(models_.at(id)).dump());
    for (const auto& [id, s] : sessions_) out["sessions"][id] = hash_string(to_json(s).dump());
    return out;
  }

 private:
  template <typename T>
  static T field(const json& body, const char* name) {
    try {
      return body.at(name).get<T>();
    } catch (const json::exception&) {
      throw InvalidArgument("bad_request", std::string("missing or malformed field '") + name + "'");
    }
  }

  static json scenario_summary(const std::string& ds_id, const faultlab::Scenario& s) {
    return json{{"id", s.id},
                {"ref", ds_id + "/" + s.id},
                {"split", faultlab::to_string(s.split)},
                {"category", faultlab::to_string(s.fault.category)},
                {"report", s.report.text}};
  }

  static json dataset_summary(const std::string& id, const faultlab::Dataset& ds) {
    json j = faultlab::manifest(ds);
    j["id"] = id;
    return j;
  }

  static json model_summary(const ModelRecord& m) {
    json j = to_json(m);
    j.erase("history");
    return j;
  }

  std::shared_ptr<const faultlab::Dataset> dataset(const std::string& id) const {
    auto it = datasets_.find(id);
    if (it == datasets_.end()) throw NotFound("unknown dataset '" + id + "'");
    return it->second;
  }

  const faultlab::Scenario& scenario(const std::string& ds_id, const std::string& sid) const {
    const auto* s = dataset(ds_id)->find(sid);
    if (!s) throw NotFound("unknown scenario '" + sid + "' in dataset '" + ds_id + "'");
    return *s;
  }

  Resolved resolve_locked(const std::string& ref, const std::string& hint) const {
    const auto slash = ref.find('/');
    if (slash != std::string::npos) {
      const auto id = ref.substr(0, slash);
      return {id, dataset(id), &scenario(id, ref.substr(slash + 1))};
    }
    if (!hint.empty()) return {hint, dataset(hint), &scenario(hint, ref)};
    Resolved found;
    for (const auto& id : dataset_order_) {
      const auto& ds = datasets_.at(id);
      if (const auto* s = ds->find(ref)) {
        if (found.scenario)
          throw InvalidArgument("bad_request", "scenario '" + ref + "' is ambiguous; use dataset/scenario");
        found = {id, ds, s};
      }
    }
    if (!found.scenario) throw NotFound("unknown scenario '" + ref + "'");
    return found;
  }

  const ModelRecord& model_record(const std::string& id) const {
    auto it = models_.find(id);
    if (it == models_.end()) throw NotFound("unknown model '" + id + "'");
    return it->second;
  }

  const SessionRecord& session(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFound("unknown session '" + id + "'");
    return it->second;
  }

  std::string bundle_path(const std::string& model_id) const {
    return (fs::path(dir_) / "models" / (model_id + ".qrkb")).string();
  }

  std::shared_ptr<const ranker::Model> load_model(const std::string& id) const {
    std::lock_guard lk(cache_mu_);
    auto it = model_cache_.find(id);
    if (it != model_cache_.end()) return it->second;
    auto m = std::make_shared<const ranker::Model>(ranker::load_bundle(bundle_path(id)));
    model_cache_[id] = m;
    return m;
  }

  void add_execution(SessionRecord& rec, const std::string& query) {
    bool predicted = false;
    if (!rec.prediction.is_null())
      for (const auto& q : rec.prediction["queries"])
        if (q["query"] == query) predicted = true;
    rec.executed.push_back({query, ++clock_, predicted});
  }

  void record_execution(const std::string& id, const std::string& query) {
    std::unique_lock lk(mu_);
    SessionRecord rec = session(id);
    add_execution(rec, query);
    sessions_[id] = rec;
    append("sessions.jsonl", to_json(rec));
  }

  void append(const std::string& file, const json& record) {
    std::ofstream out(fs::path(dir_) / file, std::ios::app | std::ios::binary);
    if (!out) throw InvalidArgument("io_error", "cannot append to " + file);
    out << record.dump() << '\n';
  }

  static std::vector<json> read_log(const fs::path& path) {
    std::vector<json> out;
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        out.push_back(json::parse(line));
      } catch (const json::exception&) {
        // A torn final line from an interrupted write is dropped.
      }
    }
    return out;
  }

  void load() {
    for (const auto& j : read_log(fs::path(dir_) / "datasets.jsonl")) {
      const auto id = j.at("id").get<std::string>();
      if (datasets_.count(id)) continue;
      datasets_[id] = std::make_shared<faultlab::Dataset>(
          faultlab::read_dataset((fs::path(dir_) / "datasets" / id).string()));
      dataset_order_.push_back(id);
    }
    for (const auto& j : read_log(fs::path(dir_) / "models.jsonl")) {
      auto rec = model_record_from_json(j);
      if (!models_.count(rec.id)) model_order_.push_back(rec.id);
      models_[rec.id] = rec;
    }
    for (const auto& j : read_log(fs::path(dir_) / "sessions.jsonl")) {
      auto rec = session_from_json(j);
      for (const auto& e : rec.executed) clock_ = std::max(clock_, e.time);
      sessions_[rec.id] = rec;
    }
    for (const auto& id : model_order_) {
      const auto& st = models_[id].status;
      if (st == "queued" || st == "training") queue_.push_back(id);
    }
  }

  // -------------------------------------------------------------------------
  // Training worker: one job at a time, in submission order.

  struct Cancelled {};

  void enqueue(const std::string& id) {
    {
      std::lock_guard lk(queue_mu_);
      queue_.push_back(id);
    }
    queue_cv_.notify_all();
  }

  void set_model(const ModelRecord& rec) {
    std::unique_lock lk(mu_);
    models_[rec.id] = rec;
    append("models.jsonl", to_json(rec));
  }

  void work() {
    while (true) {
      std::string id;
      {
        std::unique_lock lk(queue_mu_);
        queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_) return;
        id = queue_.front();
        queue_.pop_front();
        busy_ = true;
      }
      train_job(id);
      {
        std::lock_guard lk(queue_mu_);
        busy_ = false;
      }
      idle_cv_.notify_all();
    }
  }

  void train_job(const std::string& id) {
    ModelRecord rec;
    std::shared_ptr<const faultlab::Dataset> ds;
    {
      std::shared_lock lk(mu_);
      rec = models_.at(id);
      ds = datasets_.at(rec.dataset);
    }
    rec.status = "training";
    set_model(rec);
    try {
      ranker::TrainOptions opt;
      opt.hyper = ranker::hyper_from_json(rec.hyper);
      opt.ablation = ranker::Ablation::parse(rec.ablation);
      opt.progress = [this](const std::string&) {
        std::lock_guard lk(queue_mu_);
        if (stopping_) throw Cancelled{};
      };
      ranker::Model m = ranker::train_model(*ds, opt);
      ranker::save_bundle(m, bundle_path(id));
      rec.metrics = ranker::evaluate_splits(
          m, *ds, {faultlab::Split::Val, faultlab::Split::TestRepeat, faultlab::Split::TestGeneralize});
      rec.history = m.history;
      rec.status = "trained";
      {
        std::lock_guard lk(cache_mu_);
        model_cache_[id] = std::make_shared<const ranker::Model>(std::move(m));
      }
    } catch (const Cancelled&) {
      return;
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
    }
    set_model(rec);
  }

  std::string dir_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<const faultlab::Dataset>> datasets_;
  std::vector<std::string> dataset_order_;
  std::map<std::string, ModelRecord> models_;
  std::vector<std::string> model_order_;
  std::map<std::string, SessionRecord> sessions_;
  std::uint64_t clock_ = 0;

  mutable std::mutex cache_mu_;
  mutable std::map<std::string, std::shared_ptr<const ranker::Model>> model_cache_;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<std::string> queue_;
  bool busy_ = false;
  bool stopping_ = false;
  std::thread worker_;
};

// ---------------------------------------------------------------------------
// HTTP binding

namespace detail {

inline json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed_json", std::string("request body is not JSON: ") + e.what());
  }
}

inline void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler handler(F&& f, int ok_status = 200) {
  return [f = std::forward<F>(f), ok_status](const httplib::Request& req, httplib::Response& res) {
    try {
      send(res, ok_status, f(req));
    } catch (const Error& e) {
      send(res, status_for(e), error_body(e));
    } catch (const std::exception& e) {
      send(res, 500, json{{"code", "internal"}, {"message", e.what()}});
    }
  };
}

}  // namespace detail

inline void install_routes(httplib::Server& srv, Service& svc) {
  using detail::handler;
  using R = const httplib::Request&;
  srv.Get("/health", handler([](R) { return json{{"status", "ok"}}; }));
  srv.Post("/datasets", handler([&](R r) { return svc.create_dataset(detail::parse_body(r)); }, 201));
  srv.Get("/datasets", handler([&](R) { return svc.list_datasets(); }));
  srv.Get(R"(/datasets/([^/]+))", handler([&](R r) { return svc.get_dataset(r.matches[1]); }));
  srv.Get(R"(/datasets/([^/]+)/scenarios)", handler([&](R r) {
            return svc.list_scenarios(r.matches[1], r.get_param_value("split"));
          }));
  srv.Get(R"(/datasets/([^/]+)/scenarios/([^/]+))",
          handler([&](R r) { return svc.get_scenario(r.matches[1], r.matches[2]); }));
  srv.Post("/models", handler([&](R r) { return svc.create_model(detail::parse_body(r)); }, 202));
  srv.Get("/models", handler([&](R) { return svc.list_models(); }));
  srv.Get(R"(/models/([^/]+))", handler([&](R r) { return svc.get_model(r.matches[1]); }));
  srv.Post("/predict", handler([&](R r) { return svc.predict(detail::parse_body(r)); }));
  srv.Post("/execute", handler([&](R r) { return svc.execute(detail::parse_body(r)); }));
  srv.Post("/sessions", handler([&](R r) { return svc.create_session(detail::parse_body(r)); }, 201));
  srv.Get(R"(/sessions/([^/]+))", handler([&](R r) { return svc.get_session(r.matches[1]); }));
  srv.Patch(R"(/sessions/([^/]+))", handler([&](R r) {
              return svc.update_session(r.matches[1], detail::parse_body(r));
            }));
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty())
      detail::send(res, res.status,
                   json{{"code", res.status == 404 ? "not_found" : "http_error"},
                        {"message", "no route for this request"}});
  });
}

// Splits "host:port"; a bare port binds all interfaces.
inline std::pair<std::string, int> parse_address(const std::string& addr) {
  const auto colon = addr.rfind(':');
  const std::string host = colon == std::string::npos ? "0.0.0.0" : addr.substr(0, colon);
  const std::string port = colon == std::string::npos ? addr : addr.substr(colon + 1);
  std::int64_t p = 0;
  if (!parse_int(port, p) || p < 0 || p > 65535)
    throw InvalidArgument("bad_address", "invalid listen address '" + addr + "'");
  return {host.empty() ? "0.0.0.0" : host, static_cast<int>(p)};
}

}  // namespace qrank::service
