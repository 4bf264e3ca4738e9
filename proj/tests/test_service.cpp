#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <thread>

#include "qrank/service.hpp"

using namespace qrank;
using namespace qrank::service;
namespace fs = std::filesystem;

namespace {

json mini_dataset_request() {
  return json{{"app", "mini"}, {"num_faults", 24}, {"reports_per_fault", 3},
              {"duration_s", 5}, {"generalize_fraction", 0.3}, {"seed", 3}};
}

json small_model_request(const std::string& ds) {
  return json{{"dataset", ds}, {"hyper", {{"hidden", 12}, {"epochs", 8}, {"lr", 1e-3}}}};
}

std::string fresh_dir() {
  std::random_device rd;
  const auto p = fs::temp_directory_path() / ("qrank-svc-" + std::to_string(rd()) + std::to_string(rd()));
  fs::create_directories(p);
  return p.string();
}

// A live server on an ephemeral port with one trained model.
class Http : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new std::string(fresh_dir());
    svc_ = new Service(*dir_);
    srv_ = new httplib::Server;
    install_routes(*srv_, *svc_);
    port_ = srv_->bind_to_any_port("127.0.0.1");
    thread_ = new std::thread([] { srv_->listen_after_bind(); });
    srv_->wait_until_ready();
  }
  static void TearDownTestSuite() {
    srv_->stop();
    thread_->join();
    delete thread_;
    delete srv_;
    delete svc_;
    fs::remove_all(*dir_);
    delete dir_;
  }

  static httplib::Client client() {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(120);
    return c;
  }

  static std::pair<int, json> post(const std::string& path, const json& body) {
    auto r = client().Post(path, body.dump(), "application/json");
    EXPECT_TRUE(r);
    return {r->status, json::parse(r->body)};
  }
  static std::pair<int, json> patch(const std::string& path, const json& body) {
    auto r = client().Patch(path, body.dump(), "application/json");
    EXPECT_TRUE(r);
    return {r->status, json::parse(r->body)};
  }
  static std::pair<int, json> get(const std::string& path) {
    auto r = client().Get(path);
    EXPECT_TRUE(r);
    return {r->status, json::parse(r->body)};
  }

  // Dataset ds-1 and trained model m-1, created once.
  static void ensure_model() {
    static bool done = false;
    if (done) return;
    auto [s1, ds] = post("/datasets", mini_dataset_request());
    ASSERT_EQ(s1, 201) << ds;
    auto [s2, m] = post("/models", small_model_request(ds["id"]));
    ASSERT_EQ(s2, 202) << m;
    svc_->wait_idle();
    done = true;
  }

  static std::string* dir_;
  static Service* svc_;
  static httplib::Server* srv_;
  static std::thread* thread_;
  static int port_;
};
std::string* Http::dir_ = nullptr;
Service* Http::svc_ = nullptr;
httplib::Server* Http::srv_ = nullptr;
std::thread* Http::thread_ = nullptr;
int Http::port_ = 0;

}  // namespace

TEST_F(Http, Health) {
  auto [st, body] = get("/health");
  EXPECT_EQ(st, 200);
  EXPECT_EQ(body["status"], "ok");
}

TEST_F(Http, DatasetsAndScenarios) {
  ensure_model();
  auto [st, list] = get("/datasets");
  ASSERT_EQ(st, 200);
  ASSERT_GE(list.size(), 1u);
  EXPECT_EQ(list[0]["id"], "ds-1");

  auto [st2, all] = get("/datasets/ds-1/scenarios");
  ASSERT_EQ(st2, 200);
  EXPECT_EQ(all.size(), 72u);
  auto [st3, gen] = get("/datasets/ds-1/scenarios?split=test_generalize");
  ASSERT_EQ(st3, 200);
  ASSERT_FALSE(gen.empty());
  for (const auto& s : gen) EXPECT_EQ(s["split"], "test_generalize");

  const std::string sid = gen[0]["id"];
  auto [st4, one] = get("/datasets/ds-1/scenarios/" + sid);
  ASSERT_EQ(st4, 200);
  EXPECT_EQ(one["ref"], "ds-1/" + sid);
  EXPECT_TRUE(one.contains("logs"));

  auto [st5, err] = get("/datasets/ds-1/scenarios?split=bogus");
  EXPECT_EQ(st5, 400);
  EXPECT_TRUE(err.contains("code"));
}

TEST_F(Http, TrainedModelReportsMetrics) {
  ensure_model();
  auto [st, m] = get("/models/m-1");
  ASSERT_EQ(st, 200);
  ASSERT_EQ(m["status"], "trained") << m;
  for (const char* split : {"test_repeat", "test_generalize"}) {
    ASSERT_TRUE(m["metrics"].contains(split)) << m["metrics"];
    EXPECT_TRUE(m["metrics"][split].contains("top5"));
  }
}

TEST_F(Http, PredictReturnsRankedQueries) {
  ensure_model();
  auto [_, scen] = get("/datasets/ds-1/scenarios?split=test_repeat");
  ASSERT_FALSE(scen.empty());
  for (std::size_t k : {1, 3, 5}) {
    auto [st, p] = post("/predict", json{{"model", "m-1"}, {"scenario", scen[0]["id"]}, {"k", k}});
    ASSERT_EQ(st, 200) << p;
    EXPECT_EQ(p["scenario"], scen[0]["ref"]);
    const auto& qs = p["queries"];
    ASSERT_GE(qs.size(), 1u);
    EXPECT_LE(qs.size(), k);
    for (std::size_t i = 1; i < qs.size(); ++i)
      EXPECT_GE(qs[i - 1]["probability"].get<double>(), qs[i]["probability"].get<double>());
    for (const auto& q : qs) EXPECT_NO_THROW(dsl::parse_query(q["query"].get<std::string>()));
  }
}

TEST_F(Http, PredictWithInlineLogsAndReportOverride) {
  ensure_model();
  const auto r = svc_->resolve("ds-1/" + svc_->list_scenarios("ds-1", "test_repeat")[0]["id"].get<std::string>());
  const auto body = json{{"model", "m-1"},
                         {"logs", telemetry::to_json(r.scenario->logs)},
                         {"report", r.scenario->report.text},
                         {"k", 5}};
  auto [st, inline_pred] = post("/predict", body);
  ASSERT_EQ(st, 200) << inline_pred;
  auto [st2, by_ref] = post("/predict", json{{"model", "m-1"}, {"scenario", r.ref()}, {"k", 5}});
  ASSERT_EQ(st2, 200);
  // Without an explicit choice map the override drops nothing the report had.
  EXPECT_EQ(inline_pred["queries"].size(), by_ref["queries"].size());
  EXPECT_TRUE(inline_pred["scenario"].is_null());

  auto [st3, err] = post("/predict", json{{"model", "m-1"}, {"k", 5}});
  EXPECT_EQ(st3, 400);
  EXPECT_EQ(err["code"], "bad_request");
}

TEST_F(Http, ExecuteMatchesLibrary) {
  ensure_model();
  const std::string ref = "ds-1/" + svc_->list_scenarios("ds-1", "test_repeat")[0]["id"].get<std::string>();
  auto [_, p] = post("/predict", json{{"model", "m-1"}, {"scenario", ref}, {"k", 3}});
  const auto r = svc_->resolve(ref);
  for (const auto& q : p["queries"]) {
    auto [st, table] = post("/execute", json{{"scenario", ref}, {"query", q["query"]}});
    ASSERT_EQ(st, 200) << table;
    const auto direct = queryexec::execute(q["query"].get<std::string>(), r.scenario->logs, ref);
    EXPECT_EQ(table, queryexec::to_json(direct));
  }
  auto [st, err] = post("/execute", json{{"scenario", ref}, {"query", "filter(T,"}});
  EXPECT_EQ(st, 400);
  EXPECT_EQ(err["code"], "parse_error");
}

TEST_F(Http, UnknownIdsAre404WithCode) {
  for (const char* path : {"/datasets/ds-99", "/models/m-99", "/sessions/s-99",
                           "/datasets/ds-99/scenarios", "/no/such/route"}) {
    auto [st, body] = get(path);
    EXPECT_EQ(st, 404) << path;
    EXPECT_EQ(body["code"], "not_found") << path;
  }
  ensure_model();
  auto [st, body] = post("/predict", json{{"model", "m-1"}, {"scenario", "nope"}});
  EXPECT_EQ(st, 404);
  EXPECT_EQ(body["code"], "not_found");
  auto [st2, body2] = post("/predict", json{{"model", "m-42"}, {"scenario", "nope"}});
  EXPECT_EQ(st2, 404);
}

TEST_F(Http, BadRequests) {
  auto r = client().Post("/datasets", "{not json", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(json::parse(r->body)["code"], "malformed_json");

  auto [st, e] = post("/models", json{{"dataset", "ds-1"}, {"hyper", {{"hiden", 3}}}});
  EXPECT_EQ(st, 400);
  auto [st2, e2] = post("/models", json{{"dataset", "ds-1"}, {"ablation", "sideways"}});
  EXPECT_EQ(st2, 400);
  auto [st3, e3] = post("/datasets", json{{"category_weights", {1, 2}}});
  EXPECT_EQ(st3, 400);
  for (const auto& body : {e, e2, e3}) {
    EXPECT_TRUE(body["code"].is_string());
    EXPECT_TRUE(body["message"].is_string());
  }
}

TEST_F(Http, SessionLifecycle) {
  ensure_model();
  const std::string sid = svc_->list_scenarios("ds-1", "test_repeat")[0]["id"];
  auto [st, s] = post("/sessions", json{{"scenario", sid}, {"model", "m-1"}, {"k", 3}});
  ASSERT_EQ(st, 201) << s;
  const std::string id = s["id"];
  EXPECT_EQ(s["scenario"], "ds-1/" + sid);
  ASSERT_FALSE(s["prediction"]["queries"].empty());
  EXPECT_TRUE(s["verdict"].is_null());

  const std::string top = s["prediction"]["queries"][0]["query"];
  auto [st2, table] = post("/execute", json{{"session", id}, {"query", top}});
  ASSERT_EQ(st2, 200) << table;
  auto [st3, s2] = patch("/sessions/" + id,
                         json{{"executed", {"a = filter(T, switch==1); b = groupby(a, [5-tuple], count);"}},
                              {"verdict", 0}});
  ASSERT_EQ(st3, 200) << s2;
  ASSERT_EQ(s2["executed"].size(), 2u);
  EXPECT_EQ(s2["executed"][0]["query"], top);
  EXPECT_TRUE(s2["executed"][0]["predicted"].get<bool>());
  EXPECT_LT(s2["executed"][0]["time"].get<int>(), s2["executed"][1]["time"].get<int>());
  EXPECT_EQ(s2["verdict"], 0);

  auto [st4, e] = patch("/sessions/" + id, json{{"verdict", 99}});
  EXPECT_EQ(st4, 400);
  auto [st5, s3] = patch("/sessions/" + id, json{{"verdict", nullptr}});
  ASSERT_EQ(st5, 200);
  EXPECT_TRUE(s3["verdict"].is_null());
  auto [st6, s4] = get("/sessions/" + id);
  EXPECT_EQ(st6, 200);
  EXPECT_EQ(s4, s3);
}

TEST(ServiceState, UntrainedModelIs409AndResumesAfterRestart) {
  const auto dir = fresh_dir();
  std::string sid;
  {
    Service svc(dir, /*start_worker=*/false);
    svc.create_dataset(mini_dataset_request());
    const auto m = svc.create_model(small_model_request("ds-1"));
    EXPECT_EQ(m["status"], "queued");
    sid = svc.list_scenarios("ds-1", "test_repeat")[0]["id"];
    try {
      svc.predict(json{{"model", "m-1"}, {"scenario", sid}});
      FAIL() << "expected NotReady";
    } catch (const Error& e) {
      EXPECT_EQ(status_for(e), 409);
    }
  }
  Service svc(dir);
  svc.wait_idle();
  EXPECT_EQ(svc.get_model("m-1")["status"], "trained");
  EXPECT_NO_THROW(svc.predict(json{{"model", "m-1"}, {"scenario", sid}}));
  svc.stop();
  fs::remove_all(dir);
}

TEST(ServiceState, RestartReloadsIdenticalState) {
  const auto dir = fresh_dir();
  json before, prediction;
  {
    Service svc(dir);
    svc.create_dataset(mini_dataset_request());
    svc.create_dataset(json{{"app", "mini"}, {"num_faults", 10}, {"reports_per_fault", 2},
                            {"duration_s", 3}, {"seed", 9}});
    svc.create_model(small_model_request("ds-1"));
    svc.wait_idle();
    const std::string sid = svc.list_scenarios("ds-1", "test_generalize")[0]["id"];
    const auto s = svc.create_session(json{{"scenario", "ds-1/" + sid}, {"model", "m-1"}});
    svc.update_session(s["id"], json{{"executed", {s["prediction"]["queries"][0]["query"]}}});
    prediction = svc.predict(json{{"model", "m-1"}, {"scenario", "ds-1/" + sid}, {"k", 5}});
    before = svc.digest();
  }
  Service svc(dir);
  EXPECT_EQ(svc.digest(), before);
  EXPECT_EQ(before["datasets"].size(), 2u);
  EXPECT_EQ(before["sessions"].size(), 1u);
  EXPECT_EQ(svc.predict(json{{"model", "m-1"}, {"scenario", prediction["scenario"]}, {"k", 5}}),
            prediction);
  // New ids continue after the reloaded ones.
  EXPECT_EQ(svc.create_session(json{{"scenario", prediction["scenario"]}})["id"], "s-2");
  svc.stop();
  fs::remove_all(dir);
}

TEST(ServiceState, AmbiguousBareScenarioIsRejected) {
  const auto dir = fresh_dir();
  Service svc(dir, false);
  svc.create_dataset(mini_dataset_request());
  svc.create_dataset(mini_dataset_request());
  const std::string sid = svc.list_scenarios("ds-1", "")[0]["id"];
  EXPECT_THROW(svc.resolve(sid), InvalidArgument);
  EXPECT_EQ(svc.resolve("ds-2/" + sid).dataset, "ds-2");
  EXPECT_EQ(svc.resolve(sid, "ds-1").ref(), "ds-1/" + sid);
  fs::remove_all(dir);
}

TEST(ServiceAddress, Parse) {
  EXPECT_EQ(parse_address("127.0.0.1:8080"), (std::pair<std::string, int>{"127.0.0.1", 8080}));
  EXPECT_EQ(parse_address("9000"), (std::pair<std::string, int>{"0.0.0.0", 9000}));
  EXPECT_THROW(parse_address("host:port"), InvalidArgument);
}
