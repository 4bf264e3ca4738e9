#pragma once

// Command-line front end. `run` is the whole program; tools/qrank.cpp only
// forwards argv. Exit codes: 0 success, 1 usage error, 2 data or model error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qrank/common.hpp"
#include "qrank/faultlab.hpp"
#include "qrank/queryexec.hpp"
#include "qrank/ranker.hpp"
#include "qrank/service.hpp"
#include "CLI11.hpp"

namespace qrank::cli {

using nlohmann::json;

inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kDataError = 2;

inline constexpr const char* kAddrEnv = "QRANK_ADDR";
inline constexpr const char* kDefaultAddr = "127.0.0.1:8080";

// Run config: a JSON object with dataset-generation keys at the top level
// and an optional "hyper" object of training hyperparameters.
inline json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("config not found: " + path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed_config", path + ": " + e.what());
  }
}

inline const faultlab::Scenario& find_scenario(const faultlab::Dataset& ds, const std::string& id) {
  const auto* s = ds.find(id);
  if (!s) throw NotFound("unknown scenario '" + id + "'");
  return *s;
}

// Rows in the style of the evaluation tables: one per split.
inline std::string render_metrics(const json& metrics) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %5s %6s %6s %6s %6s %6s %8s\n", "split", "n", "top1",
                "top2", "top3", "top4", "top5", "avg_rank");
  os << line;
  for (const auto& [split, m] : metrics.items()) {
    if (m.value("na", false)) {
      std::snprintf(line, sizeof line, "%-16s %5zu %6s %6s %6s %6s %6s %8s\n", split.c_str(),
                    m["n"].get<std::size_t>(), "N/A", "N/A", "N/A", "N/A", "N/A", "N/A");
    } else {
      char avg[32] = "N/A";
      if (!m["avg_rank"].is_null()) std::snprintf(avg, sizeof avg, "%.3f", m["avg_rank"].get<double>());
      std::snprintf(line, sizeof line, "%-16s %5zu %6.3f %6.3f %6.3f %6.3f %6.3f %8s\n", split.c_str(),
                    m["n"].get<std::size_t>(), m["top1"].get<double>(), m["top2"].get<double>(),
                    m["top3"].get<double>(), m["top4"].get<double>(), m["top5"].get<double>(),
                    avg);
    }
    os << line;
  }
  return os.str();
}

namespace detail {

struct Args {
  std::string config, out, dataset, bundle, scenario, query, ablation = "none";
  std::string data_dir, addr, static_dir;
  std::vector<std::string> splits;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t k = 5;
  bool as_json = false;
  bool table = false;
  bool verbose = false;
};

inline int gen_data(const Args& a, std::ostream& out) {
  json cfg = read_config(a.config);
  if (a.seed_set) cfg["seed"] = a.seed;
  const auto ds = faultlab::generate_dataset(faultlab::dataset_config_from_json(cfg));
  std::filesystem::create_directories(a.out);
  faultlab::write_dataset(ds, a.out);
  out << faultlab::manifest(ds).dump(2) << '\n';
  return kOk;
}

inline int train(const Args& a, std::ostream& out, std::ostream& err) {
  const json cfg = read_config(a.config);
  const auto ds = faultlab::read_dataset(a.dataset);
  ranker::TrainOptions opt;
  opt.hyper = ranker::hyper_from_json(cfg.value("hyper", json::object()));
  if (a.seed_set) opt.hyper.seed = a.seed;
  opt.ablation = ranker::Ablation::parse(a.ablation);
  if (a.verbose) opt.progress = [&err](const std::string& line) { err << line << '\n'; };
  auto model = ranker::train_model(ds, opt);
  ranker::save_bundle(model, a.out);
  out << model.history.dump(2) << '\n';
  return kOk;
}

inline int eval(const Args& a, std::ostream& out) {
  const auto model = ranker::load_bundle(a.bundle);
  const auto ds = faultlab::read_dataset(a.dataset);
  std::vector<faultlab::Split> splits;
  for (const auto& s : a.splits) splits.push_back(faultlab::split_from_string(s));
  if (splits.empty()) splits = {faultlab::Split::TestRepeat, faultlab::Split::TestGeneralize};
  const json metrics = ranker::evaluate_splits(model, ds, splits);
  if (a.table) out << render_metrics(metrics);
  else out << metrics.dump(2) << '\n';
  return kOk;
}

inline int predict(const Args& a, std::ostream& out) {
  const auto model = ranker::load_bundle(a.bundle);
  const auto ds = faultlab::read_dataset(a.dataset);
  const auto& s = find_scenario(ds, a.scenario);
  const auto pred = model.predict(model.prepare(s.report, s.logs), a.k);
  if (a.as_json) out << ranker::to_json(pred).dump(2) << '\n';
  else out << ranker::render_text(pred);
  return kOk;
}

inline int exec(const Args& a, std::ostream& out) {
  const auto ds = faultlab::read_dataset(a.dataset);
  const auto& s = find_scenario(ds, a.scenario);
  const auto table = queryexec::execute(a.query, s.logs, s.id);
  if (a.as_json) out << queryexec::to_json(table).dump(2) << '\n';
  else out << queryexec::render_text(table);
  return kOk;
}

inline int serve(const Args& a, std::ostream& out) {
  std::string addr = a.addr;
  if (addr.empty()) {
    const char* env = std::getenv(kAddrEnv);
    addr = env && *env ? env : kDefaultAddr;
  }
  const auto [host, port] = service::parse_address(addr);
  service::Service svc(a.data_dir);
  httplib::Server srv;
  service::install_routes(srv, svc);
  if (!a.static_dir.empty() && !srv.set_mount_point("/", a.static_dir))
    throw NotFound("static directory not found: " + a.static_dir);
  if (!srv.bind_to_port(host, port)) throw InvalidArgument("bind_failed", "cannot listen on " + addr);
  out << "listening on " << host << ':' << port << std::endl;
  srv.listen_after_bind();
  svc.stop();
  return kOk;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  detail::Args a;
  CLI::App app{"Ranks debugging queries for user-reported faults"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "qrank 1.0");

  auto check_ablation = [](const std::string& s) -> std::string {
    try {
      ranker::Ablation::parse(s);
      return "";
    } catch (const Error& e) {
      return e.what();
    }
  };
  auto check_split = [](const std::string& s) -> std::string {
    try {
      faultlab::split_from_string(s);
      return "";
    } catch (const Error& e) {
      return e.what();
    }
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic fault dataset");
  gen->add_option("--config", a.config, "Run config (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--out", a.out, "Output directory")->required();
  gen->add_option("--seed", a.seed, "Generation seed (overrides the config)")
      ->each([&](const std::string&) { a.seed_set = true; });

  auto* tr = app.add_subcommand("train", "Train a ranking model");
  tr->add_option("--dataset", a.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", a.out, "Bundle path")->required();
  tr->add_option("--ablation", a.ablation,
                 "none|exclude-report|no-rank-order|monolithic|classifier|single-tool=<dialect>|"
                 "drop-feature=<metric>")
      ->check(CLI::Validator(check_ablation, "ABLATION"));
  tr->add_option("--config", a.config, "Run config (JSON); its \"hyper\" object is used")
      ->check(CLI::ExistingFile);
  tr->add_option("--seed", a.seed, "Training seed (overrides the config)")
      ->each([&](const std::string&) { a.seed_set = true; });
  tr->add_flag("-v,--verbose", a.verbose, "Print per-epoch progress to stderr");

  auto* ev = app.add_subcommand("eval", "Evaluate a bundle on dataset splits");
  ev->add_option("--bundle", a.bundle, "Model bundle")->required();
  ev->add_option("--dataset", a.dataset, "Dataset directory")->required();
  ev->add_option("--split", a.splits, "Split(s); default test_repeat and test_generalize")
      ->check(CLI::Validator(check_split, "SPLIT"));
  ev->add_flag("--table", a.table, "Print aligned rows instead of JSON");

  auto* pr = app.add_subcommand("predict", "Rank queries for one scenario");
  pr->add_option("--bundle", a.bundle, "Model bundle")->required();
  pr->add_option("--dataset", a.dataset, "Dataset directory")->required();
  pr->add_option("--scenario", a.scenario, "Scenario id")->required();
  pr->add_option("-k", a.k, "Number of queries")->check(CLI::PositiveNumber);
  pr->add_flag("--json", a.as_json, "Print JSON");

  auto* ex = app.add_subcommand("exec", "Run a query against one scenario's telemetry");
  ex->add_option("--dataset", a.dataset, "Dataset directory")->required();
  ex->add_option("--scenario", a.scenario, "Scenario id")->required();
  ex->add_option("--query", a.query, "Query text")->required();
  ex->add_flag("--json", a.as_json, "Print JSON");

  auto* sv = app.add_subcommand("serve", "Run the HTTP service");
  sv->add_option("--data-dir", a.data_dir, "State directory")->required();
  sv->add_option("--addr", a.addr, std::string("host:port (default $") + kAddrEnv + " or " +
                                       kDefaultAddr + ")");
  sv->add_option("--static", a.static_dir, "Serve files from this directory at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return detail::gen_data(a, out);
    if (*tr) return detail::train(a, out, err);
    if (*ev) return detail::eval(a, out);
    if (*pr) return detail::predict(a, out);
    if (*ex) return detail::exec(a, out);
    if (*sv) return detail::serve(a, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace qrank::cli
