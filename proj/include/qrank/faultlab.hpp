#pragma once

// Synthetic fault scenarios: a star-topology microservice application, fault
// injection for seven recurring fault categories, a telemetry simulator, a
// user-report synthesizer and the dataset/split generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "qrank/common.hpp"
#include "qrank/dsl.hpp"
#include "qrank/telemetry.hpp"

namespace qrank::faultlab {

using nlohmann::json;
using telemetry::TelemetryStore;

// ---------------------------------------------------------------------------
// Application description

struct CallSpec {
  std::string function;
  double probability = 1.0;
};

struct FunctionSpec {
  std::string name;
  double base_ms = 0;  // 0: drawn from the topology seed
  int variables = 0;   // 0: drawn from the topology seed
  std::vector<CallSpec> calls;
};

struct ServiceSpec {
  std::string name;
  std::string role = "app";  // app | db | queue
  std::vector<FunctionSpec> functions;
};

struct EntrySpec {
  std::string function;
  double weight = 1.0;
};

struct AppSpec {
  std::string name;
  std::vector<ServiceSpec> services;
  std::vector<EntrySpec> entries;
};

namespace detail {

inline ServiceSpec service(std::string name, std::string role,
                           std::vector<FunctionSpec> fns) {
  return ServiceSpec{std::move(name), std::move(role), std::move(fns)};
}

inline FunctionSpec fn(std::string name, std::vector<CallSpec> calls = {}) {
  return FunctionSpec{std::move(name), 0, 0, std::move(calls)};
}

}  // namespace detail

// A 14-service online shop with 28 traced functions.
inline AppSpec sockshop_app() {
  using detail::fn;
  using detail::service;
  AppSpec a;
  a.name = "sockshop";
  a.services = {
      service("edge-router", "app",
              {fn("route_page", {{"render_page", 1.0}}),
               fn("route_api", {{"handle_api", 1.0}})}),
      service("front-end", "app",
              {fn("render_page", {{"list_items", 0.8},
                                  {"get_tags", 0.5},
                                  {"get_cart", 0.4},
                                  {"login", 0.3}}),
               fn("handle_api", {{"create_order", 0.35},
                                 {"add_item", 0.5},
                                 {"list_orders", 0.3},
                                 {"track_shipment", 0.25}})}),
      service("catalogue", "app",
              {fn("list_items", {{"query_items", 1.0}}),
               fn("get_tags", {{"query_tags", 1.0}})}),
      service("catalogue-db", "db", {fn("query_items"), fn("query_tags")}),
      service("carts", "app",
              {fn("get_cart", {{"find_cart", 1.0}}),
               fn("add_item", {{"save_cart", 1.0}})}),
      service("carts-db", "db", {fn("find_cart"), fn("save_cart")}),
      service("orders", "app",
              {fn("create_order", {{"get_address", 1.0},
                                   {"get_cart", 1.0},
                                   {"authorise", 1.0},
                                   {"ship", 1.0},
                                   {"insert_order", 1.0}}),
               fn("list_orders", {{"find_orders", 1.0}})}),
      service("orders-db", "db", {fn("insert_order"), fn("find_orders")}),
      service("payment", "app",
              {fn("authorise", {{"check_fraud", 1.0}}), fn("check_fraud")}),
      service("shipping", "app",
              {fn("ship", {{"publish", 1.0}}), fn("track_shipment")}),
      service("queue-master", "app",
              {fn("consume", {{"ack_job", 1.0}}), fn("ack_job")}),
      service("rabbitmq", "queue",
              {fn("publish", {{"persist", 1.0}, {"consume", 1.0}}), fn("persist")}),
      service("user", "app",
              {fn("login", {{"find_user", 1.0}}),
               fn("get_address", {{"find_address", 1.0}})}),
      service("user-db", "db", {fn("find_user"), fn("find_address")}),
  };
  a.entries = {{"route_page", 0.55}, {"route_api", 0.45}};
  return a;
}

// Three services in a chain; small enough for unit tests.
inline AppSpec mini_app() {
  using detail::fn;
  using detail::service;
  AppSpec a;
  a.name = "mini";
  a.services = {
      service("frontend", "app",
              {fn("serve", {{"fetch", 1.0}}), fn("render", {{"lookup", 0.5}})}),
      service("api", "app", {fn("fetch", {{"read", 1.0}}), fn("lookup", {{"read", 1.0}})}),
      service("db", "db", {fn("read")}),
  };
  a.entries = {{"serve", 0.6}, {"render", 0.4}};
  return a;
}

inline json to_json(const AppSpec& a) {
  json services = json::array();
  for (const auto& s : a.services) {
    json fns = json::array();
    for (const auto& f : s.functions) {
      json calls = json::array();
      for (const auto& c : f.calls)
        calls.push_back({{"function", c.function}, {"probability", c.probability}});
      fns.push_back({{"name", f.name}, {"base_ms", f.base_ms},
                     {"variables", f.variables}, {"calls", calls}});
    }
    services.push_back({{"name", s.name}, {"role", s.role}, {"functions", fns}});
  }
  json entries = json::array();
  for (const auto& e : a.entries)
    entries.push_back({{"function", e.function}, {"weight", e.weight}});
  return json{{"name", a.name}, {"services", services}, {"entries", entries}};
}

inline AppSpec app_from_json(const json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "sockshop") return sockshop_app();
    if (name == "mini") return mini_app();
    throw InvalidArgument("unknown built-in app '" + name + "'");
  }
  try {
    AppSpec a;
    a.name = j.value("name", "custom");
    for (const auto& s : j.at("services")) {
      ServiceSpec svc;
      svc.name = s.at("name").get<std::string>();
      svc.role = s.value("role", "app");
      for (const auto& f : s.at("functions")) {
        FunctionSpec fs;
        fs.name = f.at("name").get<std::string>();
        fs.base_ms = f.value("base_ms", 0.0);
        fs.variables = f.value("variables", 0);
        for (const auto& c : f.value("calls", json::array()))
          fs.calls.push_back({c.at("function").get<std::string>(), c.value("probability", 1.0)});
        svc.functions.push_back(std::move(fs));
      }
      a.services.push_back(std::move(svc));
    }
    for (const auto& e : j.at("entries"))
      a.entries.push_back({e.at("function").get<std::string>(), e.value("weight", 1.0)});
    return a;
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed app spec: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------
// Topology

struct ServiceNode {
  std::string name;
  std::string role;
  std::string container_id;  // "mn.h<k>", the resource-query host
  std::string host_id;       // "h<k>"
  std::string ip;
  int edge_switch = 0;
  int agg_switch = 0;
  std::vector<std::string> functions;
  double base_cpu = 0;
  double base_mem = 0;
  double base_disk = 0;  // bytes/s
};

struct FunctionNode {
  std::string name;
  std::size_t service = 0;
  double base_ms = 0;
  int variables = 0;
  std::vector<std::pair<std::size_t, double>> calls;  // (callee, probability)
};

struct SwitchNode {
  int id = 0;
  std::string role;  // edge | agg
  std::size_t service = 0;
};

struct Link {
  std::string a;
  std::string b;
  double latency_ms = 0;
  double capacity_mbps = 0;
};

// Each service hangs off the central router through an aggregation switch and
// an edge switch: router - agg - edge - host.
struct Topology {
  std::string app;
  std::vector<ServiceNode> services;
  std::vector<FunctionNode> functions;
  std::vector<SwitchNode> switches;
  std::vector<Link> links;
  std::vector<std::pair<std::size_t, double>> entries;
  std::string router = "r0";

  std::size_t network_nodes() const { return switches.size() + 1; }

  std::optional<std::size_t> service_by_container(std::string_view id) const {
    for (std::size_t i = 0; i < services.size(); ++i)
      if (services[i].container_id == id) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> function_index(std::string_view name) const {
    for (std::size_t i = 0; i < functions.size(); ++i)
      if (functions[i].name == name) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> switch_index(std::string_view id) const {
    std::int64_t v = 0;
    if (!parse_int(id, v)) return std::nullopt;
    for (std::size_t i = 0; i < switches.size(); ++i)
      if (switches[i].id == v) return i;
    return std::nullopt;
  }
  // Services other than s that call into s.
  bool has_remote_caller(std::size_t fn) const {
    for (const auto& f : functions)
      for (const auto& [c, p] : f.calls)
        if (c == fn && f.service != functions[fn].service) return true;
    return false;
  }
  bool has_remote_callee(std::size_t fn) const {
    for (const auto& [c, p] : functions[fn].calls)
      if (functions[c].service != functions[fn].service) return true;
    return false;
  }
};

inline Topology build_topology(const AppSpec& spec, std::uint64_t seed) {
  if (spec.services.size() < 2)
    throw InvalidArgument("app spec needs at least two services");
  Topology t;
  t.app = spec.name;
  std::set<std::string> names;
  std::map<std::string, std::size_t> fn_index;
  for (std::size_t s = 0; s < spec.services.size(); ++s) {
    const auto& ss = spec.services[s];
    if (!names.insert(ss.name).second)
      throw InvalidArgument("duplicate service '" + ss.name + "'");
    if (ss.functions.empty())
      throw InvalidArgument("service '" + ss.name + "' has no functions");
    for (const auto& f : ss.functions) {
      if (fn_index.count(f.name))
        throw InvalidArgument("duplicate function '" + f.name + "'");
      fn_index[f.name] = t.functions.size();
      FunctionNode node;
      node.name = f.name;
      node.service = s;
      t.functions.push_back(node);
    }
  }
  Rng rng(derive_seed(seed, "topology"));
  std::size_t fi = 0;
  for (std::size_t s = 0; s < spec.services.size(); ++s) {
    const auto& ss = spec.services[s];
    const int k = static_cast<int>(s) + 1;
    ServiceNode node;
    node.name = ss.name;
    node.role = ss.role;
    node.container_id = "mn.h" + std::to_string(k);
    node.host_id = "h" + std::to_string(k);
    node.ip = "10.0.0." + std::to_string(k);
    node.edge_switch = 2 * k - 1;
    node.agg_switch = 2 * k;
    node.base_cpu = uniform(rng, 0.08, 0.3);
    node.base_mem = uniform(rng, 0.25, 0.6);
    const double disk_scale = ss.role == "db" ? 2.0e6 : ss.role == "queue" ? 1.0e6 : 1.0e5;
    node.base_disk = disk_scale * uniform(rng, 0.7, 1.3);
    for (const auto& f : ss.functions) {
      node.functions.push_back(f.name);
      auto& fnode = t.functions[fi++];
      fnode.base_ms = f.base_ms > 0 ? f.base_ms
                                    : (ss.role == "db" ? uniform(rng, 4, 15)
                                                       : uniform(rng, 2, 20));
      fnode.variables =
          f.variables > 0 ? f.variables : 4 + static_cast<int>(uniform_index(rng, 9));
      for (const auto& c : f.calls) {
        auto it = fn_index.find(c.function);
        if (it == fn_index.end())
          throw InvalidArgument("function '" + f.name + "' calls unknown function '" +
                                c.function + "'");
        if (c.probability < 0 || c.probability > 1)
          throw InvalidArgument("call probability out of [0, 1]");
        fnode.calls.emplace_back(it->second, c.probability);
      }
    }
    t.switches.push_back({node.edge_switch, "edge", s});
    t.switches.push_back({node.agg_switch, "agg", s});
    t.links.push_back({t.router, "s" + std::to_string(node.agg_switch),
                       uniform(rng, 0.2, 0.6), 1000});
    t.links.push_back({"s" + std::to_string(node.agg_switch),
                       "s" + std::to_string(node.edge_switch), uniform(rng, 0.05, 0.2), 1000});
    t.links.push_back({"s" + std::to_string(node.edge_switch), node.host_id,
                       uniform(rng, 0.02, 0.1), 100});
    t.services.push_back(std::move(node));
  }
  if (spec.entries.empty()) throw InvalidArgument("app spec has no entry functions");
  for (const auto& e : spec.entries) {
    auto it = fn_index.find(e.function);
    if (it == fn_index.end())
      throw InvalidArgument("unknown entry function '" + e.function + "'");
    if (e.weight <= 0) throw InvalidArgument("entry weight must be positive");
    t.entries.emplace_back(it->second, e.weight);
  }
  // Every service must be reachable from the entry functions.
  std::vector<bool> seen(t.functions.size(), false);
  std::vector<std::size_t> stack;
  for (const auto& [f, w] : t.entries) stack.push_back(f);
  while (!stack.empty()) {
    const std::size_t f = stack.back();
    stack.pop_back();
    if (seen[f]) continue;
    seen[f] = true;
    for (const auto& [c, p] : t.functions[f].calls)
      if (p > 0) stack.push_back(c);
  }
  for (std::size_t s = 0; s < t.services.size(); ++s) {
    bool reached = false;
    for (std::size_t f = 0; f < t.functions.size(); ++f)
      if (seen[f] && t.functions[f].service == s) reached = true;
    if (!reached)
      throw InvalidArgument("service '" + t.services[s].name +
                            "' is unreachable from the entry functions");
  }
  return t;
}

// ---------------------------------------------------------------------------
// Fault taxonomy

enum class Category {
  ResourceUnderprovisioning,
  ComponentFailure,
  SubsystemMisconfiguration,
  NetworkCongestion,
  NetworkMisconfiguration,
  SourceCodeBug,
  IncorrectDataExchange,
};

inline constexpr std::array<Category, 7> kAllCategories = {
    Category::ResourceUnderprovisioning, Category::ComponentFailure,
    Category::SubsystemMisconfiguration, Category::NetworkCongestion,
    Category::NetworkMisconfiguration,   Category::SourceCodeBug,
    Category::IncorrectDataExchange};

// Relative frequencies of the categories in a production incident study.
inline constexpr std::array<double, 7> kDefaultCategoryWeights = {17, 58, 11, 5, 18, 31, 26};

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::ResourceUnderprovisioning: return "resource_underprovisioning";
    case Category::ComponentFailure: return "component_failure";
    case Category::SubsystemMisconfiguration: return "subsystem_misconfiguration";
    case Category::NetworkCongestion: return "network_congestion";
    case Category::NetworkMisconfiguration: return "network_misconfiguration";
    case Category::SourceCodeBug: return "source_code_bug";
    case Category::IncorrectDataExchange: return "incorrect_data_exchange";
  }
  return "component_failure";
}

inline Category category_from_string(std::string_view s) {
  for (auto c : kAllCategories)
    if (to_string(c) == s) return c;
  throw InvalidArgument("unknown fault category '" + std::string(s) + "'");
}

// Concrete mechanism within a category; each maps to one query template.
inline std::vector<std::string> variants_of(Category c) {
  switch (c) {
    case Category::ResourceUnderprovisioning: return {"cpu", "memory"};
    case Category::ComponentFailure: return {"container_down"};
    case Category::SubsystemMisconfiguration: return {"bad_hostname"};
    case Category::NetworkCongestion: return {"cross_traffic"};
    case Category::NetworkMisconfiguration: return {"firewall_drop"};
    case Category::SourceCodeBug: return {"negated_condition", "slow_path"};
    case Category::IncorrectDataExchange: return {"altered_signature"};
  }
  return {};
}

enum class LocationKind { Host, Switch, Function };

struct FaultSpec {
  Category category = Category::ComponentFailure;
  std::string variant;
  std::string location;
  double magnitude = 0.5;  // [0, 1]; scales the category's knob
  std::uint64_t seed = 0;
  bool operator==(const FaultSpec&) const = default;
};

inline LocationKind location_kind(Category c) {
  switch (c) {
    case Category::ResourceUnderprovisioning:
    case Category::ComponentFailure:
      return LocationKind::Host;
    case Category::NetworkCongestion:
    case Category::NetworkMisconfiguration:
      return LocationKind::Switch;
    default:
      return LocationKind::Function;
  }
}

// Every location a (category, variant) can be injected at, in topology order.
inline std::vector<std::string> candidate_locations(const Topology& t, Category c,
                                                    std::string_view variant) {
  std::vector<std::string> out;
  switch (c) {
    case Category::ResourceUnderprovisioning:
    case Category::ComponentFailure:
      for (const auto& s : t.services) out.push_back(s.container_id);
      break;
    case Category::NetworkMisconfiguration:
      for (const auto& s : t.services) out.push_back(std::to_string(s.edge_switch));
      break;
    case Category::NetworkCongestion:
      for (const auto& s : t.switches) out.push_back(std::to_string(s.id));
      break;
    case Category::SubsystemMisconfiguration:
      for (std::size_t f = 0; f < t.functions.size(); ++f)
        if (t.has_remote_callee(f)) out.push_back(t.functions[f].name);
      break;
    case Category::SourceCodeBug:
      for (std::size_t f = 0; f < t.functions.size(); ++f)
        if (variant == "slow_path" || !t.functions[f].calls.empty())
          out.push_back(t.functions[f].name);
      break;
    case Category::IncorrectDataExchange:
      for (std::size_t f = 0; f < t.functions.size(); ++f)
        if (t.has_remote_caller(f)) out.push_back(t.functions[f].name);
      break;
  }
  return out;
}

inline void validate_fault(const Topology& t, const FaultSpec& f) {
  const auto variants = variants_of(f.category);
  if (std::find(variants.begin(), variants.end(), f.variant) == variants.end())
    throw InvalidArgument("invalid_fault", "variant '" + f.variant + "' does not belong to " +
                                               std::string(to_string(f.category)));
  if (!(f.magnitude >= 0 && f.magnitude <= 1))
    throw InvalidArgument("invalid_fault", "fault magnitude must lie in [0, 1]");
  const auto locs = candidate_locations(t, f.category, f.variant);
  if (std::find(locs.begin(), locs.end(), f.location) == locs.end())
    throw InvalidArgument("invalid_fault", "location '" + f.location + "' is not a valid " +
                                               std::string(to_string(f.category)) +
                                               " site in this topology");
}

// Simulation knobs after fault injection. Indices refer to the topology.
struct FaultEffects {
  std::vector<double> drop;          // per service: probability traffic is dropped at the router
  std::vector<bool> down;            // per service: container stopped
  std::vector<double> slowdown;      // per service: multiplicative duration factor
  std::vector<bool> cpu_pinned;      // per service
  std::vector<bool> mem_pressure;    // per service
  std::vector<double> swap_bps;      // per service, added disk traffic
  std::vector<double> congestion;    // per switch: intensity, 0 = none
  std::vector<double> extra_ms;      // per function: added self time
  std::vector<bool> negated;         // per function: skips its calls, few variables
  std::vector<double> throw_rate;    // per function: receiver-side exceptions
  std::vector<int> unresolved;       // per function: service index it cannot resolve, -1 none
};

struct FaultyWorld {
  Topology topology;
  std::optional<FaultSpec> fault;
  FaultEffects effects;
};

inline FaultyWorld inject_fault(const Topology& t, std::optional<FaultSpec> fault) {
  FaultyWorld w{t, fault, {}};
  auto& e = w.effects;
  const std::size_t ns = t.services.size();
  const std::size_t nf = t.functions.size();
  e.drop.assign(ns, 0.0);
  e.down.assign(ns, false);
  e.slowdown.assign(ns, 1.0);
  e.cpu_pinned.assign(ns, false);
  e.mem_pressure.assign(ns, false);
  e.swap_bps.assign(ns, 0.0);
  e.congestion.assign(t.switches.size(), 0.0);
  e.extra_ms.assign(nf, 0.0);
  e.negated.assign(nf, false);
  e.throw_rate.assign(nf, 0.0);
  e.unresolved.assign(nf, -1);
  if (!fault) return w;
  validate_fault(t, *fault);
  const double m = fault->magnitude;
  switch (fault->category) {
    case Category::ResourceUnderprovisioning: {
      const std::size_t s = *t.service_by_container(fault->location);
      if (fault->variant == "cpu") {
        e.cpu_pinned[s] = true;
        e.slowdown[s] = 2.0 + 2.0 * m;
      } else {
        e.mem_pressure[s] = true;
        e.slowdown[s] = 1.2 + 0.4 * m;
        e.swap_bps[s] = (3.0 + 3.0 * m) * 1.0e6;
      }
      break;
    }
    case Category::ComponentFailure: {
      const std::size_t s = *t.service_by_container(fault->location);
      e.down[s] = true;
      e.drop[s] = 1.0;
      break;
    }
    case Category::NetworkMisconfiguration: {
      const auto sw = t.switches[*t.switch_index(fault->location)];
      e.drop[sw.service] = 0.97 + 0.03 * m;
      break;
    }
    case Category::NetworkCongestion:
      e.congestion[*t.switch_index(fault->location)] = 0.3 + 0.7 * m;
      break;
    case Category::SubsystemMisconfiguration: {
      const std::size_t f = *t.function_index(fault->location);
      for (const auto& [c, p] : t.functions[f].calls) {
        if (t.functions[c].service != t.functions[f].service) {
          e.unresolved[f] = static_cast<int>(t.functions[c].service);
          break;
        }
      }
      break;
    }
    case Category::SourceCodeBug: {
      const std::size_t f = *t.function_index(fault->location);
      if (fault->variant == "negated_condition") {
        e.negated[f] = true;
      } else {
        e.extra_ms[f] = 150.0 + 350.0 * m;
      }
      break;
    }
    case Category::IncorrectDataExchange: {
      const std::size_t f = *t.function_index(fault->location);
      e.throw_rate[f] = 0.5 + 0.5 * m;
      break;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Telemetry simulation

struct Workload {
  double request_rate = 2.5;  // requests per second
  int duration_s = 20;
  std::size_t packet_cap = 10000;  // packet records kept per scenario
};

namespace detail {

// Monitoring probes per host and cross traffic per aggregation switch, both
// per second and relative to the request rate.
constexpr double kProbeShare = 0.5;
constexpr double kBackgroundShare = 0.6;
constexpr double kBaseErrorRate = 0.01;
constexpr std::int64_t kServicePortBase = 8000;
constexpr int kMaxCallDepth = 16;

struct PendingPacket {
  std::size_t sw;
  double time;
  telemetry::PacketRecord rec;
};

class Simulator {
 public:
  Simulator(const FaultyWorld& w, const Workload& wl, std::uint64_t seed)
      : w_(w), t_(w.topology), e_(w.effects), wl_(wl), rng_(seed) {
    const std::size_t d = static_cast<std::size_t>(wl.duration_s);
    counts_.assign(t_.switches.size(), std::vector<double>(d, 0.0));
    invocations_.assign(t_.services.size(), std::vector<double>(d, 0.0));
    spans_.resize(t_.functions.size());
    sw_index_.clear();
    for (std::size_t i = 0; i < t_.switches.size(); ++i) sw_index_[t_.switches[i].id] = i;
  }

  TelemetryStore run() {
    const int d = wl_.duration_s;
    // Concurrent-user amplitude jitter for this scenario.
    const double jitter = uniform(rng_, 0.8, 1.2);
    double weight_sum = 0;
    for (const auto& [f, wgt] : t_.entries) weight_sum += wgt;
    for (int sec = 0; sec < d; ++sec) {
      const auto n = poisson(rng_, wl_.request_rate * jitter);
      for (std::int64_t r = 0; r < n; ++r) {
        const double start = sec + uniform01(rng_);
        double pick = uniform01(rng_) * weight_sum;
        std::size_t entry = t_.entries.back().first;
        for (const auto& [f, wgt] : t_.entries) {
          if (pick < wgt) {
            entry = f;
            break;
          }
          pick -= wgt;
        }
        const std::int64_t port = 30000 + static_cast<std::int64_t>(uniform_index(rng_, 20000));
        call(entry, std::nullopt, start, port, 0);
      }
      background(sec);
    }
    return assemble();
  }

 private:
  std::size_t edge_of(std::size_t s) const { return sw_index_.at(t_.services[s].edge_switch); }
  std::size_t agg_of(std::size_t s) const { return sw_index_.at(t_.services[s].agg_switch); }

  void record(std::size_t sw, double time, const std::string& src, const std::string& dst,
              std::int64_t sport, std::int64_t dport, std::int64_t proto) {
    const auto sec = static_cast<std::size_t>(std::clamp(
        static_cast<int>(std::floor(time)), 0, wl_.duration_s - 1));
    counts_[sw][sec] += 1;
    if (packets_.size() < wl_.packet_cap)
      packets_.push_back({sw, time, {time, src, dst, sport, dport, proto, 0.0}});
  }

  // A one-way packet from a service (or the outside, nullopt) to service dst.
  // Returns false when the router drops it.
  bool send(std::optional<std::size_t> src, std::size_t dst, double time,
            const std::string& src_ip, const std::string& dst_ip, std::int64_t sport,
            std::int64_t dport) {
    if (src) {
      record(edge_of(*src), time, src_ip, dst_ip, sport, dport, 6);
      record(agg_of(*src), time + 0.0001, src_ip, dst_ip, sport, dport, 6);
    }
    double p = e_.drop[dst];
    if (src) p = 1.0 - (1.0 - p) * (1.0 - e_.drop[*src]);
    if (p > 0 && (p >= 1.0 || bernoulli(rng_, p))) return false;
    record(agg_of(dst), time + 0.0002, src_ip, dst_ip, sport, dport, 6);
    record(edge_of(dst), time + 0.0003, src_ip, dst_ip, sport, dport, 6);
    return true;
  }

  enum class CallResult { Ok, Refused, Timeout };

  CallResult call(std::size_t fn, std::optional<std::size_t> caller, double time,
                  std::int64_t port, int depth) {
    const auto& f = t_.functions[fn];
    const std::size_t svc = f.service;
    const bool remote = !caller || *caller != svc;
    const std::string client_ip = caller ? t_.services[*caller].ip : std::string("10.0.0.200");
    const std::string& server_ip = t_.services[svc].ip;
    const std::int64_t dport = kServicePortBase + static_cast<std::int64_t>(svc) + 1;
    if (remote) {
      if (!send(caller, svc, time, client_ip, server_ip, port, dport))
        return e_.down[svc] ? CallResult::Refused : CallResult::Timeout;
    }
    telemetry::SpanRecord span;
    span.time = time;
    int vars = f.variables + static_cast<int>(uniform_index(rng_, 3)) - 1;
    double self = f.base_ms * lognormal(rng_, 0.3) * e_.slowdown[svc];
    double exceptions = bernoulli(rng_, kBaseErrorRate) ? 1.0 : 0.0;
    if (exceptions > 0) span.error = "internal server error";
    bool skip_calls = false;
    if (e_.negated[fn]) {
      vars = static_cast<int>(uniform_index(rng_, 2));
      self *= 0.6;
      skip_calls = true;
    }
    self += e_.extra_ms[fn] * (e_.extra_ms[fn] > 0 ? lognormal(rng_, 0.2) : 1.0);
    if (e_.throw_rate[fn] > 0 && bernoulli(rng_, e_.throw_rate[fn])) {
      exceptions += 1;
      span.error = "TypeError: unexpected argument type";
      self *= 0.5;
      skip_calls = true;
    }
    double offset = 0.0005;
    if (!skip_calls && depth < kMaxCallDepth) {
      for (const auto& [callee, prob] : f.calls) {
        if (!bernoulli(rng_, prob)) continue;
        const std::size_t csvc = t_.functions[callee].service;
        if (e_.unresolved[fn] >= 0 && static_cast<std::size_t>(e_.unresolved[fn]) == csvc) {
          exceptions += 1;
          span.error = "could not resolve host " + t_.services[csvc].name;
          self += uniform(rng_, 40, 120);
          continue;
        }
        const std::int64_t cport = 30000 + static_cast<std::int64_t>(uniform_index(rng_, 20000));
        const auto r = call(callee, svc, time + offset, cport, depth + 1);
        offset += 0.002;
        if (r == CallResult::Refused) {
          exceptions += 1;
          span.error = "connection refused: " + t_.services[csvc].name;
          self += uniform(rng_, 2, 8);
        } else if (r == CallResult::Timeout) {
          exceptions += 1;
          span.error = "upstream request timeout: " + t_.services[csvc].name;
          self += uniform(rng_, 200, 400);
        }
      }
    }
    span.variable_count = std::max(0, vars);
    span.duration_ms = self;
    span.exception_count = exceptions;
    spans_[fn].push_back(std::move(span));
    const auto sec = static_cast<std::size_t>(std::clamp(
        static_cast<int>(std::floor(time)), 0, wl_.duration_s - 1));
    invocations_[svc][sec] += 1;
    if (remote) {
      // Response path back to the caller.
      const double rt = time + offset + self / 1000.0;
      const auto& sip = t_.services[svc].ip;
      record(edge_of(svc), rt, sip, client_ip, dport, port, 6);
      record(agg_of(svc), rt + 0.0001, sip, client_ip, dport, port, 6);
      if (caller) {
        record(agg_of(*caller), rt + 0.0002, sip, client_ip, dport, port, 6);
        record(edge_of(*caller), rt + 0.0003, sip, client_ip, dport, port, 6);
      }
    }
    return CallResult::Ok;
  }

  void background(int sec) {
    // Monitoring probes from the router to every host.
    for (std::size_t s = 0; s < t_.services.size(); ++s) {
      const auto n = poisson(rng_, kProbeShare * wl_.request_rate);
      for (std::int64_t i = 0; i < n; ++i) {
        const double time = sec + uniform01(rng_);
        if (e_.drop[s] > 0 && (e_.drop[s] >= 1.0 || bernoulli(rng_, e_.drop[s]))) continue;
        record(agg_of(s), time, "10.0.0.254", t_.services[s].ip, 40000 + i, 9100, 6);
        record(edge_of(s), time + 0.0001, "10.0.0.254", t_.services[s].ip, 40000 + i, 9100, 6);
      }
    }
    // Cross traffic between a sender/receiver pair on each aggregation switch,
    // heavier on a congested switch.
    for (std::size_t i = 0; i < t_.switches.size(); ++i) {
      const auto& sw = t_.switches[i];
      double rate = sw.role == "agg" ? kBackgroundShare * wl_.request_rate : 0.0;
      if (e_.congestion[i] > 0) rate += 15.0 + 25.0 * e_.congestion[i];
      const auto n = poisson(rng_, rate);
      const std::string base = "10.1." + std::to_string(sw.id) + ".";
      for (std::int64_t k = 0; k < n; ++k)
        record(i, sec + uniform01(rng_), base + "1", base + "2", 5001, 5001, 17);
    }
  }

  TelemetryStore assemble() {
    TelemetryStore store;
    const int d = wl_.duration_s;
    // Queue depth per switch and second.
    std::vector<std::vector<double>> queue(t_.switches.size(), std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < t_.switches.size(); ++i) {
      for (int sec = 0; sec < d; ++sec) {
        double q = std::abs(normal(rng_, 1.5, 1.0)) + 0.05 * counts_[i][sec];
        if (e_.congestion[i] > 0) q += (25.0 + 60.0 * e_.congestion[i]) * uniform(rng_, 0.7, 1.3);
        queue[i][sec] = q;
      }
    }
    for (std::size_t i = 0; i < t_.switches.size(); ++i) {
      telemetry::SwitchLog log;
      log.id = std::to_string(t_.switches[i].id);
      for (int sec = 0; sec < d; ++sec)
        log.samples.push_back({static_cast<double>(sec), queue[i][sec], counts_[i][sec]});
      store.switches.push_back(std::move(log));
    }
    std::stable_sort(packets_.begin(), packets_.end(),
                     [](const PendingPacket& a, const PendingPacket& b) {
                       return a.sw != b.sw ? a.sw < b.sw : a.time < b.time;
                     });
    for (auto& p : packets_) {
      const auto sec = static_cast<std::size_t>(std::clamp(
          static_cast<int>(std::floor(p.time)), 0, d - 1));
      p.rec.qdepth = std::max(0.0, std::round(queue[p.sw][sec] + normal(rng_, 0.0, 1.0)));
      store.switches[p.sw].packets.push_back(std::move(p.rec));
    }
    for (std::size_t f = 0; f < t_.functions.size(); ++f) {
      if (spans_[f].empty()) continue;
      store.functions.push_back({t_.functions[f].name, std::move(spans_[f])});
    }
    for (std::size_t s = 0; s < t_.services.size(); ++s) {
      const auto& node = t_.services[s];
      telemetry::ContainerLog log;
      log.id = node.container_id;
      for (int sec = 0; sec < d; ++sec) {
        telemetry::ContainerSample c;
        c.time = sec;
        const double inv = invocations_[s][sec];
        if (e_.down[s]) {
          log.samples.push_back(c);
          continue;
        }
        c.cpu_util = e_.cpu_pinned[s]
                         ? 1.0
                         : std::clamp(node.base_cpu + 0.02 * inv * e_.slowdown[s] +
                                          normal(rng_, 0.0, 0.02),
                                      0.01, 0.95);
        c.mem_util = e_.mem_pressure[s]
                         ? uniform(rng_, 0.94, 0.99)
                         : std::clamp(node.base_mem + 0.002 * inv + normal(rng_, 0.0, 0.01),
                                      0.05, 0.9);
        c.disk_throughput =
            node.base_disk * lognormal(rng_, 0.25) * (1.0 + 0.05 * inv) +
            e_.swap_bps[s] * uniform(rng_, 0.8, 1.2);
        log.samples.push_back(c);
      }
      store.containers.push_back(std::move(log));
    }
    return store;
  }

  const FaultyWorld& w_;
  const Topology& t_;
  const FaultEffects& e_;
  Workload wl_;
  Rng rng_;
  std::map<int, std::size_t> sw_index_;
  std::vector<std::vector<double>> counts_;
  std::vector<std::vector<double>> invocations_;
  std::vector<std::vector<telemetry::SpanRecord>> spans_;
  std::vector<PendingPacket> packets_;
};

}  // namespace detail

inline TelemetryStore simulate(const FaultyWorld& world, const Workload& workload,
                               std::uint64_t seed) {
  if (workload.duration_s <= 0) throw InvalidArgument("workload duration must be positive");
  if (workload.request_rate < 0) throw InvalidArgument("request rate must be non-negative");
  detail::Simulator sim(world, workload, seed);
  return sim.run();
}

// ---------------------------------------------------------------------------
// User reports

enum class Symptom { SlowLoad, MissingContent, ErrorPage, Crash };
inline constexpr std::array<Symptom, 4> kAllSymptoms = {
    Symptom::SlowLoad, Symptom::MissingContent, Symptom::ErrorPage, Symptom::Crash};

inline std::string_view to_string(Symptom s) {
  switch (s) {
    case Symptom::SlowLoad: return "slow_load";
    case Symptom::MissingContent: return "missing_content";
    case Symptom::ErrorPage: return "error_page";
    case Symptom::Crash: return "crash";
  }
  return "slow_load";
}

struct UserReport {
  std::string text;
  std::map<std::string, bool> choices;  // slow_load, missing_content, error_page, crash
  bool operator==(const UserReport&) const = default;
};

namespace detail {

inline const std::vector<std::string>& symptom_templates(Symptom s) {
  static const std::vector<std::string> slow = {
      "the {page} is loading slowly",
      "page took forever to load",
      "the {page} takes ages to show up",
      "everything on the {page} is really slow today",
      "i waited almost a minute for the {page} to load",
      "the site is very laggy when i open the {page}",
      "the {page} keeps spinning before anything appears",
      "loading the {page} is painfully slow",
      "it is super slow, the {page} barely loads",
      "clicking anything on the {page} takes a long time to respond",
  };
  static const std::vector<std::string> missing = {
      "there is nothing on the page, it is empty",
      "the {page} shows up but the items are missing",
      "parts of the {page} are blank",
      "the {page} loads but no content is shown",
      "i can not see any products on the {page}",
      "the {page} is empty, nothing is listed",
      "some sections of the {page} never appear",
      "the {page} is missing information that used to be there",
      "the list on the {page} is empty",
  };
  static const std::vector<std::string> error = {
      "i get an error page when opening the {page}",
      "the {page} says something went wrong",
      "an error message appears on the {page}",
      "the {page} returns a server error",
      "i keep seeing error 500 on the {page}",
      "the {page} fails with an error every time",
      "got an internal error while using the {page}",
      "the {page} shows an error instead of the content",
      "error when i try to load the {page}",
  };
  static const std::vector<std::string> crash = {
      "the {page} crashed",
      "the site crashes when i open the {page}",
      "the {page} froze and then closed",
      "my browser tab crashed on the {page}",
      "the app stopped working on the {page}",
      "the {page} breaks as soon as i click anything",
      "the {page} crashed and showed garbage data",
      "the {page} shows wrong values and then crashes",
      "the {page} stops responding and crashes",
  };
  switch (s) {
    case Symptom::SlowLoad: return slow;
    case Symptom::MissingContent: return missing;
    case Symptom::ErrorPage: return error;
    case Symptom::Crash: return crash;
  }
  return slow;
}

inline const std::vector<std::string>& pages() {
  static const std::vector<std::string> p = {
      "home page", "catalogue page", "cart page", "checkout page",
      "login page", "product page", "orders page", "account page"};
  return p;
}

inline const std::map<std::string, std::vector<std::string>>& synonyms() {
  static const std::map<std::string, std::vector<std::string>> m = {
      {"page", {"site", "webpage", "screen"}},
      {"slow", {"sluggish", "laggy"}},
      {"slowly", {"sluggishly"}},
      {"empty", {"blank"}},
      {"error", {"failure", "problem"}},
      {"crashed", {"died", "broke"}},
      {"crashes", {"dies", "breaks"}},
      {"missing", {"gone", "absent"}},
      {"really", {"very", "extremely"}},
      {"shows", {"displays"}},
      {"items", {"products", "things"}},
      {"nothing", {"no content"}},
      {"site", {"website", "app"}},
  };
  return m;
}

// Per (category, variant): weights over {slow, missing, error, crash}.
inline std::array<double, 4> symptom_weights(const FaultSpec& f) {
  switch (f.category) {
    case Category::ResourceUnderprovisioning: return {0.85, 0.0, 0.1, 0.05};
    case Category::NetworkCongestion: return {0.9, 0.05, 0.05, 0.0};
    case Category::ComponentFailure: return {0.0, 0.55, 0.45, 0.0};
    case Category::NetworkMisconfiguration: return {0.3, 0.35, 0.35, 0.0};
    case Category::SubsystemMisconfiguration: return {0.05, 0.1, 0.85, 0.0};
    case Category::SourceCodeBug:
      if (f.variant == "slow_path") return {0.75, 0.0, 0.0, 0.25};
      return {0.0, 0.6, 0.0, 0.4};
    case Category::IncorrectDataExchange: return {0.0, 0.35, 0.05, 0.6};
  }
  return {0.25, 0.25, 0.25, 0.25};
}

inline std::string add_typo(const std::string& w, Rng& rng) {
  if (w.size() < 4) return w;
  std::string out = w;
  const std::size_t i = 1 + uniform_index(rng, w.size() - 2);
  if (bernoulli(rng, 0.5)) {
    std::swap(out[i], out[i + 1 < out.size() ? i + 1 : i - 1]);
  } else {
    out.erase(i, 1);
  }
  return out;
}

}  // namespace detail

inline UserReport synthesize_report(const FaultSpec& fault, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "report"));
  const auto weights = detail::symptom_weights(fault);
  double total = 0;
  for (double w : weights) total += w;
  double pick = uniform01(rng) * total;
  std::size_t si = 0;
  for (; si < 3; ++si) {
    if (pick < weights[si]) break;
    pick -= weights[si];
  }
  const Symptom symptom = kAllSymptoms[si];
  const auto& bank = detail::symptom_templates(symptom);
  std::string text = bank[uniform_index(rng, bank.size())];
  const auto& pages = detail::pages();
  const std::string page = pages[uniform_index(rng, pages.size())];
  for (auto pos = text.find("{page}"); pos != std::string::npos; pos = text.find("{page}"))
    text.replace(pos, 6, page);

  // Lexical noise: synonym swaps, then occasional typos.
  std::istringstream in(text);
  std::string word;
  std::string out;
  while (in >> word) {
    auto it = detail::synonyms().find(word);
    if (it != detail::synonyms().end() && bernoulli(rng, 0.3))
      word = it->second[uniform_index(rng, it->second.size())];
    if (bernoulli(rng, 0.03)) word = detail::add_typo(word, rng);
    if (!out.empty()) out += ' ';
    out += word;
  }
  UserReport r;
  r.text = out;
  for (auto s : kAllSymptoms) r.choices[std::string(to_string(s))] = false;
  r.choices[std::string(to_string(symptom))] = true;
  if (bernoulli(rng, 0.15)) {
    const auto other = kAllSymptoms[uniform_index(rng, kAllSymptoms.size())];
    r.choices[std::string(to_string(other))] = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ground truth

inline dsl::QueryAst ground_truth_query(const FaultSpec& f, const Topology& t) {
  validate_fault(t, f);
  const auto quoted = [](const std::string& s) { return "\"" + s + "\""; };
  std::string text;
  dsl::Dialect dialect = dsl::Dialect::Network;
  switch (f.category) {
    case Category::ResourceUnderprovisioning:
      dialect = dsl::Dialect::Resource;
      text = std::string("SELECT * FROM ") + (f.variant == "cpu" ? "cpu_usage" : "mem_usage") +
             " WHERE host=" + quoted(f.location);
      break;
    case Category::ComponentFailure: {
      const auto s = *t.service_by_container(f.location);
      text = "stream = filter(T, switch==" + std::to_string(t.services[s].edge_switch) +
             "); result = groupby(stream, [5-tuple], count);";
      break;
    }
    case Category::NetworkMisconfiguration:
      text = "stream = filter(T, switch==" + f.location +
             "); result = groupby(stream, [5-tuple], count);";
      break;
    case Category::NetworkCongestion:
      text = "SELECT queue_size FROM T WHERE switch_id=" + f.location;
      break;
    case Category::SubsystemMisconfiguration:
      dialect = dsl::Dialect::Trace;
      text = "SELECT error FROM spans WHERE name=" + quoted(f.location) +
             " AND exception_count>0";
      break;
    case Category::SourceCodeBug:
      dialect = dsl::Dialect::Trace;
      text = std::string("SELECT ") + (f.variant == "slow_path" ? "duration_ms" : "span") +
             " FROM spans WHERE name=" + quoted(f.location);
      break;
    case Category::IncorrectDataExchange:
      dialect = dsl::Dialect::Trace;
      text = "SELECT span FROM spans WHERE name=" + quoted(f.location) +
             " AND exception_count>0";
      break;
  }
  return dsl::parse_query(text, dialect);
}

// ---------------------------------------------------------------------------
// Datasets

enum class Split { Train, Val, TestRepeat, TestGeneralize };
inline constexpr std::array<Split, 4> kAllSplits = {Split::Train, Split::Val,
                                                   Split::TestRepeat, Split::TestGeneralize};

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::TestRepeat: return "test_repeat";
    case Split::TestGeneralize: return "test_generalize";
  }
  return "train";
}

inline Split split_from_string(std::string_view s) {
  for (auto x : kAllSplits)
    if (to_string(x) == s) return x;
  throw InvalidArgument("unknown split '" + std::string(s) + "'");
}

struct Scenario {
  std::string id;
  std::string app;
  FaultSpec fault;
  UserReport report;
  TelemetryStore logs;
  std::string ground_truth_query;  // canonical text
  Split split = Split::Train;

  dsl::QueryAst ground_truth() const { return dsl::parse_query(ground_truth_query); }
  bool operator==(const Scenario&) const = default;
};

struct DatasetConfig {
  json app = "sockshop";
  std::size_t num_faults = 60;
  std::size_t reports_per_fault = 10;
  std::vector<double> category_weights{kDefaultCategoryWeights.begin(),
                                       kDefaultCategoryWeights.end()};
  Workload workload;
  double train_fraction = 0.53;
  double val_fraction = 0.13;
  // Share of the test split reserved for faults at unseen locations.
  double generalize_fraction = 0.5;
  std::uint64_t seed = 1;
};

inline json to_json(const DatasetConfig& c) {
  return json{{"app", c.app},
              {"num_faults", c.num_faults},
              {"reports_per_fault", c.reports_per_fault},
              {"category_weights", c.category_weights},
              {"request_rate", c.workload.request_rate},
              {"duration_s", c.workload.duration_s},
              {"packet_cap", c.workload.packet_cap},
              {"train_fraction", c.train_fraction},
              {"val_fraction", c.val_fraction},
              {"generalize_fraction", c.generalize_fraction},
              {"seed", c.seed}};
}

inline DatasetConfig dataset_config_from_json(const json& j) {
  DatasetConfig c;
  try {
    if (j.contains("app")) c.app = j.at("app");
    c.num_faults = j.value("num_faults", c.num_faults);
    c.reports_per_fault = j.value("reports_per_fault", c.reports_per_fault);
    if (j.contains("category_weights"))
      c.category_weights = j.at("category_weights").get<std::vector<double>>();
    c.workload.request_rate = j.value("request_rate", c.workload.request_rate);
    c.workload.duration_s = j.value("duration_s", c.workload.duration_s);
    c.workload.packet_cap = j.value("packet_cap", c.workload.packet_cap);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.generalize_fraction = j.value("generalize_fraction", c.generalize_fraction);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed dataset config: " + std::string(e.what()));
  }
  if (c.category_weights.size() != kAllCategories.size())
    throw InvalidArgument("category_weights needs one weight per category (7)");
  return c;
}

struct Dataset {
  DatasetConfig config;
  Topology topology;
  std::vector<Scenario> scenarios;

  std::vector<const Scenario*> split(Split s) const {
    std::vector<const Scenario*> out;
    for (const auto& x : scenarios)
      if (x.split == s) out.push_back(&x);
    return out;
  }
  const Scenario* find(std::string_view id) const {
    for (const auto& x : scenarios)
      if (x.id == id) return &x;
    return nullptr;
  }
};

// Largest-remainder apportionment of n items to the given weights.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& weights) {
  double total = 0;
  for (double w : weights) {
    if (w < 0) throw InvalidArgument("weights must be non-negative");
    total += w;
  }
  if (total <= 0) throw InvalidArgument("weights sum to zero");
  std::vector<std::size_t> out(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = n * weights[i] / total;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    used += out[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < n; ++k, ++used) out[rem[k % rem.size()].second] += 1;
  return out;
}

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

inline SplitCounts split_counts(std::size_t n, double train_fraction, double val_fraction) {
  SplitCounts c;
  c.train = static_cast<std::size_t>(std::llround(n * train_fraction));
  c.val = static_cast<std::size_t>(std::llround(n * val_fraction));
  if (c.train + c.val > n) throw InvalidArgument("split fractions exceed 1");
  c.test = n - c.train - c.val;
  return c;
}

namespace detail {

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

inline std::string template_key(const std::string& query) {
  return dsl::render_template(dsl::extract_template(dsl::parse_query(query)).first);
}

// Assigns split tags. Faults that share a ground-truth query or a
// (category, location) pair form one group; whole groups move to
// test_generalize, so their queries and locations never reach training.
inline void assign_splits(std::vector<Scenario>& scenarios, const std::vector<FaultSpec>& faults,
                          const std::vector<std::string>& fault_queries,
                          std::size_t reports_per_fault, const DatasetConfig& cfg) {
  const std::size_t nf = faults.size();
  const auto counts = split_counts(scenarios.size(), cfg.train_fraction, cfg.val_fraction);
  UnionFind uf(nf);
  std::map<std::string, std::size_t> first_by_key;
  for (std::size_t i = 0; i < nf; ++i) {
    const std::string k1 = "q:" + fault_queries[i];
    const std::string k2 = "l:" + std::string(to_string(faults[i].category)) + "/" + faults[i].location;
    for (const auto& k : {k1, k2}) {
      auto [it, fresh] = first_by_key.emplace(k, i);
      if (!fresh) uf.unite(it->second, i);
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < nf; ++i) groups[uf.find(i)].push_back(i);
  std::map<std::string, std::size_t> groups_per_template;
  std::vector<std::pair<std::size_t, std::string>> group_list;  // (root, template)
  for (const auto& [root, members] : groups) {
    const std::string tk = template_key(fault_queries[members.front()]);
    groups_per_template[tk] += 1;
    group_list.emplace_back(root, tk);
  }

  Rng rng(derive_seed(cfg.seed, "split"));
  shuffle(group_list, rng);
  const std::size_t target = static_cast<std::size_t>(
      std::llround(counts.test * std::clamp(cfg.generalize_fraction, 0.0, 1.0)));
  std::set<std::size_t> generalize_faults;
  std::size_t chosen = 0;
  for (const auto& [root, tk] : group_list) {
    const std::size_t size = groups[root].size() * reports_per_fault;
    if (chosen + size > target) continue;
    if (groups_per_template[tk] <= 1) continue;
    groups_per_template[tk] -= 1;
    chosen += size;
    for (auto f : groups[root]) generalize_faults.insert(f);
  }
  if (target > 0 && chosen == 0)
    throw InvalidArgument("infeasible_config",
                          "too few distinct fault locations to form test_generalize");

  const std::size_t repeat_n = counts.test - chosen;
  std::vector<std::size_t> pool;  // scenario indices not in test_generalize
  std::vector<std::size_t> forced_train;
  for (std::size_t f = 0; f < nf; ++f) {
    std::vector<std::size_t> own;
    for (std::size_t r = 0; r < reports_per_fault; ++r) own.push_back(f * reports_per_fault + r);
    if (generalize_faults.count(f)) {
      for (auto s : own) scenarios[s].split = Split::TestGeneralize;
      continue;
    }
    shuffle(own, rng);
    forced_train.push_back(own.front());
    pool.insert(pool.end(), own.begin() + 1, own.end());
  }
  if (forced_train.size() > counts.train)
    throw InvalidArgument("infeasible_config", "training split smaller than the number of faults");
  shuffle(pool, rng);
  for (auto s : forced_train) scenarios[s].split = Split::Train;
  std::size_t at = 0;
  for (std::size_t k = 0; k < repeat_n && at < pool.size(); ++k)
    scenarios[pool[at++]].split = Split::TestRepeat;
  for (std::size_t k = 0; k < counts.val && at < pool.size(); ++k)
    scenarios[pool[at++]].split = Split::Val;
  while (at < pool.size()) scenarios[pool[at++]].split = Split::Train;
}

}  // namespace detail

// Fault list for a config: per-category counts from the weights, variants
// alternating within a category, locations cycling through a shuffled pool so
// that faults spread over the topology before any location repeats.
inline std::vector<FaultSpec> plan_faults(const DatasetConfig& cfg, const Topology& t) {
  const auto per_cat = apportion(cfg.num_faults, cfg.category_weights);
  std::vector<FaultSpec> faults;
  Rng rng(derive_seed(cfg.seed, "faults"));
  for (std::size_t c = 0; c < kAllCategories.size(); ++c) {
    const Category cat = kAllCategories[c];
    const auto variants = variants_of(cat);
    std::map<std::string, std::vector<std::string>> pools;
    std::map<std::string, std::size_t> cursor;
    for (std::size_t k = 0; k < per_cat[c]; ++k) {
      const std::string& variant = variants[k % variants.size()];
      auto& pool = pools[variant];
      auto& cur = cursor[variant];
      if (pool.empty() || cur >= pool.size()) {
        pool = candidate_locations(t, cat, variant);
        if (pool.empty())
          throw InvalidArgument("infeasible_config", "no valid location for " +
                                                         std::string(to_string(cat)));
        shuffle(pool, rng);
        cur = 0;
      }
      FaultSpec f;
      f.category = cat;
      f.variant = variant;
      f.location = pool[cur++];
      f.magnitude = uniform01(rng);
      f.seed = derive_seed(cfg.seed, "fault", faults.size());
      faults.push_back(f);
    }
  }
  return faults;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.num_faults == 0 || cfg.reports_per_fault == 0)
    throw InvalidArgument("dataset needs at least one fault and one report per fault");
  Dataset ds;
  ds.config = cfg;
  ds.topology = build_topology(app_from_json(cfg.app), cfg.seed);
  const auto faults = plan_faults(cfg, ds.topology);
  std::vector<std::string> queries;
  for (const auto& f : faults)
    queries.push_back(dsl::render_query(ground_truth_query(f, ds.topology)));
  for (std::size_t i = 0; i < faults.size(); ++i) {
    const FaultyWorld world = inject_fault(ds.topology, faults[i]);
    for (std::size_t r = 0; r < cfg.reports_per_fault; ++r) {
      Scenario s;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "s%04zu", ds.scenarios.size() + 1);
      s.id = buf;
      s.app = ds.topology.app;
      s.fault = faults[i];
      const std::uint64_t seed = derive_seed(faults[i].seed, "report", r);
      s.report = synthesize_report(faults[i], seed);
      s.logs = simulate(world, cfg.workload, derive_seed(seed, "logs"));
      s.ground_truth_query = queries[i];
      ds.scenarios.push_back(std::move(s));
    }
  }
  detail::assign_splits(ds.scenarios, faults, queries, cfg.reports_per_fault, cfg);
  return ds;
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const FaultSpec& f) {
  return json{{"category", to_string(f.category)},
              {"variant", f.variant},
              {"location", f.location},
              {"magnitude", f.magnitude},
              {"seed", f.seed}};
}

inline FaultSpec fault_from_json(const json& j) {
  FaultSpec f;
  f.category = category_from_string(j.at("category").get<std::string>());
  f.variant = j.value("variant", variants_of(f.category).front());
  f.location = j.at("location").get<std::string>();
  f.magnitude = j.value("magnitude", 0.5);
  f.seed = j.value("seed", std::uint64_t{0});
  return f;
}

inline json to_json(const Scenario& s) {
  json choices = json::object();
  for (const auto& [k, v] : s.report.choices) choices[k] = v;
  return json{{"id", s.id},
              {"app", s.app},
              {"fault", to_json(s.fault)},
              {"report", {{"text", s.report.text}, {"choices", choices}}},
              {"logs", telemetry::to_json(s.logs)},
              {"ground_truth_query", s.ground_truth_query},
              {"split", to_string(s.split)}};
}

inline Scenario scenario_from_json(const json& j) {
  try {
    Scenario s;
    s.id = j.at("id").get<std::string>();
    s.app = j.value("app", "");
    s.fault = fault_from_json(j.at("fault"));
    s.report.text = j.at("report").at("text").get<std::string>();
    const json choices = j.at("report").value("choices", json::object());
    for (const auto& [k, v] : choices.items()) s.report.choices[k] = v.get<bool>();
    s.logs = telemetry::store_from_json(j.at("logs"));
    s.ground_truth_query = j.value("ground_truth_query", "");
    s.split = split_from_string(j.value("split", "train"));
    return s;
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed scenario record: " + std::string(e.what()));
  }
}

inline json manifest(const Dataset& ds) {
  json counts = json::object();
  for (auto s : kAllSplits) counts[std::string(to_string(s))] = ds.split(s).size();
  return json{{"config", to_json(ds.config)},
              {"app", ds.topology.app},
              {"topology", {{"services", ds.topology.services.size()},
                            {"switches", ds.topology.switches.size()},
                            {"functions", ds.topology.functions.size()},
                            {"network_nodes", ds.topology.network_nodes()}}},
              {"scenarios", ds.scenarios.size()},
              {"splits", counts}};
}

// Dataset directory: scenarios.jsonl (one record per line) and manifest.json.
inline void write_dataset(const Dataset& ds, const std::string& dir) {
  std::ofstream out(dir + "/scenarios.jsonl", std::ios::binary);
  if (!out) throw InvalidArgument("io_error", "cannot write " + dir + "/scenarios.jsonl");
  for (const auto& s : ds.scenarios) out << to_json(s).dump() << '\n';
  std::ofstream man(dir + "/manifest.json", std::ios::binary);
  if (!man) throw InvalidArgument("io_error", "cannot write " + dir + "/manifest.json");
  man << manifest(ds).dump(2) << '\n';
}

inline Dataset read_dataset(const std::string& dir) {
  Dataset ds;
  std::ifstream man(dir + "/manifest.json", std::ios::binary);
  if (!man) throw NotFound("no dataset manifest at " + dir);
  try {
    const json m = json::parse(man);
    ds.config = dataset_config_from_json(m.at("config"));
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed manifest: " + std::string(e.what()));
  }
  ds.topology = build_topology(app_from_json(ds.config.app), ds.config.seed);
  std::ifstream in(dir + "/scenarios.jsonl", std::ios::binary);
  if (!in) throw NotFound("no scenarios.jsonl at " + dir);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      ds.scenarios.push_back(scenario_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InvalidArgument("malformed scenario line: " + std::string(e.what()));
    }
  }
  return ds;
}

}  // namespace qrank::faultlab
