#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "qrank/faultlab.hpp"

using namespace qrank;
using namespace qrank::faultlab;

namespace {

Topology shop() { return build_topology(sockshop_app(), 1); }

Workload small_workload() {
  Workload w;
  w.duration_s = 15;
  return w;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return xs.empty() ? 0 : s / xs.size();
}

double mean_packets(const TelemetryStore& s, const std::string& id) {
  for (const auto& sw : s.switches)
    if (sw.id == id) {
      std::vector<double> xs;
      for (const auto& x : sw.samples) xs.push_back(x.packet_count);
      return mean_of(xs);
    }
  return -1;
}

double mean_queue(const TelemetryStore& s, const std::string& id) {
  for (const auto& sw : s.switches)
    if (sw.id == id) {
      std::vector<double> xs;
      for (const auto& x : sw.samples) xs.push_back(x.queue_depth);
      return mean_of(xs);
    }
  return -1;
}

const telemetry::FunctionLog* fn_log(const TelemetryStore& s, const std::string& name) {
  for (const auto& f : s.functions)
    if (f.name == name) return &f;
  return nullptr;
}

std::vector<double> span_field(const telemetry::FunctionLog* f,
                               double telemetry::SpanRecord::*field) {
  std::vector<double> out;
  if (f)
    for (const auto& r : f->spans) out.push_back(r.*field);
  return out;
}

const telemetry::ContainerLog* container(const TelemetryStore& s, const std::string& id) {
  for (const auto& c : s.containers)
    if (c.id == id) return &c;
  return nullptr;
}

// Category-specific telemetry predicate that a fault must leave behind.
bool signature_holds(const Topology& t, const FaultSpec& f, const TelemetryStore& s) {
  switch (f.category) {
    case Category::ComponentFailure:
    case Category::NetworkMisconfiguration: {
      std::string sw = f.location;
      if (f.category == Category::ComponentFailure)
        sw = std::to_string(t.services[*t.service_by_container(f.location)].edge_switch);
      const double own = mean_packets(s, sw);
      for (const auto& x : s.switches)
        if (x.id != sw && mean_packets(s, x.id) <= own) return false;
      return true;
    }
    case Category::NetworkCongestion: {
      const double own = mean_queue(s, f.location);
      for (const auto& x : s.switches)
        if (x.id != f.location && mean_queue(s, x.id) >= own) return false;
      return true;
    }
    case Category::ResourceUnderprovisioning: {
      const auto* c = container(s, f.location);
      for (const auto& x : c->samples) {
        if (f.variant == "cpu" && x.cpu_util != 1.0) return false;
        if (f.variant == "memory" && x.mem_util < 0.94) return false;
      }
      for (const auto& other : s.containers)
        for (const auto& x : other.samples) {
          if (other.id == f.location) continue;
          if (f.variant == "cpu" && x.cpu_util >= 1.0) return false;
          if (f.variant == "memory" && x.mem_util >= 0.94) return false;
        }
      if (f.variant == "memory") {
        // Swap traffic makes the pressured host the busiest disk.
        auto mean_disk = [](const telemetry::ContainerLog& l) {
          double sum = 0;
          for (const auto& x : l.samples) sum += x.disk_throughput;
          return sum / double(l.samples.size());
        };
        for (const auto& other : s.containers)
          if (other.id != f.location && mean_disk(other) >= mean_disk(*c)) return false;
      }
      return true;
    }
    case Category::SourceCodeBug: {
      const auto* log = fn_log(s, f.location);
      if (!log) return false;
      if (f.variant == "negated_condition") {
        for (const auto& r : log->spans)
          if (r.variable_count > 1) return false;
        return true;
      }
      const double own = mean_of(span_field(log, &telemetry::SpanRecord::duration_ms));
      for (const auto& other : s.functions)
        if (other.name != f.location &&
            mean_of(span_field(&other, &telemetry::SpanRecord::duration_ms)) >= own)
          return false;
      return true;
    }
    case Category::SubsystemMisconfiguration:
    case Category::IncorrectDataExchange: {
      const auto* log = fn_log(s, f.location);
      if (!log) return false;
      const double own = mean_of(span_field(log, &telemetry::SpanRecord::exception_count));
      if (own <= 0) return false;
      for (const auto& other : s.functions)
        if (other.name != f.location &&
            mean_of(span_field(&other, &telemetry::SpanRecord::exception_count)) > own)
          return false;
      return true;
    }
  }
  return false;
}

}  // namespace

TEST(Topology, TwoServiceCounts) {
  AppSpec a;
  a.name = "two";
  a.services = {{"web", "app", {{"index", 0, 0, {{"get", 1.0}}}}},
                {"store", "db", {{"get", 0, 0, {}}}}};
  a.entries = {{"index", 1.0}};
  const auto t = build_topology(a, 3);
  EXPECT_EQ(t.services.size(), 2u);
  EXPECT_EQ(t.switches.size(), 4u);
  EXPECT_EQ(t.network_nodes(), 5u);
}

TEST(Topology, SockShopHas29NetworkNodes) {
  const auto t = shop();
  EXPECT_EQ(t.services.size(), 14u);
  EXPECT_EQ(t.network_nodes(), 29u);
  EXPECT_EQ(t.functions.size(), 28u);
  std::set<int> ids;
  for (const auto& s : t.switches) ids.insert(s.id);
  EXPECT_EQ(ids.size(), 28u);
}

TEST(Topology, Deterministic) {
  const auto a = shop();
  const auto b = shop();
  ASSERT_EQ(a.functions.size(), b.functions.size());
  for (std::size_t i = 0; i < a.functions.size(); ++i) {
    EXPECT_EQ(a.functions[i].base_ms, b.functions[i].base_ms);
    EXPECT_EQ(a.functions[i].variables, b.functions[i].variables);
  }
}

TEST(Topology, InvalidSpecs) {
  AppSpec one;
  one.services = {{"only", "app", {{"f", 0, 0, {}}}}};
  one.entries = {{"f", 1}};
  EXPECT_THROW(build_topology(one, 1), InvalidArgument);
  AppSpec unreachable;
  unreachable.services = {{"a", "app", {{"f", 0, 0, {}}}}, {"b", "app", {{"g", 0, 0, {}}}}};
  unreachable.entries = {{"f", 1}};
  EXPECT_THROW(build_topology(unreachable, 1), InvalidArgument);
  AppSpec bad_call = unreachable;
  bad_call.services[0].functions[0].calls = {{"nope", 1}};
  EXPECT_THROW(build_topology(bad_call, 1), InvalidArgument);
}

TEST(InjectFault, KindMismatchRejected) {
  const auto t = shop();
  FaultSpec f{Category::ResourceUnderprovisioning, "cpu", "3", 0.5, 1};
  EXPECT_THROW(inject_fault(t, f), InvalidArgument);
  FaultSpec g{Category::NetworkCongestion, "cpu", "3", 0.5, 1};
  EXPECT_THROW(inject_fault(t, g), InvalidArgument);
  FaultSpec h{Category::NetworkMisconfiguration, "firewall_drop", "4", 0.5, 1};  // agg switch
  EXPECT_THROW(inject_fault(t, h), InvalidArgument);
}

TEST(Simulate, ZeroRateMeansNoRequestTraffic) {
  const auto t = shop();
  Workload w = small_workload();
  w.request_rate = 0;
  const auto s = simulate(inject_fault(t, std::nullopt), w, 5);
  EXPECT_TRUE(s.functions.empty());
  for (const auto& sw : s.switches) {
    EXPECT_TRUE(sw.packets.empty());
    EXPECT_EQ(mean_packets(s, sw.id), 0.0);
  }
}

TEST(Simulate, DeterministicPerSeed) {
  const auto t = shop();
  const auto world = inject_fault(t, FaultSpec{Category::ComponentFailure, "container_down",
                                               "mn.h3", 0.5, 2});
  EXPECT_EQ(simulate(world, small_workload(), 9), simulate(world, small_workload(), 9));
  EXPECT_NE(simulate(world, small_workload(), 9), simulate(world, small_workload(), 10));
}

TEST(Simulate, NoFaultWorldWithinNominalRanges) {
  const auto t = shop();
  const auto s = simulate(inject_fault(t, std::nullopt), small_workload(), 4);
  for (const auto& c : s.containers)
    for (const auto& x : c.samples) {
      EXPECT_GT(x.cpu_util, 0.0);
      EXPECT_LT(x.cpu_util, 1.0);
      EXPECT_LT(x.mem_util, 0.94);
    }
  for (const auto& sw : s.switches) EXPECT_GT(mean_packets(s, sw.id), 0.0);
  for (const auto& sw : s.switches) EXPECT_LT(mean_queue(s, sw.id), 15.0);
}

TEST(Simulate, CongestionRaisesQueueDepth) {
  const auto t = shop();
  const auto base = simulate(inject_fault(t, std::nullopt), small_workload(), 8);
  const auto cong = simulate(
      inject_fault(t, FaultSpec{Category::NetworkCongestion, "cross_traffic", "7", 0.2, 1}),
      small_workload(), 8);
  EXPECT_GT(mean_queue(cong, "7"), mean_queue(base, "7"));
}

TEST(Simulate, FailureSilencesAttachedSwitch) {
  const auto t = shop();
  const auto s = simulate(
      inject_fault(t, FaultSpec{Category::ComponentFailure, "container_down", "mn.h4", 0.5, 1}),
      small_workload(), 8);
  EXPECT_EQ(mean_packets(s, "7"), 0.0);  // edge switch of the 4th service
  for (const auto& sw : s.switches)
    if (sw.id != "7") {
      EXPECT_GT(mean_packets(s, sw.id), 0.0);
    }
}

TEST(Simulate, PacketCapRespected) {
  const auto t = shop();
  Workload w = small_workload();
  w.packet_cap = 100;
  const auto s = simulate(inject_fault(t, std::nullopt), w, 2);
  std::size_t n = 0;
  double counted = 0;
  for (const auto& sw : s.switches) {
    n += sw.packets.size();
    for (const auto& x : sw.samples) counted += x.packet_count;
  }
  EXPECT_EQ(n, 100u);
  EXPECT_GT(counted, 100.0);
}

TEST(Simulate, SignaturesHoldForEveryCategoryAcrossSeeds) {
  const auto t = shop();
  Rng rng(17);
  for (auto cat : kAllCategories) {
    for (const auto& variant : variants_of(cat)) {
      const auto locs = candidate_locations(t, cat, variant);
      ASSERT_FALSE(locs.empty());
      for (int trial = 0; trial < 4; ++trial) {
        FaultSpec f{cat, variant, locs[uniform_index(rng, locs.size())], uniform01(rng), 1};
        const auto world = inject_fault(t, f);
        for (std::uint64_t seed : {11u, 12u}) {
          const auto s = simulate(world, Workload{}, seed + trial * 7);
          EXPECT_TRUE(signature_holds(t, f, s))
              << to_string(cat) << "/" << variant << " at " << f.location << " seed " << seed;
        }
      }
    }
  }
}

TEST(Report, DeterministicAndFlagged) {
  const FaultSpec f{Category::ComponentFailure, "container_down", "mn.h1", 0.5, 1};
  const auto a = synthesize_report(f, 42);
  EXPECT_EQ(a, synthesize_report(f, 42));
  EXPECT_FALSE(a.text.empty());
  int set = 0;
  for (const auto& [k, v] : a.choices) set += v;
  EXPECT_GE(set, 1);
}

TEST(Report, SymptomFollowsCategory) {
  const FaultSpec fail{Category::ComponentFailure, "container_down", "mn.h1", 0.5, 1};
  const FaultSpec cong{Category::NetworkCongestion, "cross_traffic", "3", 0.5, 1};
  int failure_ok = 0, congestion_ok = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto a = synthesize_report(fail, s);
    failure_ok += a.choices.at("missing_content") || a.choices.at("error_page");
    const auto b = synthesize_report(cong, s);
    congestion_ok += b.choices.at("slow_load");
  }
  EXPECT_EQ(failure_ok, 50);
  EXPECT_GE(congestion_ok, 40);
}

TEST(GroundTruth, MatchesCategoryTemplates) {
  const auto t = shop();
  EXPECT_EQ(dsl::render_query(ground_truth_query(
                FaultSpec{Category::NetworkMisconfiguration, "firewall_drop", "3", 0.5, 1}, t)),
            "stream = filter(T, switch==3); result = groupby(stream, [5-tuple], count);");
  EXPECT_EQ(dsl::render_query(ground_truth_query(
                FaultSpec{Category::ResourceUnderprovisioning, "cpu", "mn.h1", 0.5, 1}, t)),
            "SELECT * FROM cpu_usage WHERE host=\"mn.h1\"");
  EXPECT_EQ(dsl::render_query(ground_truth_query(
                FaultSpec{Category::SourceCodeBug, "negated_condition", "list_items", 0.5, 1}, t)),
            "SELECT span FROM spans WHERE name=\"list_items\"");
  EXPECT_EQ(dsl::render_query(ground_truth_query(
                FaultSpec{Category::ComponentFailure, "container_down", "mn.h2", 0.5, 1}, t)),
            "stream = filter(T, switch==3); result = groupby(stream, [5-tuple], count);");
}

TEST(GroundTruth, OneTemplatePerVariant) {
  const auto t = shop();
  for (auto cat : kAllCategories)
    for (const auto& variant : variants_of(cat)) {
      std::set<std::string> templates;
      for (const auto& loc : candidate_locations(t, cat, variant)) {
        const auto q = ground_truth_query(FaultSpec{cat, variant, loc, 0.5, 1}, t);
        auto [tpl, u] = dsl::extract_template(q);
        EXPECT_EQ(tpl.blanks.size(), 1u);
        EXPECT_EQ(dsl::fill_blanks(tpl, u), q);
        templates.insert(dsl::render_template(tpl));
      }
      EXPECT_EQ(templates.size(), 1u) << to_string(cat) << "/" << variant;
    }
}

TEST(Dataset, SplitCountsExact) {
  const auto c = split_counts(100, 0.53, 0.13);
  EXPECT_EQ(c.train, 53u);
  EXPECT_EQ(c.val, 13u);
  EXPECT_EQ(c.test, 34u);
}

TEST(Dataset, ApportionTableRatios) {
  const auto n = apportion(60, {kDefaultCategoryWeights.begin(), kDefaultCategoryWeights.end()});
  EXPECT_EQ(n, (std::vector<std::size_t>{6, 21, 4, 2, 7, 11, 9}));
}

class SmallDataset : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    DatasetConfig cfg;
    cfg.num_faults = 30;
    cfg.reports_per_fault = 4;
    cfg.workload.duration_s = 8;
    cfg.seed = 5;
    ds_ = new Dataset(generate_dataset(cfg));
  }
  static void TearDownTestSuite() { delete ds_; }
  static Dataset* ds_;
};
Dataset* SmallDataset::ds_ = nullptr;

TEST_F(SmallDataset, SplitsSound) {
  const auto& ds = *ds_;
  const auto counts = split_counts(ds.scenarios.size(), 0.53, 0.13);
  EXPECT_EQ(ds.split(Split::Train).size(), counts.train);
  EXPECT_EQ(ds.split(Split::Val).size(), counts.val);
  EXPECT_EQ(ds.split(Split::TestRepeat).size() + ds.split(Split::TestGeneralize).size(),
            counts.test);
  EXPECT_GT(ds.split(Split::TestGeneralize).size(), 0u);

  std::set<std::string> train_queries, train_templates, train_locations;
  for (const auto* s : ds.split(Split::Train)) {
    train_queries.insert(s->ground_truth_query);
    train_templates.insert(dsl::render_template(dsl::extract_template(s->ground_truth()).first));
    train_locations.insert(std::string(to_string(s->fault.category)) + "/" + s->fault.location);
  }
  for (const auto* s : ds.split(Split::TestRepeat))
    EXPECT_TRUE(train_queries.count(s->ground_truth_query)) << s->id;
  for (const auto* s : ds.split(Split::TestGeneralize)) {
    EXPECT_FALSE(train_queries.count(s->ground_truth_query)) << s->id;
    EXPECT_TRUE(train_templates.count(
        dsl::render_template(dsl::extract_template(s->ground_truth()).first)));
    EXPECT_FALSE(train_locations.count(std::string(to_string(s->fault.category)) + "/" +
                                       s->fault.location));
  }
  std::set<std::string> ids;
  for (const auto& s : ds.scenarios) EXPECT_TRUE(ids.insert(s.id).second);
}

TEST_F(SmallDataset, GroundTruthParses) {
  for (const auto& s : ds_->scenarios) {
    const auto q = s.ground_truth();
    EXPECT_EQ(dsl::render_query(q), s.ground_truth_query);
    EXPECT_EQ(dsl::render_query(ground_truth_query(s.fault, ds_->topology)), s.ground_truth_query);
  }
}

TEST_F(SmallDataset, JsonRoundTrip) {
  for (const auto& s : ds_->scenarios)
    EXPECT_EQ(scenario_from_json(json::parse(to_json(s).dump())), s);
}

TEST(Dataset, ByteIdenticalRegeneration) {
  DatasetConfig cfg;
  cfg.app = "mini";
  cfg.num_faults = 12;
  cfg.reports_per_fault = 3;
  cfg.workload.duration_s = 5;
  cfg.generalize_fraction = 0.3;
  std::string a, b;
  for (const auto& s : generate_dataset(cfg).scenarios) a += to_json(s).dump() + "\n";
  for (const auto& s : generate_dataset(cfg).scenarios) b += to_json(s).dump() + "\n";
  EXPECT_EQ(a, b);
  cfg.seed = 2;
  std::string c;
  for (const auto& s : generate_dataset(cfg).scenarios) c += to_json(s).dump() + "\n";
  EXPECT_NE(a, c);
}

TEST(Dataset, InfeasibleGeneralizeRejected) {
  DatasetConfig cfg;
  cfg.app = "mini";
  cfg.num_faults = 1;
  cfg.reports_per_fault = 10;
  cfg.workload.duration_s = 3;
  EXPECT_THROW(generate_dataset(cfg), InvalidArgument);
}
