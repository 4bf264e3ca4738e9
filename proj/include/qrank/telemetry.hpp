#pragma once

// Raw per-subsystem telemetry and its two model-facing forms: per-subsystem
// summary features with within-kind ranks, and the rank-ordered log vector in
// which subsystem identities are replaced by order statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "qrank/common.hpp"

namespace qrank::telemetry {

using nlohmann::json;

enum class SubsystemKind { Switch, Function, Container };
inline constexpr std::array<SubsystemKind, 3> kAllKinds = {
    SubsystemKind::Switch, SubsystemKind::Function, SubsystemKind::Container};

inline std::string_view to_string(SubsystemKind k) {
  switch (k) {
    case SubsystemKind::Switch: return "switch";
    case SubsystemKind::Function: return "function";
    case SubsystemKind::Container: return "container";
  }
  return "switch";
}

struct PacketRecord {
  double time = 0;
  std::string srcip;
  std::string dstip;
  std::int64_t srcport = 0;
  std::int64_t dstport = 0;
  std::int64_t proto = 6;
  double qdepth = 0;  // packets queued ahead of this packet
  bool operator==(const PacketRecord&) const = default;
};

struct SwitchSample {
  double time = 0;
  double queue_depth = 0;   // packets
  double packet_count = 0;  // packets in the interval
  bool operator==(const SwitchSample&) const = default;
};

struct SwitchLog {
  std::string id;
  std::vector<SwitchSample> samples;
  std::vector<PacketRecord> packets;
  bool operator==(const SwitchLog&) const = default;
};

struct SpanRecord {
  double time = 0;
  double variable_count = 0;
  double duration_ms = 0;
  double exception_count = 0;
  std::string error;  // empty when the span succeeded
  bool operator==(const SpanRecord&) const = default;
};

struct FunctionLog {
  std::string name;
  std::vector<SpanRecord> spans;
  bool operator==(const FunctionLog&) const = default;
};

struct ContainerSample {
  double time = 0;
  double cpu_util = 0;         // fraction of quota, [0, 1]
  double mem_util = 0;         // fraction of limit, [0, 1]
  double disk_throughput = 0;  // bytes/s
  bool operator==(const ContainerSample&) const = default;
};

struct ContainerLog {
  std::string id;
  std::vector<ContainerSample> samples;
  bool operator==(const ContainerLog&) const = default;
};

struct TelemetryStore {
  std::vector<SwitchLog> switches;
  std::vector<FunctionLog> functions;
  std::vector<ContainerLog> containers;

  bool empty() const {
    return switches.empty() && functions.empty() && containers.empty();
  }
  bool operator==(const TelemetryStore&) const = default;
};

// ---------------------------------------------------------------------------
// Metric and statistic registry. Feature order everywhere is metric-major in
// the order below, then statistic in kStatistics order.

struct MetricDef {
  std::string_view name;
  SubsystemKind kind;
};

inline constexpr std::array<MetricDef, 8> kMetrics = {{
    {"queue_depth", SubsystemKind::Switch},
    {"packet_count", SubsystemKind::Switch},
    {"variable_count", SubsystemKind::Function},
    {"duration_ms", SubsystemKind::Function},
    {"exception_count", SubsystemKind::Function},
    {"cpu_util", SubsystemKind::Container},
    {"mem_util", SubsystemKind::Container},
    {"disk_throughput", SubsystemKind::Container},
}};

enum class Statistic { Min, Max, Mean, Median, Stdev };
inline constexpr std::array<Statistic, 5> kStatistics = {
    Statistic::Min, Statistic::Max, Statistic::Mean, Statistic::Median,
    Statistic::Stdev};
inline constexpr std::array<std::string_view, 5> kStatisticNames = {
    "min", "max", "mean", "median", "stdev"};

inline std::size_t metric_index(std::string_view name) {
  for (std::size_t i = 0; i < kMetrics.size(); ++i)
    if (kMetrics[i].name == name) return i;
  throw InvalidArgument("unknown metric '" + std::string(name) + "'");
}

inline std::vector<std::size_t> metrics_of(SubsystemKind k) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < kMetrics.size(); ++i)
    if (kMetrics[i].kind == k) out.push_back(i);
  return out;
}

struct SummaryStats {
  double min = 0, max = 0, mean = 0, median = 0, stdev = 0;
  double get(Statistic s) const {
    switch (s) {
      case Statistic::Min: return min;
      case Statistic::Max: return max;
      case Statistic::Mean: return mean;
      case Statistic::Median: return median;
      case Statistic::Stdev: return stdev;
    }
    return 0;
  }
};

// Population standard deviation; median of an even-length series is the mean
// of the two middle values.
inline SummaryStats summarize(std::vector<double> xs) {
  SummaryStats s;
  if (xs.empty()) return s;
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  s.min = xs.front();
  s.max = xs.back();
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / n;
  const std::size_t mid = xs.size() / 2;
  s.median = xs.size() % 2 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
  double ss = 0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.stdev = std::sqrt(ss / n);
  return s;
}

struct SubsystemFeatures {
  std::string id;
  SubsystemKind kind = SubsystemKind::Switch;
  bool absent = false;
  // metrics_of(kind).size() * 5 values, metric-major.
  std::vector<double> features;
  // Rank of each feature among present subsystems of the same kind, scaled to
  // [0, 1]; 0 is the largest value, ties go to the smaller id first.
  std::vector<double> ranks;
  // As ranks, but tied values all take the rank of the first of them, so the
  // value does not depend on how subsystems are named.
  std::vector<double> shared_ranks;
};

namespace detail {

inline std::vector<std::vector<double>> metric_series(const SwitchLog& s) {
  std::vector<std::vector<double>> out(2);
  for (const auto& x : s.samples) {
    out[0].push_back(x.queue_depth);
    out[1].push_back(x.packet_count);
  }
  return out;
}

inline std::vector<std::vector<double>> metric_series(const FunctionLog& f) {
  std::vector<std::vector<double>> out(3);
  for (const auto& x : f.spans) {
    out[0].push_back(x.variable_count);
    out[1].push_back(x.duration_ms);
    out[2].push_back(x.exception_count);
  }
  return out;
}

inline std::vector<std::vector<double>> metric_series(const ContainerLog& c) {
  std::vector<std::vector<double>> out(3);
  for (const auto& x : c.samples) {
    out[0].push_back(x.cpu_util);
    out[1].push_back(x.mem_util);
    out[2].push_back(x.disk_throughput);
  }
  return out;
}

template <typename Log>
SubsystemFeatures featurize_one(const Log& log, const std::string& id,
                                SubsystemKind kind) {
  SubsystemFeatures f;
  f.id = id;
  f.kind = kind;
  auto series = metric_series(log);
  f.absent = series.front().empty();
  for (auto& xs : series) {
    const SummaryStats s = summarize(std::move(xs));
    for (auto st : kStatistics) f.features.push_back(s.get(st));
  }
  f.ranks.assign(f.features.size(), 1.0);
  f.shared_ranks = f.ranks;
  return f;
}

// Descending by value, ascending id on ties.
inline std::vector<std::size_t> order_desc(
    const std::vector<const SubsystemFeatures*>& subs, std::size_t feature) {
  std::vector<std::size_t> idx(subs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double va = subs[a]->features[feature];
    const double vb = subs[b]->features[feature];
    if (va != vb) return va > vb;
    return id_less(subs[a]->id, subs[b]->id);
  });
  return idx;
}

inline void assign_ranks(std::vector<SubsystemFeatures>& all, SubsystemKind kind) {
  std::vector<const SubsystemFeatures*> present;
  std::vector<SubsystemFeatures*> mut;
  for (auto& f : all) {
    if (f.kind == kind && !f.absent) {
      present.push_back(&f);
      mut.push_back(&f);
    }
  }
  if (present.empty()) return;
  const std::size_t width = present.front()->features.size();
  const double denom = present.size() > 1 ? double(present.size() - 1) : 1.0;
  for (std::size_t j = 0; j < width; ++j) {
    const auto order = order_desc(present, j);
    std::size_t first = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (r > 0 && present[order[r]]->features[j] != present[order[r - 1]]->features[j]) first = r;
      mut[order[r]]->ranks[j] = present.size() > 1 ? double(r) / denom : 0.0;
      mut[order[r]]->shared_ranks[j] = present.size() > 1 ? double(first) / denom : 0.0;
    }
  }
}

}  // namespace detail

// One SubsystemFeatures per subsystem, grouped by kind (switch, function,
// container) and ascending id within a kind.
inline std::vector<SubsystemFeatures> featurize(const TelemetryStore& store) {
  if (store.empty()) throw InvalidArgument("telemetry store is empty");
  std::vector<SubsystemFeatures> out;
  auto add_sorted = [&](auto const& logs, auto id_of, SubsystemKind kind) {
    std::vector<SubsystemFeatures> group;
    for (const auto& l : logs) group.push_back(detail::featurize_one(l, id_of(l), kind));
    std::stable_sort(group.begin(), group.end(), [](const auto& a, const auto& b) {
      return id_less(a.id, b.id);
    });
    for (auto& g : group) out.push_back(std::move(g));
  };
  add_sorted(store.switches, [](const SwitchLog& s) { return s.id; },
             SubsystemKind::Switch);
  add_sorted(store.functions, [](const FunctionLog& f) { return f.name; },
             SubsystemKind::Function);
  add_sorted(store.containers, [](const ContainerLog& c) { return c.id; },
             SubsystemKind::Container);
  for (auto k : kAllKinds) detail::assign_ranks(out, k);
  return out;
}

// ---------------------------------------------------------------------------
// Log vector

struct LayoutEntry {
  std::size_t metric = 0;  // index into kMetrics
  std::size_t stat = 0;    // index into kStatistics
  std::size_t slots = 0;
  bool operator==(const LayoutEntry&) const = default;
};

struct LogLayout {
  std::vector<LayoutEntry> entries;
  // false: segments keep ascending-id order instead of descending-value order.
  bool rank_order = true;

  std::size_t width() const {
    std::size_t w = 0;
    for (const auto& e : entries) w += e.slots;
    return w;
  }
  bool has_metric(std::size_t m) const {
    return std::any_of(entries.begin(), entries.end(),
                       [&](const LayoutEntry& e) { return e.metric == m; });
  }
  bool operator==(const LogLayout&) const = default;
};

struct SlotCounts {
  std::size_t switches = 0;
  std::size_t functions = 0;
  std::size_t containers = 0;
  std::size_t of(SubsystemKind k) const {
    switch (k) {
      case SubsystemKind::Switch: return switches;
      case SubsystemKind::Function: return functions;
      case SubsystemKind::Container: return containers;
    }
    return 0;
  }
};

// Every (metric, statistic) pair in registry order, minus dropped metrics.
inline LogLayout make_layout(const SlotCounts& slots,
                             const std::vector<std::string>& dropped_metrics = {},
                             bool rank_order = true) {
  LogLayout layout;
  layout.rank_order = rank_order;
  for (std::size_t m = 0; m < kMetrics.size(); ++m) {
    if (std::find(dropped_metrics.begin(), dropped_metrics.end(),
                  kMetrics[m].name) != dropped_metrics.end())
      continue;
    for (std::size_t s = 0; s < kStatistics.size(); ++s)
      layout.entries.push_back({m, s, slots.of(kMetrics[m].kind)});
  }
  return layout;
}

struct LogVector {
  std::vector<double> values;
  // 0 marks a padding slot (fewer subsystems than slots).
  std::vector<unsigned char> present;
  bool operator==(const LogVector&) const = default;
};

// Position of metric m's statistic s inside a SubsystemFeatures vector.
inline std::size_t feature_offset(std::size_t metric, std::size_t stat) {
  const auto kind_metrics = metrics_of(kMetrics[metric].kind);
  const auto pos = static_cast<std::size_t>(
      std::find(kind_metrics.begin(), kind_metrics.end(), metric) -
      kind_metrics.begin());
  return pos * kStatistics.size() + stat;
}

inline LogVector build_log_vector(const std::vector<SubsystemFeatures>& features,
                                  const LogLayout& layout) {
  LogVector v;
  v.values.reserve(layout.width());
  v.present.reserve(layout.width());
  for (const auto& e : layout.entries) {
    const SubsystemKind kind = kMetrics[e.metric].kind;
    const std::size_t off = feature_offset(e.metric, e.stat);
    std::vector<const SubsystemFeatures*> subs;
    for (const auto& f : features)
      if (f.kind == kind && !f.absent) subs.push_back(&f);
    std::vector<double> seg;
    if (layout.rank_order) {
      for (std::size_t i : detail::order_desc(subs, off))
        seg.push_back(subs[i]->features[off]);
    } else {
      std::stable_sort(subs.begin(), subs.end(), [](auto* a, auto* b) {
        return id_less(a->id, b->id);
      });
      for (auto* s : subs) seg.push_back(s->features[off]);
    }
    for (std::size_t i = 0; i < e.slots; ++i) {
      if (i < seg.size()) {
        v.values.push_back(seg[i]);
        v.present.push_back(1);
      } else {
        v.values.push_back(0.0);
        v.present.push_back(0);
      }
    }
  }
  return v;
}

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stdev;
  bool empty() const { return mean.empty(); }
};

inline NormalizationStats compute_normalization(const std::vector<LogVector>& training) {
  NormalizationStats st;
  if (training.empty()) return st;
  const std::size_t w = training.front().values.size();
  st.mean.assign(w, 0.0);
  st.stdev.assign(w, 0.0);
  std::vector<double> count(w, 0.0);
  for (const auto& v : training)
    for (std::size_t i = 0; i < w; ++i)
      if (v.present[i]) {
        st.mean[i] += v.values[i];
        count[i] += 1;
      }
  for (std::size_t i = 0; i < w; ++i)
    if (count[i] > 0) st.mean[i] /= count[i];
  for (const auto& v : training)
    for (std::size_t i = 0; i < w; ++i)
      if (v.present[i]) st.stdev[i] += (v.values[i] - st.mean[i]) * (v.values[i] - st.mean[i]);
  for (std::size_t i = 0; i < w; ++i)
    st.stdev[i] = count[i] > 0 ? std::sqrt(st.stdev[i] / count[i]) : 0.0;
  return st;
}

// z-score per coordinate; padding and zero-variance coordinates map to 0.
inline LogVector normalize(const LogVector& v, const NormalizationStats& stats) {
  if (stats.empty()) throw InvalidArgument("normalization statistics missing");
  if (stats.mean.size() != v.values.size())
    throw InvalidArgument("normalization statistics do not match vector width");
  LogVector out = v;
  for (std::size_t i = 0; i < v.values.size(); ++i) {
    if (!v.present[i] || stats.stdev[i] <= 0.0) {
      out.values[i] = 0.0;
    } else {
      out.values[i] = (v.values[i] - stats.mean[i]) / stats.stdev[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON form used inside dataset records:
//   {switches:[{id, samples:[[t,q,c]..], packets:[[t,src,dst,sport,dport,proto,q]..]}],
//    spans:[{function, records:[[t,vars,dur_ms,exc,"error"]..]}],
//    containers:[{id, samples:[[t,cpu,mem,disk]..]}]}

inline json to_json(const TelemetryStore& s) {
  json sw = json::array();
  for (const auto& x : s.switches) {
    json samples = json::array();
    for (const auto& p : x.samples)
      samples.push_back({p.time, p.queue_depth, p.packet_count});
    json packets = json::array();
    for (const auto& p : x.packets)
      packets.push_back({p.time, p.srcip, p.dstip, p.srcport, p.dstport, p.proto, p.qdepth});
    sw.push_back({{"id", x.id}, {"samples", samples}, {"packets", packets}});
  }
  json spans = json::array();
  for (const auto& f : s.functions) {
    json recs = json::array();
    for (const auto& r : f.spans)
      recs.push_back({r.time, r.variable_count, r.duration_ms, r.exception_count, r.error});
    spans.push_back({{"function", f.name}, {"records", recs}});
  }
  json cs = json::array();
  for (const auto& c : s.containers) {
    json samples = json::array();
    for (const auto& p : c.samples)
      samples.push_back({p.time, p.cpu_util, p.mem_util, p.disk_throughput});
    cs.push_back({{"id", c.id}, {"samples", samples}});
  }
  return json{{"switches", sw}, {"spans", spans}, {"containers", cs}};
}

inline TelemetryStore store_from_json(const json& j) {
  TelemetryStore s;
  try {
    for (const auto& x : j.value("switches", json::array())) {
      SwitchLog l;
      l.id = x.at("id").get<std::string>();
      for (const auto& p : x.value("samples", json::array()))
        l.samples.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
      for (const auto& p : x.value("packets", json::array()))
        l.packets.push_back({p.at(0).get<double>(), p.at(1).get<std::string>(),
                             p.at(2).get<std::string>(), p.at(3).get<std::int64_t>(),
                             p.at(4).get<std::int64_t>(), p.at(5).get<std::int64_t>(),
                             p.at(6).get<double>()});
      s.switches.push_back(std::move(l));
    }
    for (const auto& f : j.value("spans", json::array())) {
      FunctionLog l;
      l.name = f.at("function").get<std::string>();
      for (const auto& r : f.value("records", json::array()))
        l.spans.push_back({r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(),
                           r.at(3).get<double>(), r.at(4).get<std::string>()});
      s.functions.push_back(std::move(l));
    }
    for (const auto& c : j.value("containers", json::array())) {
      ContainerLog l;
      l.id = c.at("id").get<std::string>();
      for (const auto& p : c.value("samples", json::array()))
        l.samples.push_back({p.at(0).get<double>(), p.at(1).get<double>(),
                             p.at(2).get<double>(), p.at(3).get<double>()});
      s.containers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed telemetry: " + std::string(e.what()));
  }
  return s;
}

}  // namespace qrank::telemetry
