#pragma once

// Reference scan for the query executor. Queries are generated from a small
// structured description, rendered to text for the executor, and evaluated
// here by looping over the raw store records directly.

#include <algorithm>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrank/queryexec.hpp"

namespace qrank::testing::exec {

using queryexec::Cell;
using queryexec::Row;
using telemetry::TelemetryStore;

inline telemetry::PacketRecord packet(double t, std::string src, std::string dst, int sport,
                               int dport, double q = 0) {
  telemetry::PacketRecord p;
  p.time = t;
  p.srcip = std::move(src);
  p.dstip = std::move(dst);
  p.srcport = sport;
  p.dstport = dport;
  p.qdepth = q;
  return p;
}

struct Pred {
  std::string column;
  std::string op;
  Cell value;
};

struct Spec {
  enum Shape { Pipeline, Select } shape = Select;
  std::string table;
  std::vector<Pred> where;
  std::vector<Pred> where2;  // second filter stage, pipelines only
  bool group = false;
  std::vector<std::string> keys;
  std::string agg;
  std::vector<std::string> columns;
};

inline std::string literal_text(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return "\"" + *s + "\"";
  return dsl::detail::format_number(std::get<double>(c));
}

inline std::string render_preds(const std::vector<Pred>& ps, const std::string& conj) {
  std::string out;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (i) out += conj;
    out += ps[i].column + ps[i].op + literal_text(ps[i].value);
  }
  return out;
}

inline std::string render(const Spec& s) {
  if (s.shape == Spec::Pipeline) {
    std::string out;
    std::string src = "T";
    if (!s.where.empty()) {
      out += "a = filter(T, " + render_preds(s.where, " and ") + "); ";
      src = "a";
    }
    if (!s.where2.empty()) {
      out += "b = filter(" + src + ", " + render_preds(s.where2, " and ") + "); ";
      src = "b";
    }
    if (s.group) {
      out += "c = groupby(" + src + ", [";
      for (std::size_t i = 0; i < s.keys.size(); ++i) out += (i ? ", " : "") + s.keys[i];
      out += "], " + s.agg + ");";
    }
    return out;
  }
  std::string out = "SELECT ";
  for (std::size_t i = 0; i < s.columns.size(); ++i) out += (i ? ", " : "") + s.columns[i];
  out += " FROM " + s.table;
  if (!s.where.empty()) out += " WHERE " + render_preds(s.where, " AND ");
  return out;
}

inline bool holds(const Cell& v, const std::string& op, const Cell& lit) {
  if (v.index() != lit.index()) return false;
  if (op == "=" || op == "==") return v == lit;
  if (op == "!=") return v != lit;
  if (op == "<") return v < lit;
  if (op == "<=") return v <= lit;
  if (op == ">") return v > lit;
  return v >= lit;
}

using Getter = std::function<Cell(const std::string&)>;

inline bool all_hold(const std::vector<Pred>& ps, const Getter& get) {
  for (const auto& p : ps)
    if (!holds(get(p.column), p.op, p.value)) return false;
  return true;
}

inline std::vector<std::string> packet_cols() {
  return {"switch", "time", "srcip", "dstip", "srcport", "dstport", "proto", "qdepth"};
}

inline std::vector<Row> reference(const Spec& s, const TelemetryStore& st) {
  std::vector<Row> out;
  if (s.table == "T") {
    std::vector<std::pair<Getter, Row>> kept;
    for (const auto& sw : st.switches) {
      for (const auto& p : sw.packets) {
        Getter get = [&](const std::string& c) -> Cell {
          if (c == "switch" || c == "switch_id") return std::stod(sw.id);
          if (c == "time") return p.time;
          if (c == "srcip") return p.srcip;
          if (c == "dstip") return p.dstip;
          if (c == "srcport") return double(p.srcport);
          if (c == "dstport") return double(p.dstport);
          if (c == "proto") return double(p.proto);
          if (c == "qdepth" || c == "queue_size") return p.qdepth;
          throw std::logic_error("oracle: unknown packet column " + c);
        };
        if (!all_hold(s.where, get) || !all_hold(s.where2, get)) continue;
        if (s.shape == Spec::Pipeline && s.group) {
          Row key;
          for (const auto& k : s.keys) {
            if (k == "5-tuple") {
              for (auto c : {"srcip", "dstip", "srcport", "dstport", "proto"}) key.push_back(get(c));
            } else {
              key.push_back(get(k));
            }
          }
          kept.push_back({get, key});
        } else {
          Row r;
          auto cols = s.shape == Spec::Pipeline ? packet_cols() : s.columns;
          for (const auto& c : cols) {
            if (c == "*") {
              for (const auto& pc : packet_cols()) r.push_back(get(pc));
            } else {
              r.push_back(get(c));
            }
          }
          out.push_back(r);
        }
      }
    }
    if (s.shape == Spec::Pipeline && s.group) {
      // Quadratic grouping: compare every key against the groups seen so far.
      std::vector<Row> keys;
      std::vector<std::vector<double>> depths;
      for (auto& [get, key] : kept) {
        std::size_t g = 0;
        while (g < keys.size() && keys[g] != key) ++g;
        if (g == keys.size()) {
          keys.push_back(key);
          depths.emplace_back();
        }
        depths[g].push_back(std::get<double>(get("qdepth")));
      }
      for (std::size_t g = 0; g < keys.size(); ++g) {
        Row r = keys[g];
        const auto& d = depths[g];
        if (s.agg == "count") r.push_back(double(d.size()));
        else if (s.agg == "max_qdepth") r.push_back(*std::max_element(d.begin(), d.end()));
        else {
          double sum = 0;
          for (double x : d) sum += x;
          r.push_back(sum / double(d.size()));
        }
        out.push_back(r);
      }
    }
  } else if (s.table == "spans") {
    for (const auto& f : st.functions) {
      for (const auto& sp : f.spans) {
        Getter get = [&](const std::string& c) -> Cell {
          if (c == "name") return f.name;
          if (c == "time") return sp.time;
          if (c == "duration_ms") return sp.duration_ms;
          if (c == "variable_count") return sp.variable_count;
          if (c == "exception_count") return sp.exception_count;
          return sp.error;
        };
        if (!all_hold(s.where, get)) continue;
        Row r;
        for (const auto& c : s.columns) {
          if (c == "*" || c == "span") {
            for (auto x : {"name", "time", "duration_ms", "variable_count", "exception_count", "error"})
              r.push_back(get(x));
          } else {
            r.push_back(get(c));
          }
        }
        out.push_back(r);
      }
    }
  } else {
    for (const auto& c : st.containers) {
      for (const auto& smp : c.samples) {
        const double v = s.table == "cpu_usage" ? smp.cpu_util
                         : s.table == "mem_usage" ? smp.mem_util : smp.disk_throughput;
        Getter get = [&](const std::string& col) -> Cell {
          if (col == "host") return c.id;
          if (col == "time") return smp.time;
          return v;
        };
        if (!all_hold(s.where, get)) continue;
        Row r;
        for (const auto& col : s.columns) {
          if (col == "*") {
            for (auto x : {"host", "time", "value"}) r.push_back(get(x));
          } else {
            r.push_back(get(col));
          }
        }
        out.push_back(r);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

template <class T>
inline const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[uniform_index(rng, v.size())];
}

inline TelemetryStore random_store(Rng& rng) {
  TelemetryStore st;
  const std::vector<std::string> ips = {"10.0.0.1", "10.0.0.2", "10.0.0.3"};
  const int n_sw = static_cast<int>(uniform_index(rng, 4));
  for (int i = 0; i < n_sw; ++i) {
    telemetry::SwitchLog sw;
    sw.id = std::to_string(i + 1);
    const int n = static_cast<int>(uniform_index(rng, 12));
    for (int k = 0; k < n; ++k) {
      auto p = packet(double(uniform_index(rng, 6)), pick(rng, ips), pick(rng, ips),
                      5000 + int(uniform_index(rng, 2)), 80 + int(uniform_index(rng, 2)),
                      double(uniform_index(rng, 5)));
      p.proto = uniform_index(rng, 4) == 0 ? 17 : 6;
      sw.packets.push_back(p);
    }
    st.switches.push_back(sw);
  }
  const std::vector<std::string> names = {"GET_a", "GET_b", "POST_c"};
  const std::vector<std::string> errors = {"", "", "Timeout", "NullPointer"};
  for (std::size_t i = 0; i < uniform_index(rng, 4); ++i) {
    telemetry::FunctionLog f;
    f.name = names[i];
    for (std::size_t k = 0; k < uniform_index(rng, 8); ++k)
      f.spans.push_back({double(uniform_index(rng, 5)), double(uniform_index(rng, 4)),
                         double(uniform_index(rng, 50)), double(uniform_index(rng, 3)),
                         pick(rng, errors)});
    st.functions.push_back(f);
  }
  for (std::size_t i = 0; i < uniform_index(rng, 3); ++i) {
    telemetry::ContainerLog c;
    c.id = "host-" + std::to_string(i);
    for (std::size_t k = 0; k < uniform_index(rng, 6); ++k)
      c.samples.push_back({double(k), double(uniform_index(rng, 4)) / 4.0,
                           double(uniform_index(rng, 4)) / 4.0, double(uniform_index(rng, 3)) * 100});
    st.containers.push_back(c);
  }
  return st;
}

inline std::vector<Pred> random_preds(Rng& rng, const std::vector<std::pair<std::string, std::vector<Cell>>>& domain,
                               bool network) {
  const std::vector<std::string> eq_ops = network ? std::vector<std::string>{"==", "!="}
                                                  : std::vector<std::string>{"=", "!="};
  const std::vector<std::string> ord_ops = {"<", "<=", ">", ">="};
  std::vector<Pred> out;
  const std::size_t n = 1 + uniform_index(rng, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [col, values] = pick(rng, domain);
    const Cell v = pick(rng, values);
    std::string op = pick(rng, eq_ops);
    if (std::holds_alternative<double>(v) && uniform_index(rng, 2) == 0) op = pick(rng, ord_ops);
    out.push_back({col, op, v});
  }
  return out;
}

inline Spec random_spec(Rng& rng) {
  const std::vector<std::pair<std::string, std::vector<Cell>>> net = {
      {"switch", {1.0, 2.0, 3.0, 9.0}},
      {"srcip", {std::string("10.0.0.1"), std::string("10.0.0.3")}},
      {"dstport", {80.0, 81.0}},
      {"proto", {6.0, 17.0}},
      {"qdepth", {0.0, 2.0, 4.0}}};
  const std::vector<std::pair<std::string, std::vector<Cell>>> span = {
      {"name", {std::string("GET_a"), std::string("POST_c"), std::string("none")}},
      {"exception_count", {0.0, 1.0}},
      {"duration_ms", {10.0, 25.0}},
      {"error", {std::string(""), std::string("Timeout")}}};
  const std::vector<std::pair<std::string, std::vector<Cell>>> res = {
      {"host", {std::string("host-0"), std::string("host-1")}},
      {"value", {0.0, 0.5}},
      {"time", {2.0}}};
  Spec s;
  switch (uniform_index(rng, 4)) {
    case 0: {
      s.shape = Spec::Pipeline;
      s.table = "T";
      s.where = random_preds(rng, net, true);
      if (uniform_index(rng, 3) == 0) s.where2 = random_preds(rng, net, true);
      s.group = uniform_index(rng, 4) != 0;
      const std::vector<std::string> keys = {"switch", "srcip", "dstip", "5-tuple", "proto"};
      s.keys = {pick(rng, keys)};
      if (uniform_index(rng, 2) == 0) s.keys.push_back(pick(rng, keys));
      s.agg = pick(rng, std::vector<std::string>{"count", "max_qdepth", "avg_qdepth"});
      if (!s.group && s.where.empty()) s.group = true;
      break;
    }
    case 1: {
      s.table = "T";
      const std::vector<std::string> cols = {"*", "switch_id", "queue_size", "srcip", "time"};
      s.columns = {pick(rng, cols)};
      if (s.columns[0] != "*" && uniform_index(rng, 2)) s.columns.push_back("qdepth");
      if (uniform_index(rng, 3)) s.where = random_preds(rng, net, false);
      for (auto& p : s.where)
        if (p.op == "==") p.op = "=";
      break;
    }
    case 2: {
      s.table = "spans";
      const std::vector<std::string> cols = {"*", "span", "name", "error", "duration_ms"};
      s.columns = {pick(rng, cols)};
      if (s.columns[0] != "*" && uniform_index(rng, 2)) s.columns.push_back("exception_count");
      if (uniform_index(rng, 4)) s.where = random_preds(rng, span, false);
      break;
    }
    default: {
      s.table = pick(rng, std::vector<std::string>{"cpu_usage", "mem_usage", "disk_io"});
      s.columns = {pick(rng, std::vector<std::string>{"*", "host", "value"})};
      if (uniform_index(rng, 4)) s.where = random_preds(rng, res, false);
      break;
    }
  }
  return s;
}


}  // namespace qrank::testing::exec
