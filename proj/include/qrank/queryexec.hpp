#pragma once

// Executes parsed debugging queries against a scenario's telemetry store.
// Network queries scan per-packet records, trace queries scan spans and
// resource queries scan container samples. Results come back as a table whose
// rows are sorted by the first column, then the next, and so on.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "qrank/common.hpp"
#include "qrank/dsl.hpp"
#include "qrank/telemetry.hpp"

namespace qrank::queryexec {

using nlohmann::json;

// Numbers sort before strings; variant ordering gives exactly that.
using Cell = std::variant<double, std::string>;
using Row = std::vector<Cell>;

struct ResultTable {
  std::vector<std::string> columns;
  std::vector<Row> rows;
  std::string query;     // canonical text of the executed query
  std::string scenario;  // empty when the store has no scenario id

  bool operator==(const ResultTable&) const = default;
};

inline json cell_to_json(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  const double v = std::get<double>(c);
  if (std::isfinite(v) && std::abs(v) < 9.0e15 && v == std::floor(v))
    return static_cast<std::int64_t>(v);
  return v;
}

inline std::string cell_text(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  return dsl::detail::format_number(std::get<double>(c));
}

inline json to_json(const ResultTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json row = json::array();
    for (const auto& c : r) row.push_back(cell_to_json(c));
    rows.push_back(std::move(row));
  }
  return {{"columns", t.columns},
          {"rows", std::move(rows)},
          {"provenance", {{"query", t.query}, {"scenario", t.scenario}}}};
}

inline ResultTable result_from_json(const json& j) {
  ResultTable t;
  t.columns = j.at("columns").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows")) {
    Row row;
    for (const auto& c : r) {
      if (c.is_string()) row.emplace_back(c.get<std::string>());
      else row.emplace_back(c.get<double>());
    }
    t.rows.push_back(std::move(row));
  }
  if (j.contains("provenance")) {
    t.query = j["provenance"].value("query", "");
    t.scenario = j["provenance"].value("scenario", "");
  }
  return t;
}

// Column-aligned rendering: header, dashed rule, one line per row, then a
// row count. Numbers are right-aligned, strings left-aligned.
inline std::string render_text(const ResultTable& t) {
  std::vector<std::size_t> width(t.columns.size());
  for (std::size_t c = 0; c < t.columns.size(); ++c) width[c] = t.columns[c].size();
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : t.rows) {
    std::vector<std::string> line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      line.push_back(cell_text(r[c]));
      width[c] = std::max(width[c], line.back().size());
    }
    cells.push_back(std::move(line));
  }
  auto pad = [](const std::string& s, std::size_t w, bool right) {
    const std::string fill(w - s.size(), ' ');
    return right ? fill + s : s + fill;
  };
  std::string out;
  auto emit = [&](const std::vector<std::string>& line, const Row* row) {
    std::string text;
    for (std::size_t c = 0; c < line.size(); ++c) {
      if (c) text += "  ";
      const bool right = row && std::holds_alternative<double>((*row)[c]);
      text += pad(line[c], width[c], right);
    }
    while (!text.empty() && text.back() == ' ') text.pop_back();
    out += text;
    out += '\n';
  };
  emit(t.columns, nullptr);
  std::vector<std::string> rule;
  for (auto w : width) rule.emplace_back(w, '-');
  emit(rule, nullptr);
  for (std::size_t i = 0; i < cells.size(); ++i) emit(cells[i], &t.rows[i]);
  out += "(" + std::to_string(t.rows.size()) + (t.rows.size() == 1 ? " row)\n" : " rows)\n");
  return out;
}

namespace detail {

using dsl::AstNode;
using dsl::NodeKind;

// A flat relation: named columns over rows of cells.
struct Relation {
  std::vector<std::string> columns;
  std::vector<Row> rows;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw InvalidArgument("unknown_column", "unknown column '" + name + "'");
  }
};

// Aliases accepted by the query dialects, mapped to the stored column.
inline std::string canonical_column(dsl::Dialect d, const std::string& name) {
  if (d == dsl::Dialect::Network) {
    if (name == "switch_id") return "switch";
    if (name == "queue_size") return "qdepth";
  }
  return name;
}

inline Cell id_cell(const std::string& id) {
  std::int64_t v = 0;
  if (parse_int(id, v)) return static_cast<double>(v);
  return id;
}

inline Relation packet_relation(const telemetry::TelemetryStore& store) {
  Relation r;
  r.columns = {"switch", "time", "srcip", "dstip", "srcport", "dstport", "proto", "qdepth"};
  for (const auto& sw : store.switches) {
    const Cell id = id_cell(sw.id);
    for (const auto& p : sw.packets) {
      r.rows.push_back({id, p.time, p.srcip, p.dstip, static_cast<double>(p.srcport),
                        static_cast<double>(p.dstport), static_cast<double>(p.proto),
                        p.qdepth});
    }
  }
  return r;
}

inline Relation span_relation(const telemetry::TelemetryStore& store) {
  Relation r;
  r.columns = {"name", "time", "duration_ms", "variable_count", "exception_count", "error"};
  for (const auto& f : store.functions)
    for (const auto& s : f.spans)
      r.rows.push_back({f.name, s.time, s.duration_ms, s.variable_count,
                        s.exception_count, s.error});
  return r;
}

inline Relation resource_relation(const telemetry::TelemetryStore& store,
                                  const std::string& table) {
  Relation r;
  r.columns = {"host", "time", "value"};
  for (const auto& c : store.containers) {
    for (const auto& s : c.samples) {
      double v = 0;
      if (table == "cpu_usage") v = s.cpu_util;
      else if (table == "mem_usage") v = s.mem_util;
      else if (table == "disk_io") v = s.disk_throughput;
      else throw InvalidArgument("malformed_query", "unknown table '" + table + "'");
      r.rows.push_back({c.id, s.time, v});
    }
  }
  return r;
}

inline Cell literal_cell(const AstNode& n) {
  switch (n.kind) {
    case NodeKind::StringLit: return n.text;
    case NodeKind::IntLit:
    case NodeKind::NumberLit: return std::stod(n.text);
    case NodeKind::Blank:
      throw InvalidArgument("malformed_query", "query has an unfilled blank");
    default:
      throw InvalidArgument("malformed_query", "expected a literal");
  }
}

inline bool compare(const Cell& a, dsl::CompareOp op, const Cell& b) {
  if (a.index() != b.index()) return false;
  switch (op) {
    case dsl::CompareOp::Eq: return a == b;
    case dsl::CompareOp::Ne: return a != b;
    case dsl::CompareOp::Lt: return a < b;
    case dsl::CompareOp::Le: return a <= b;
    case dsl::CompareOp::Gt: return a > b;
    case dsl::CompareOp::Ge: return a >= b;
  }
  return false;
}

// A compiled predicate: a conjunction of (column index, op, literal).
struct Term {
  std::size_t column;
  dsl::CompareOp op;
  Cell value;
};

inline void compile_predicate(const AstNode& n, dsl::Dialect d, const Relation& rel,
                              std::vector<Term>& out) {
  if (n.kind == NodeKind::And) {
    if (n.children.empty()) throw InvalidArgument("malformed_query", "empty conjunction");
    for (const auto& c : n.children) compile_predicate(c, d, rel, out);
    return;
  }
  if (n.kind != NodeKind::Compare || n.children.size() != 2 ||
      n.children[0].kind != NodeKind::Column)
    throw InvalidArgument("malformed_query", "malformed predicate");
  const std::string col = canonical_column(d, n.children[0].text);
  const std::size_t idx = rel.index_of(col);
  Cell lit = literal_cell(n.children[1]);
  if (std::holds_alternative<std::string>(lit) && col == "switch") lit = id_cell(std::get<std::string>(lit));
  out.push_back({idx, n.op, std::move(lit)});
}

inline Relation filter(const Relation& in, const std::vector<Term>& terms) {
  Relation out;
  out.columns = in.columns;
  for (const auto& row : in.rows) {
    bool keep = true;
    for (const auto& t : terms) {
      if (!compare(row[t.column], t.op, t.value)) {
        keep = false;
        break;
      }
    }
    if (keep) out.rows.push_back(row);
  }
  return out;
}

inline Relation group_by(const Relation& in, const AstNode& keys, const std::string& agg) {
  std::vector<std::size_t> key_idx;
  Relation out;
  for (const auto& k : keys.children) {
    if (k.kind != NodeKind::Key) throw InvalidArgument("malformed_query", "malformed groupby key");
    for (const auto& col : dsl::expand_key(k.text)) {
      const std::string c = canonical_column(dsl::Dialect::Network, col);
      key_idx.push_back(in.index_of(c));
      out.columns.push_back(col);
    }
  }
  if (key_idx.empty()) throw InvalidArgument("malformed_query", "groupby without keys");
  if (agg != "count" && agg != "max_qdepth" && agg != "avg_qdepth")
    throw InvalidArgument("malformed_query", "unknown aggregation '" + agg + "'");
  const std::size_t qd = agg == "count" ? 0 : in.index_of("qdepth");
  out.columns.push_back(agg);

  struct Acc {
    double count = 0, max = 0, sum = 0;
  };
  std::map<Row, Acc> groups;
  for (const auto& row : in.rows) {
    Row key;
    key.reserve(key_idx.size());
    for (auto i : key_idx) key.push_back(row[i]);
    auto& a = groups[key];
    const double q = agg == "count" ? 0.0 : std::get<double>(row[qd]);
    a.max = a.count == 0 ? q : std::max(a.max, q);
    a.sum += q;
    a.count += 1;
  }
  for (auto& [key, a] : groups) {
    Row row = key;
    if (agg == "count") row.emplace_back(a.count);
    else if (agg == "max_qdepth") row.emplace_back(a.max);
    else row.emplace_back(a.sum / a.count);
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline Relation project(const Relation& in, const std::vector<std::string>& names,
                        dsl::Dialect d) {
  Relation out;
  std::vector<std::size_t> idx;
  for (const auto& n : names) {
    if (n == "*" || (d == dsl::Dialect::Trace && n == "span")) {
      for (std::size_t i = 0; i < in.columns.size(); ++i) {
        idx.push_back(i);
        out.columns.push_back(in.columns[i]);
      }
      continue;
    }
    idx.push_back(in.index_of(canonical_column(d, n)));
    out.columns.push_back(n);
  }
  for (const auto& row : in.rows) {
    Row r;
    r.reserve(idx.size());
    for (auto i : idx) r.push_back(row[i]);
    out.rows.push_back(std::move(r));
  }
  return out;
}

inline void check_columns(dsl::Dialect d, const AstNode& n) {
  dsl::detail::preorder(n, [&](const AstNode& x) {
    if (x.kind != NodeKind::Column) return;
    const bool ok = dsl::find_column(d, x.text).has_value() ||
                    (d == dsl::Dialect::Trace && x.text == "span");
    if (!ok) throw InvalidArgument("unknown_column", "unknown column '" + x.text + "'");
  });
}

inline Relation run_select(const AstNode& sel, dsl::Dialect d,
                           const telemetry::TelemetryStore& store) {
  std::size_t i = 0;
  std::vector<std::string> names;
  for (; i < sel.children.size() && sel.children[i].kind != NodeKind::Table; ++i) {
    const auto& c = sel.children[i];
    if (c.kind != NodeKind::Column && c.kind != NodeKind::Star)
      throw InvalidArgument("malformed_query", "malformed projection");
    names.push_back(c.kind == NodeKind::Star ? "*" : c.text);
  }
  if (names.empty() || i >= sel.children.size())
    throw InvalidArgument("malformed_query", "SELECT needs columns and a table");
  const std::string& table = sel.children[i].text;
  Relation rel;
  switch (d) {
    case dsl::Dialect::Network:
      if (table != "T") throw InvalidArgument("malformed_query", "unknown table '" + table + "'");
      rel = packet_relation(store);
      break;
    case dsl::Dialect::Trace:
      if (table != "spans") throw InvalidArgument("malformed_query", "unknown table '" + table + "'");
      rel = span_relation(store);
      break;
    case dsl::Dialect::Resource:
      rel = resource_relation(store, table);
      break;
  }
  if (i + 1 < sel.children.size()) {
    if (i + 2 != sel.children.size())
      throw InvalidArgument("malformed_query", "trailing SELECT clauses");
    std::vector<Term> terms;
    compile_predicate(sel.children[i + 1], d, rel, terms);
    rel = filter(rel, terms);
  }
  return project(rel, names, d);
}

inline Relation run_program(const AstNode& prog, const telemetry::TelemetryStore& store) {
  if (prog.children.empty()) throw InvalidArgument("malformed_query", "empty program");
  std::map<std::string, Relation> streams;
  streams["T"] = packet_relation(store);
  const Relation* last = nullptr;
  for (const auto& assign : prog.children) {
    if (assign.kind != NodeKind::Assign || assign.children.size() != 1)
      throw InvalidArgument("malformed_query", "expected an assignment");
    const AstNode& op = assign.children[0];
    if (op.children.empty() || op.children[0].kind != NodeKind::Stream)
      throw InvalidArgument("malformed_query", "expected a source stream");
    auto src = streams.find(op.children[0].text);
    if (src == streams.end())
      throw InvalidArgument("malformed_query", "unknown stream '" + op.children[0].text + "'");
    Relation result;
    if (op.kind == NodeKind::Filter && op.children.size() == 2) {
      std::vector<Term> terms;
      compile_predicate(op.children[1], dsl::Dialect::Network, src->second, terms);
      result = filter(src->second, terms);
    } else if (op.kind == NodeKind::GroupBy && op.children.size() == 3 &&
               op.children[1].kind == NodeKind::KeyList &&
               op.children[2].kind == NodeKind::Aggregate) {
      result = group_by(src->second, op.children[1], op.children[2].text);
    } else {
      throw InvalidArgument("malformed_query", "expected filter or groupby");
    }
    streams[assign.text] = std::move(result);
    last = &streams[assign.text];
  }
  return *last;
}

}  // namespace detail

// Pure: the store is only read. Identifiers absent from the store simply
// match nothing.
inline ResultTable execute(const dsl::QueryAst& ast, const telemetry::TelemetryStore& store,
                           const std::string& scenario_id = "") {
  using dsl::NodeKind;
  detail::check_columns(ast.dialect, ast.root);
  detail::Relation rel;
  if (ast.root.kind == NodeKind::Program) {
    if (ast.dialect != dsl::Dialect::Network)
      throw InvalidArgument("malformed_query", "pipelines are network queries");
    rel = detail::run_program(ast.root, store);
  } else if (ast.root.kind == NodeKind::Select) {
    rel = detail::run_select(ast.root, ast.dialect, store);
  } else {
    throw InvalidArgument("malformed_query", "query root must be a program or SELECT");
  }
  std::sort(rel.rows.begin(), rel.rows.end());
  ResultTable t;
  t.columns = std::move(rel.columns);
  t.rows = std::move(rel.rows);
  t.query = dsl::render_query(ast);
  t.scenario = scenario_id;
  return t;
}

inline ResultTable execute(std::string_view text, const telemetry::TelemetryStore& store,
                           const std::string& scenario_id = "") {
  return execute(dsl::parse_query(text), store, scenario_id);
}

}  // namespace qrank::queryexec
