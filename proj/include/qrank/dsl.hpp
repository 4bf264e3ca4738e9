#pragma once

// Debugging query dialects: a Marple-like switch pipeline language ("network"),
// a span query language ("trace") and a container-metric language
// ("resource"). Queries parse into a typed AST, render back to one canonical
// text form, and split into templates (parameter literals replaced by blanks)
// that become graphs for the template encoder.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qrank/common.hpp"

namespace qrank::dsl {

enum class Dialect { Network, Trace, Resource };

inline constexpr std::array<Dialect, 3> kAllDialects = {
    Dialect::Network, Dialect::Trace, Dialect::Resource};

inline std::string_view to_string(Dialect d) {
  switch (d) {
    case Dialect::Network: return "network";
    case Dialect::Trace: return "trace";
    case Dialect::Resource: return "resource";
  }
  return "network";
}

inline Dialect dialect_from_string(std::string_view s) {
  if (s == "network") return Dialect::Network;
  if (s == "trace") return Dialect::Trace;
  if (s == "resource") return Dialect::Resource;
  throw InvalidArgument("unknown dialect '" + std::string(s) + "'");
}

// Kind of subsystem a parameter position names. The dialect fixes it:
// network queries take switch ids, trace queries function names, resource
// queries container hosts.
enum class ParamKind { None, Switch, Function, Host };

inline std::string_view to_string(ParamKind k) {
  switch (k) {
    case ParamKind::None: return "none";
    case ParamKind::Switch: return "switch";
    case ParamKind::Function: return "function";
    case ParamKind::Host: return "host";
  }
  return "none";
}

inline ParamKind param_kind_from_string(std::string_view s) {
  if (s == "switch") return ParamKind::Switch;
  if (s == "function") return ParamKind::Function;
  if (s == "host") return ParamKind::Host;
  if (s == "none") return ParamKind::None;
  throw InvalidArgument("unknown parameter kind '" + std::string(s) + "'");
}

inline ParamKind subsystem_kind(Dialect d) {
  switch (d) {
    case Dialect::Network: return ParamKind::Switch;
    case Dialect::Trace: return ParamKind::Function;
    case Dialect::Resource: return ParamKind::Host;
  }
  return ParamKind::None;
}

enum class NodeKind {
  Program,
  Assign,
  Filter,
  GroupBy,
  Stream,
  KeyList,
  Key,
  Aggregate,
  Select,
  Column,
  Star,
  Table,
  And,
  Compare,
  StringLit,
  IntLit,
  NumberLit,
  Blank,
};
inline constexpr int kNodeKindCount = 18;

enum class CompareOp { Eq, Ne, Lt, Le, Gt, Ge };

struct AstNode {
  NodeKind kind = NodeKind::Program;
  // Identifier, literal value, assignment target or aggregate name.
  std::string text;
  CompareOp op = CompareOp::Eq;
  // Set on literals and blanks that sit in a subsystem-identifier position.
  ParamKind param = ParamKind::None;
  std::vector<AstNode> children;

  bool operator==(const AstNode&) const = default;
};

inline bool is_literal(NodeKind k) {
  return k == NodeKind::StringLit || k == NodeKind::IntLit ||
         k == NodeKind::NumberLit;
}

struct QueryAst {
  Dialect dialect = Dialect::Network;
  AstNode root;
  bool operator==(const QueryAst&) const = default;
};

struct QueryTemplate {
  Dialect dialect = Dialect::Network;
  AstNode root;
  // Blank kinds in pre-order (left-to-right) AST order; blank b_i is blanks[i-1].
  std::vector<ParamKind> blanks;
  bool operator==(const QueryTemplate&) const = default;
};

struct ParamAssignment {
  std::vector<std::string> values;
  bool operator==(const ParamAssignment&) const = default;
};

// ---------------------------------------------------------------------------
// Per-dialect vocabulary.

enum class ValueType { Number, String };

struct ColumnInfo {
  std::string_view name;
  ValueType type;
  ParamKind param;
};

namespace detail {

inline constexpr std::array<ColumnInfo, 10> kNetworkColumns = {{
    {"switch", ValueType::Number, ParamKind::Switch},
    {"switch_id", ValueType::Number, ParamKind::Switch},
    {"qdepth", ValueType::Number, ParamKind::None},
    {"queue_size", ValueType::Number, ParamKind::None},
    {"srcip", ValueType::String, ParamKind::None},
    {"dstip", ValueType::String, ParamKind::None},
    {"srcport", ValueType::Number, ParamKind::None},
    {"dstport", ValueType::Number, ParamKind::None},
    {"proto", ValueType::Number, ParamKind::None},
    {"time", ValueType::Number, ParamKind::None},
}};

inline constexpr std::array<ColumnInfo, 6> kTraceColumns = {{
    {"name", ValueType::String, ParamKind::Function},
    {"time", ValueType::Number, ParamKind::None},
    {"duration_ms", ValueType::Number, ParamKind::None},
    {"variable_count", ValueType::Number, ParamKind::None},
    {"exception_count", ValueType::Number, ParamKind::None},
    {"error", ValueType::String, ParamKind::None},
}};

inline constexpr std::array<ColumnInfo, 3> kResourceColumns = {{
    {"host", ValueType::String, ParamKind::Host},
    {"time", ValueType::Number, ParamKind::None},
    {"value", ValueType::Number, ParamKind::None},
}};

inline constexpr std::array<std::string_view, 3> kNetworkAggregates = {
    "count", "max_qdepth", "avg_qdepth"};
inline constexpr std::string_view kFiveTuple = "5-tuple";
inline constexpr std::array<std::string_view, 3> kResourceTables = {
    "cpu_usage", "mem_usage", "disk_io"};

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace detail

inline std::optional<ColumnInfo> find_column(Dialect d, std::string_view name) {
  auto search = [&](const auto& cols) -> std::optional<ColumnInfo> {
    for (const auto& c : cols)
      if (c.name == name) return c;
    return std::nullopt;
  };
  switch (d) {
    case Dialect::Network: return search(detail::kNetworkColumns);
    case Dialect::Trace: return search(detail::kTraceColumns);
    case Dialect::Resource: return search(detail::kResourceColumns);
  }
  return std::nullopt;
}

inline std::vector<std::string_view> dialect_tables(Dialect d) {
  switch (d) {
    case Dialect::Network: return {"T"};
    case Dialect::Trace: return {"spans"};
    case Dialect::Resource:
      return {detail::kResourceTables.begin(), detail::kResourceTables.end()};
  }
  return {};
}

// Expands a groupby key into concrete packet columns.
inline std::vector<std::string> expand_key(std::string_view key) {
  if (key == detail::kFiveTuple)
    return {"srcip", "dstip", "srcport", "dstport", "proto"};
  return {std::string(key)};
}

// ---------------------------------------------------------------------------
// Lexer

namespace detail {

enum class Tok {
  Ident,
  String,
  Number,
  Blank,
  Op,
  LParen,
  RParen,
  LBracket,
  RBracket,
  Comma,
  Semicolon,
  Star,
  End,
};

struct Token {
  Tok type = Tok::End;
  std::string text;
  int line = 1;
  int column = 1;
};

inline bool ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
}
inline bool ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

inline std::vector<Token> tokenize(std::string_view src) {
  std::vector<Token> out;
  int line = 1;
  int col = 1;
  std::size_t i = 0;
  auto advance = [&](std::size_t n) {
    for (std::size_t k = 0; k < n && i < src.size(); ++k, ++i) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
  };
  while (i < src.size()) {
    const char c = src[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(1);
      continue;
    }
    Token t;
    t.line = line;
    t.column = col;
    if (src.substr(i, kFiveTuple.size()) == kFiveTuple) {
      t.type = Tok::Ident;
      t.text = std::string(kFiveTuple);
      advance(kFiveTuple.size());
    } else if (c == '_' && (i + 1 >= src.size() || !ident_char(src[i + 1]))) {
      t.type = Tok::Blank;
      t.text = "_";
      advance(1);
    } else if (ident_start(c)) {
      std::size_t j = i;
      while (j < src.size() && ident_char(src[j])) ++j;
      t.type = Tok::Ident;
      t.text = std::string(src.substr(i, j - i));
      advance(j - i);
    } else if (std::isdigit(static_cast<unsigned char>(c)) ||
               (c == '-' && i + 1 < src.size() &&
                std::isdigit(static_cast<unsigned char>(src[i + 1])) &&
                !out.empty() && out.back().type == Tok::Op)) {
      std::size_t j = i + 1;
      bool dot = false;
      while (j < src.size() &&
             (std::isdigit(static_cast<unsigned char>(src[j])) ||
              (src[j] == '.' && !dot))) {
        if (src[j] == '.') dot = true;
        ++j;
      }
      t.type = Tok::Number;
      t.text = std::string(src.substr(i, j - i));
      advance(j - i);
    } else if (c == '"') {
      std::string value;
      std::size_t j = i + 1;
      bool closed = false;
      while (j < src.size()) {
        if (src[j] == '\\' && j + 1 < src.size()) {
          value.push_back(src[j + 1]);
          j += 2;
          continue;
        }
        if (src[j] == '"') {
          closed = true;
          break;
        }
        if (src[j] == '\n') break;
        value.push_back(src[j]);
        ++j;
      }
      if (!closed) throw ParseError("unterminated string literal", line, col);
      t.type = Tok::String;
      t.text = std::move(value);
      advance(j + 1 - i);
    } else {
      auto two = src.substr(i, 2);
      if (two == "==" || two == "!=" || two == "<=" || two == ">=") {
        t.type = Tok::Op;
        t.text = std::string(two);
        advance(2);
      } else {
        switch (c) {
          case '=':
          case '<':
          case '>':
            t.type = Tok::Op;
            break;
          case '(': t.type = Tok::LParen; break;
          case ')': t.type = Tok::RParen; break;
          case '[': t.type = Tok::LBracket; break;
          case ']': t.type = Tok::RBracket; break;
          case ',': t.type = Tok::Comma; break;
          case ';': t.type = Tok::Semicolon; break;
          case '*': t.type = Tok::Star; break;
          default:
            throw ParseError(std::string("unexpected character '") + c + "'",
                             line, col);
        }
        t.text = std::string(1, c);
        advance(1);
      }
    }
    out.push_back(std::move(t));
  }
  Token end;
  end.type = Tok::End;
  end.line = line;
  end.column = col;
  out.push_back(end);
  return out;
}

inline std::string format_number(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

// ---------------------------------------------------------------------------
// Recursive-descent parser shared by all dialects.

class Parser {
 public:
  Parser(std::string_view text, Dialect dialect, bool allow_blanks)
      : tokens_(tokenize(text)), dialect_(dialect), allow_blanks_(allow_blanks) {}

  AstNode parse() {
    if (peek().type == Tok::End) fail("empty query");
    AstNode root;
    if (dialect_ == Dialect::Network && !is_keyword(peek(), "select")) {
      root = parse_program();
    } else {
      root = parse_select();
    }
    if (peek().type == Tok::Semicolon) next();
    if (peek().type != Tok::End) fail("unexpected trailing token '" + peek().text + "'");
    return root;
  }

 private:
  const Token& peek() const { return tokens_[pos_]; }
  Token next() { return tokens_[pos_ < tokens_.size() - 1 ? pos_++ : pos_]; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(msg, peek().line, peek().column);
  }
  [[noreturn]] void fail_at(const Token& t, const std::string& msg) const {
    throw ParseError(msg, t.line, t.column);
  }

  static bool is_keyword(const Token& t, std::string_view kw) {
    return t.type == Tok::Ident && lower(t.text) == kw;
  }

  Token expect(Tok type, std::string_view what) {
    if (peek().type != type) fail("expected " + std::string(what));
    return next();
  }

  void expect_keyword(std::string_view kw) {
    if (!is_keyword(peek(), kw)) fail("expected " + detail::lower(kw));
    next();
  }

  // network := stmt+ ; stmt := IDENT '=' (filter | groupby) [';']
  AstNode parse_program() {
    AstNode program{NodeKind::Program};
    std::vector<std::string> streams = {"T"};
    while (peek().type != Tok::End) {
      Token target = expect(Tok::Ident, "assignment target");
      if (peek().type != Tok::Op || (peek().text != "=")) fail("expected '='");
      next();
      AstNode assign{NodeKind::Assign, target.text};
      Token fn = expect(Tok::Ident, "filter or groupby");
      const std::string fname = lower(fn.text);
      expect(Tok::LParen, "'('");
      AstNode source = parse_stream(streams);
      expect(Tok::Comma, "','");
      if (fname == "filter") {
        AstNode filter{NodeKind::Filter};
        filter.children.push_back(std::move(source));
        filter.children.push_back(parse_predicate());
        assign.children.push_back(std::move(filter));
      } else if (fname == "groupby") {
        AstNode group{NodeKind::GroupBy};
        group.children.push_back(std::move(source));
        expect(Tok::LBracket, "'['");
        AstNode keys{NodeKind::KeyList};
        do {
          if (peek().type == Tok::Comma) next();
          Token k = expect(Tok::Ident, "groupby key");
          const std::string key = k.text == kFiveTuple ? k.text : lower(k.text);
          if (key != kFiveTuple && !find_column(dialect_, key))
            fail_at(k, "unknown column '" + k.text + "'");
          keys.children.push_back(AstNode{NodeKind::Key, key});
        } while (peek().type == Tok::Comma);
        expect(Tok::RBracket, "']'");
        group.children.push_back(std::move(keys));
        expect(Tok::Comma, "','");
        Token agg = expect(Tok::Ident, "aggregation function");
        const std::string aname = lower(agg.text);
        if (std::find(kNetworkAggregates.begin(), kNetworkAggregates.end(),
                      aname) == kNetworkAggregates.end())
          fail_at(agg, "unknown aggregation function '" + agg.text + "'");
        group.children.push_back(AstNode{NodeKind::Aggregate, aname});
        assign.children.push_back(std::move(group));
      } else {
        fail_at(fn, "unknown function '" + fn.text + "'");
      }
      expect(Tok::RParen, "')'");
      if (peek().type == Tok::Semicolon) next();
      streams.push_back(target.text);
      program.children.push_back(std::move(assign));
    }
    return program;
  }

  AstNode parse_stream(const std::vector<std::string>& streams) {
    Token s = expect(Tok::Ident, "stream name");
    if (std::find(streams.begin(), streams.end(), s.text) == streams.end())
      fail_at(s, "unknown stream '" + s.text + "'");
    return AstNode{NodeKind::Stream, s.text};
  }

  // select := SELECT proj FROM table [WHERE predicate]
  // Select children: projected columns (or Star), Table, optional predicate.
  AstNode parse_select() {
    expect_keyword("select");
    AstNode select{NodeKind::Select};
    if (peek().type == Tok::Star) {
      next();
      select.children.push_back(AstNode{NodeKind::Star, "*"});
    } else {
      do {
        if (peek().type == Tok::Comma) next();
        Token c = expect(Tok::Ident, "column");
        const std::string name = lower(c.text);
        const bool ok = find_column(dialect_, name).has_value() ||
                        (dialect_ == Dialect::Trace && name == "span");
        if (!ok) fail_at(c, "unknown column '" + c.text + "'");
        select.children.push_back(AstNode{NodeKind::Column, name});
      } while (peek().type == Tok::Comma);
    }
    expect_keyword("from");
    Token table = expect(Tok::Ident, "table");
    std::string tname;
    for (auto t : dialect_tables(dialect_))
      if (lower(t) == lower(table.text)) tname = std::string(t);
    if (tname.empty()) fail_at(table, "unknown table '" + table.text + "'");
    select.children.push_back(AstNode{NodeKind::Table, tname});
    if (is_keyword(peek(), "where")) {
      next();
      select.children.push_back(parse_predicate());
    }
    return select;
  }

  // predicate := compare (AND compare)*
  AstNode parse_predicate() {
    std::vector<AstNode> terms;
    terms.push_back(parse_compare());
    while (is_keyword(peek(), "and")) {
      next();
      terms.push_back(parse_compare());
    }
    if (terms.size() == 1) return std::move(terms.front());
    AstNode conj{NodeKind::And};
    conj.children = std::move(terms);
    return conj;
  }

  AstNode parse_compare() {
    Token col = expect(Tok::Ident, "column");
    const std::string name = lower(col.text);
    auto info = find_column(dialect_, name);
    if (!info) fail_at(col, "unknown column '" + col.text + "'");
    Token op = expect(Tok::Op, "comparison operator");
    AstNode cmp{NodeKind::Compare};
    if (op.text == "=" || op.text == "==") cmp.op = CompareOp::Eq;
    else if (op.text == "!=") cmp.op = CompareOp::Ne;
    else if (op.text == "<") cmp.op = CompareOp::Lt;
    else if (op.text == "<=") cmp.op = CompareOp::Le;
    else if (op.text == ">") cmp.op = CompareOp::Gt;
    else cmp.op = CompareOp::Ge;
    cmp.children.push_back(AstNode{NodeKind::Column, name});

    Token lit = next();
    AstNode value;
    switch (lit.type) {
      case Tok::Blank:
        if (!allow_blanks_) fail_at(lit, "unfilled blank in query");
        if (info->param == ParamKind::None)
          fail_at(lit, "blank not allowed for column '" + name + "'");
        if (cmp.op != CompareOp::Eq)
          fail_at(lit, "blank must be compared with equality");
        value = AstNode{NodeKind::Blank, "_"};
        break;
      case Tok::String:
        if (info->type != ValueType::String)
          fail_at(lit, "column '" + name + "' expects a number");
        value = AstNode{NodeKind::StringLit, lit.text};
        break;
      case Tok::Number: {
        if (info->type != ValueType::Number)
          fail_at(lit, "column '" + name + "' expects a string");
        std::int64_t iv = 0;
        if (parse_int(lit.text, iv)) {
          value = AstNode{NodeKind::IntLit, std::to_string(iv)};
        } else {
          double dv = 0.0;
          auto [p, ec] = std::from_chars(lit.text.data(),
                                         lit.text.data() + lit.text.size(), dv);
          if (ec != std::errc()) fail_at(lit, "malformed number");
          value = AstNode{NodeKind::NumberLit, format_number(dv)};
        }
        break;
      }
      default:
        fail_at(lit, "expected literal");
    }
    if (info->param != ParamKind::None && cmp.op == CompareOp::Eq)
      value.param = info->param;
    if (value.param == ParamKind::Switch && value.kind == NodeKind::NumberLit)
      fail_at(lit, "switch id must be an integer");
    cmp.children.push_back(std::move(value));
    return cmp;
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  Dialect dialect_;
  bool allow_blanks_;
};

inline std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string_view op_text(CompareOp op, bool network_style) {
  switch (op) {
    case CompareOp::Eq: return network_style ? "==" : "=";
    case CompareOp::Ne: return "!=";
    case CompareOp::Lt: return "<";
    case CompareOp::Le: return "<=";
    case CompareOp::Gt: return ">";
    case CompareOp::Ge: return ">=";
  }
  return "=";
}

inline void render_node(const AstNode& n, bool pipeline, std::string& out) {
  switch (n.kind) {
    case NodeKind::Program:
      for (std::size_t i = 0; i < n.children.size(); ++i) {
        if (i) out += ' ';
        render_node(n.children[i], pipeline, out);
      }
      break;
    case NodeKind::Assign:
      out += n.text;
      out += " = ";
      render_node(n.children.at(0), pipeline, out);
      out += ';';
      break;
    case NodeKind::Filter:
      out += "filter(";
      render_node(n.children.at(0), pipeline, out);
      out += ", ";
      render_node(n.children.at(1), pipeline, out);
      out += ')';
      break;
    case NodeKind::GroupBy:
      out += "groupby(";
      render_node(n.children.at(0), pipeline, out);
      out += ", [";
      for (std::size_t i = 0; i < n.children.at(1).children.size(); ++i) {
        if (i) out += ", ";
        out += n.children[1].children[i].text;
      }
      out += "], ";
      out += n.children.at(2).text;
      out += ')';
      break;
    case NodeKind::Select: {
      out += "SELECT ";
      std::size_t i = 0;
      for (; i < n.children.size() && n.children[i].kind != NodeKind::Table; ++i) {
        if (i) out += ", ";
        out += n.children[i].text;
      }
      out += " FROM ";
      out += n.children.at(i).text;
      if (i + 1 < n.children.size()) {
        out += " WHERE ";
        render_node(n.children[i + 1], pipeline, out);
      }
      break;
    }
    case NodeKind::And:
      for (std::size_t i = 0; i < n.children.size(); ++i) {
        if (i) out += pipeline ? " and " : " AND ";
        render_node(n.children[i], pipeline, out);
      }
      break;
    case NodeKind::Compare:
      render_node(n.children.at(0), pipeline, out);
      out += op_text(n.op, pipeline);
      render_node(n.children.at(1), pipeline, out);
      break;
    case NodeKind::StringLit:
      out += quote(n.text);
      break;
    case NodeKind::Blank:
      out += '_';
      break;
    default:
      out += n.text;
      break;
  }
}

inline void preorder(const AstNode& n, auto&& fn) {
  fn(n);
  for (const auto& c : n.children) preorder(c, fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public operations

inline QueryAst parse_query(std::string_view text, Dialect dialect) {
  detail::Parser p(text, dialect, /*allow_blanks=*/false);
  return QueryAst{dialect, p.parse()};
}

// Picks the dialect from the text itself: pipelines are network queries,
// SELECT forms are keyed by their table.
inline Dialect detect_dialect(std::string_view text) {
  const auto toks = detail::tokenize(text);
  if (toks.empty() || toks.front().type != detail::Tok::Ident ||
      detail::lower(toks.front().text) != "select")
    return Dialect::Network;
  for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
    if (toks[i].type == detail::Tok::Ident && detail::lower(toks[i].text) == "from" &&
        toks[i + 1].type == detail::Tok::Ident) {
      const std::string t = detail::lower(toks[i + 1].text);
      if (t == "spans") return Dialect::Trace;
      for (auto r : detail::kResourceTables)
        if (t == r) return Dialect::Resource;
      return Dialect::Network;
    }
  }
  return Dialect::Network;
}

inline QueryAst parse_query(std::string_view text) {
  return parse_query(text, detect_dialect(text));
}

inline std::string render_node_text(const AstNode& root) {
  std::string out;
  const bool pipeline = root.kind == NodeKind::Program;
  detail::render_node(root, pipeline, out);
  return out;
}

inline std::string render_query(const QueryAst& ast) {
  return render_node_text(ast.root);
}

inline std::vector<ParamKind> collect_blanks(const AstNode& root) {
  std::vector<ParamKind> out;
  detail::preorder(root, [&](const AstNode& n) {
    if (n.kind == NodeKind::Blank) out.push_back(n.param);
  });
  return out;
}

inline QueryTemplate parse_template(std::string_view text, Dialect dialect) {
  detail::Parser p(text, dialect, /*allow_blanks=*/true);
  QueryTemplate t{dialect, p.parse(), {}};
  t.blanks = collect_blanks(t.root);
  return t;
}

inline std::string render_template(const QueryTemplate& t) {
  return render_node_text(t.root);
}

namespace detail {

inline void extract(AstNode& n, std::vector<ParamKind>& kinds,
                    std::vector<std::string>& values) {
  if (is_literal(n.kind) && n.param != ParamKind::None) {
    kinds.push_back(n.param);
    values.push_back(n.text);
    n = AstNode{NodeKind::Blank, "_", CompareOp::Eq, n.param, {}};
    return;
  }
  for (auto& c : n.children) extract(c, kinds, values);
}

inline void fill(AstNode& n, const std::vector<std::string>& values,
                 std::size_t& next) {
  if (n.kind == NodeKind::Blank) {
    if (next >= values.size())
      throw InvalidArgument("too few parameters for template");
    const std::string& v = values[next++];
    if (n.param == ParamKind::Switch) {
      std::int64_t iv = 0;
      if (!parse_int(v, iv))
        throw InvalidArgument("switch parameter '" + v + "' is not an integer");
      n = AstNode{NodeKind::IntLit, std::to_string(iv), CompareOp::Eq, n.param, {}};
    } else {
      n = AstNode{NodeKind::StringLit, v, CompareOp::Eq, n.param, {}};
    }
    return;
  }
  for (auto& c : n.children) fill(c, values, next);
}

}  // namespace detail

inline std::pair<QueryTemplate, ParamAssignment> extract_template(
    const QueryAst& ast) {
  QueryTemplate t{ast.dialect, ast.root, {}};
  ParamAssignment u;
  detail::extract(t.root, t.blanks, u.values);
  return {std::move(t), std::move(u)};
}

inline QueryAst fill_blanks(const QueryTemplate& t, const ParamAssignment& u) {
  if (u.values.size() != t.blanks.size())
    throw InvalidArgument("template has " + std::to_string(t.blanks.size()) +
                          " blanks but " + std::to_string(u.values.size()) +
                          " parameters were given");
  QueryAst q{t.dialect, t.root};
  std::size_t next = 0;
  detail::fill(q.root, u.values, next);
  return q;
}

// ---------------------------------------------------------------------------
// Template graphs

struct AstGraph {
  // One feature row per node, pre-order numbering; node 0 is the root.
  std::vector<std::vector<double>> features;
  // Undirected parent-child edges (parent, child).
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::size_t root_index = 0;
  // Blank b_i (1-based) -> node index.
  std::map<int, std::size_t> blank_indices;

  std::size_t num_nodes() const { return features.size(); }
};

namespace detail {

inline const std::vector<std::string>& symbol_table() {
  static const std::vector<std::string> table = [] {
    std::vector<std::string> s;
    for (const auto& c : kNetworkColumns) s.emplace_back(c.name);
    for (const auto& c : kTraceColumns) s.emplace_back(c.name);
    for (const auto& c : kResourceColumns) s.emplace_back(c.name);
    s.emplace_back("span");
    s.emplace_back("*");
    s.emplace_back(kFiveTuple);
    for (auto a : kNetworkAggregates) s.emplace_back(a);
    s.emplace_back("T");
    s.emplace_back("spans");
    for (auto t : kResourceTables) s.emplace_back(t);
    for (auto op : {"==", "=", "!=", "<", "<=", ">", ">="}) s.emplace_back(op);
    s.emplace_back("stream:T");
    s.emplace_back("stream:var");
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }();
  return table;
}

inline std::string node_symbol(const AstNode& n, bool pipeline) {
  switch (n.kind) {
    case NodeKind::Column:
    case NodeKind::Table:
    case NodeKind::Key:
    case NodeKind::Aggregate:
    case NodeKind::Star:
      return n.text;
    case NodeKind::Compare:
      return std::string(op_text(n.op, pipeline));
    case NodeKind::Stream:
      return n.text == "T" ? "stream:T" : "stream:var";
    default:
      return {};
  }
}

}  // namespace detail

// Width of AstGraph feature rows:
//   node-kind one-hot | symbol one-hot (+other) | blank flag |
//   literal bucket {string, small int, other number, aggregation name} |
//   dialect one-hot
inline std::size_t graph_feature_width() {
  return kNodeKindCount + detail::symbol_table().size() + 1 + 1 + 4 + 3;
}

inline AstGraph ast_to_graph(const QueryTemplate& t) {
  AstGraph g;
  const auto& symbols = detail::symbol_table();
  const std::size_t sym_offset = kNodeKindCount;
  const std::size_t blank_offset = sym_offset + symbols.size() + 1;
  const std::size_t bucket_offset = blank_offset + 1;
  const std::size_t dialect_offset = bucket_offset + 4;
  const bool pipeline = t.root.kind == NodeKind::Program;
  int blank_no = 0;

  auto visit = [&](auto&& self, const AstNode& n,
                   std::optional<std::size_t> parent) -> void {
    const std::size_t idx = g.features.size();
    std::vector<double> f(graph_feature_width(), 0.0);
    f[static_cast<std::size_t>(n.kind)] = 1.0;
    const std::string sym = detail::node_symbol(n, pipeline);
    if (!sym.empty()) {
      auto it = std::lower_bound(symbols.begin(), symbols.end(), sym);
      const std::size_t s = (it != symbols.end() && *it == sym)
                                ? static_cast<std::size_t>(it - symbols.begin())
                                : symbols.size();
      f[sym_offset + s] = 1.0;
    }
    if (n.kind == NodeKind::Blank) {
      f[blank_offset] = 1.0;
      g.blank_indices[++blank_no] = idx;
    }
    if (n.kind == NodeKind::StringLit) f[bucket_offset + 0] = 1.0;
    if (n.kind == NodeKind::IntLit) {
      std::int64_t v = 0;
      parse_int(n.text, v);
      f[bucket_offset + ((v >= -1000 && v <= 1000) ? 1 : 2)] = 1.0;
    }
    if (n.kind == NodeKind::NumberLit) f[bucket_offset + 2] = 1.0;
    if (n.kind == NodeKind::Aggregate) f[bucket_offset + 3] = 1.0;
    f[dialect_offset + static_cast<std::size_t>(t.dialect)] = 1.0;
    g.features.push_back(std::move(f));
    if (parent) g.edges.emplace_back(*parent, idx);
    for (const auto& c : n.children) self(self, c, idx);
  };
  visit(visit, t.root, std::nullopt);
  g.root_index = 0;
  return g;
}

}  // namespace qrank::dsl
