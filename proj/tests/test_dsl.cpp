#include <gtest/gtest.h>

#include <set>

#include "qrank/dsl.hpp"

using namespace qrank;
using namespace qrank::dsl;

namespace {

const char* kCountQuery =
    "stream = filter(T, switch==3); result = groupby(stream, [5-tuple], count);";

}  // namespace

TEST(DslParse, TraceSelectShape) {
  const auto q = parse_query("SELECT span FROM spans WHERE name=\"GET_comments\"",
                             Dialect::Trace);
  ASSERT_EQ(q.root.kind, NodeKind::Select);
  ASSERT_EQ(q.root.children.size(), 3u);
  EXPECT_EQ(q.root.children[0].kind, NodeKind::Column);
  EXPECT_EQ(q.root.children[0].text, "span");
  EXPECT_EQ(q.root.children[1].kind, NodeKind::Table);
  EXPECT_EQ(q.root.children[1].text, "spans");
  const auto& cmp = q.root.children[2];
  EXPECT_EQ(cmp.kind, NodeKind::Compare);
  EXPECT_EQ(cmp.op, CompareOp::Eq);
  EXPECT_EQ(cmp.children[0].text, "name");
  EXPECT_EQ(cmp.children[1].kind, NodeKind::StringLit);
  EXPECT_EQ(cmp.children[1].text, "GET_comments");
  EXPECT_EQ(cmp.children[1].param, ParamKind::Function);
}

TEST(DslParse, NetworkPipelineHasTwoAssignments) {
  const auto q = parse_query(kCountQuery, Dialect::Network);
  ASSERT_EQ(q.root.kind, NodeKind::Program);
  ASSERT_EQ(q.root.children.size(), 2u);
  EXPECT_EQ(q.root.children[0].kind, NodeKind::Assign);
  EXPECT_EQ(q.root.children[0].text, "stream");
  EXPECT_EQ(q.root.children[0].children[0].kind, NodeKind::Filter);
  EXPECT_EQ(q.root.children[1].text, "result");
  EXPECT_EQ(q.root.children[1].children[0].kind, NodeKind::GroupBy);
}

TEST(DslParse, EmptyInputIsSyntaxError) {
  EXPECT_THROW(parse_query("", Dialect::Trace), ParseError);
  EXPECT_THROW(parse_query("   \n ", Dialect::Network), ParseError);
}

TEST(DslParse, ErrorsCarryLineAndColumn) {
  try {
    parse_query("SELECT span\nFROM spans WHERE nme=\"x\"", Dialect::Trace);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2);
    EXPECT_EQ(e.column(), 18);
    EXPECT_EQ(e.code(), "parse_error");
  }
}

TEST(DslParse, UnknownNamesRejected) {
  EXPECT_THROW(parse_query("SELECT * FROM gpu_usage WHERE host=\"a\"", Dialect::Resource),
               ParseError);
  EXPECT_THROW(parse_query("stream = filter(T, port==3);", Dialect::Network), ParseError);
  EXPECT_THROW(parse_query("r = groupby(T, [5-tuple], median);", Dialect::Network), ParseError);
  EXPECT_THROW(parse_query("r = groupby(S, [5-tuple], count);", Dialect::Network), ParseError);
}

TEST(DslParse, TypeChecksLiterals) {
  EXPECT_THROW(parse_query("SELECT * FROM cpu_usage WHERE host=3", Dialect::Resource),
               ParseError);
  EXPECT_THROW(parse_query("stream = filter(T, switch==\"3\");", Dialect::Network), ParseError);
  EXPECT_THROW(parse_query("stream = filter(T, switch==3.5);", Dialect::Network), ParseError);
}

TEST(DslRender, CanonicalForms) {
  EXPECT_EQ(render_query(parse_query("SELECT * FROM cpu_usage WHERE host=\"mn.h1\"",
                                     Dialect::Resource)),
            "SELECT * FROM cpu_usage WHERE host=\"mn.h1\"");
  EXPECT_EQ(render_query(parse_query("select  SPAN from SPANS where NAME = \"f\" and "
                                     "exception_count > 0",
                                     Dialect::Trace)),
            "SELECT span FROM spans WHERE name=\"f\" AND exception_count>0");
  EXPECT_EQ(render_query(parse_query("stream=filter(T,switch==3)\nresult=groupby(stream,"
                                     "[5-tuple],count)",
                                     Dialect::Network)),
            kCountQuery);
  EXPECT_EQ(render_query(parse_query("SELECT QUEUE_SIZE FROM T WHERE SWITCH_ID = 3",
                                     Dialect::Network)),
            "SELECT queue_size FROM T WHERE switch_id=3");
}

TEST(DslRender, NoPredicateOmitsWhere) {
  const auto q = parse_query("SELECT * FROM mem_usage", Dialect::Resource);
  EXPECT_EQ(render_query(q), "SELECT * FROM mem_usage");
}

TEST(DslRender, NumbersNormalized) {
  const auto q = parse_query("SELECT span FROM spans WHERE duration_ms>=12.50", Dialect::Trace);
  EXPECT_EQ(render_query(q), "SELECT span FROM spans WHERE duration_ms>=12.5");
  const auto n = parse_query("SELECT span FROM spans WHERE duration_ms<-3", Dialect::Trace);
  EXPECT_EQ(render_query(n), "SELECT span FROM spans WHERE duration_ms<-3");
}

TEST(DslRender, StringEscapesRoundTrip) {
  const auto q = parse_query(R"(SELECT span FROM spans WHERE name="a\"b\\c")", Dialect::Trace);
  EXPECT_EQ(q.root.children[2].children[1].text, "a\"b\\c");
  EXPECT_EQ(parse_query(render_query(q), Dialect::Trace), q);
}

TEST(DslRender, ParseRenderIsIdentityOnAsts) {
  const std::vector<std::pair<std::string, Dialect>> cases = {
      {kCountQuery, Dialect::Network},
      {"s = filter(T, switch==2 and qdepth>10); r = groupby(s, [srcip, dstport], max_qdepth);",
       Dialect::Network},
      {"SELECT duration_ms, error FROM spans WHERE name=\"x\" AND exception_count!=0",
       Dialect::Trace},
      {"SELECT value FROM disk_io WHERE host=\"mn.h4\" AND time<=7", Dialect::Resource},
  };
  for (const auto& [text, d] : cases) {
    const auto ast = parse_query(text, d);
    EXPECT_EQ(parse_query(render_query(ast), d), ast) << text;
  }
}

TEST(DslDialect, DetectedFromText) {
  EXPECT_EQ(detect_dialect(kCountQuery), Dialect::Network);
  EXPECT_EQ(detect_dialect("SELECT queue_size FROM T WHERE switch_id=1"), Dialect::Network);
  EXPECT_EQ(detect_dialect("SELECT span FROM spans"), Dialect::Trace);
  EXPECT_EQ(detect_dialect("select * from CPU_USAGE"), Dialect::Resource);
}

TEST(DslTemplate, ExtractAndFillAreInverse) {
  const auto q = parse_query(kCountQuery, Dialect::Network);
  auto [t, u] = extract_template(q);
  ASSERT_EQ(t.blanks.size(), 1u);
  EXPECT_EQ(t.blanks[0], ParamKind::Switch);
  EXPECT_EQ(u.values, std::vector<std::string>{"3"});
  EXPECT_EQ(render_template(t),
            "stream = filter(T, switch==_); result = groupby(stream, [5-tuple], count);");
  EXPECT_EQ(fill_blanks(t, u), q);
  EXPECT_EQ(parse_template(render_template(t), Dialect::Network), t);
}

TEST(DslTemplate, NonParameterLiteralsStay) {
  const auto q = parse_query("SELECT span FROM spans WHERE name=\"f\" AND exception_count>0",
                             Dialect::Trace);
  auto [t, u] = extract_template(q);
  EXPECT_EQ(render_template(t), "SELECT span FROM spans WHERE name=_ AND exception_count>0");
  EXPECT_EQ(u.values, std::vector<std::string>{"f"});
}

TEST(DslTemplate, MultipleBlanksInOrder) {
  const auto t = parse_template("SELECT * FROM cpu_usage WHERE host=_ AND host=_ AND value>1",
                                Dialect::Resource);
  ASSERT_EQ(t.blanks.size(), 2u);
  const auto q = fill_blanks(t, ParamAssignment{{"mn.h1", "mn.h2"}});
  EXPECT_EQ(render_query(q),
            "SELECT * FROM cpu_usage WHERE host=\"mn.h1\" AND host=\"mn.h2\" AND value>1");
}

TEST(DslTemplate, BlankPositionsChecked) {
  EXPECT_THROW(parse_template("SELECT span FROM spans WHERE duration_ms=_", Dialect::Trace),
               ParseError);
  EXPECT_THROW(parse_template("SELECT span FROM spans WHERE name!=_", Dialect::Trace),
               ParseError);
  EXPECT_THROW(parse_query("SELECT span FROM spans WHERE name=_", Dialect::Trace), ParseError);
}

TEST(DslTemplate, FillValidatesKinds) {
  const auto t = parse_template("stream = filter(T, switch==_);", Dialect::Network);
  EXPECT_THROW(fill_blanks(t, ParamAssignment{{"s1"}}), InvalidArgument);
  EXPECT_THROW(fill_blanks(t, ParamAssignment{}), InvalidArgument);
}

TEST(DslGraph, TreeShapeAndWidth) {
  const auto t = parse_template(
      "stream = filter(T, switch==_); result = groupby(stream, [5-tuple], count);",
      Dialect::Network);
  const auto g = ast_to_graph(t);
  EXPECT_EQ(g.edges.size(), g.num_nodes() - 1);
  for (const auto& f : g.features) EXPECT_EQ(f.size(), graph_feature_width());
  ASSERT_EQ(g.blank_indices.size(), 1u);
  const std::size_t b = g.blank_indices.at(1);
  EXPECT_EQ(g.features[b][static_cast<std::size_t>(NodeKind::Blank)], 1.0);
  // Connected: every node but the root appears exactly once as a child.
  std::set<std::size_t> children;
  for (auto [p, c] : g.edges) {
    EXPECT_LT(p, c);
    children.insert(c);
  }
  EXPECT_EQ(children.size(), g.num_nodes() - 1);
  EXPECT_EQ(children.count(0), 0u);
}

TEST(DslGraph, WidthSharedAcrossDialects) {
  const auto a = ast_to_graph(parse_template("SELECT * FROM cpu_usage WHERE host=_",
                                             Dialect::Resource));
  const auto b = ast_to_graph(parse_template("SELECT span FROM spans WHERE name=_",
                                             Dialect::Trace));
  EXPECT_EQ(a.features[0].size(), b.features[0].size());
  EXPECT_NE(a.features, b.features);
}
