#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "bespoke/contract.hpp"
#include "bespoke/errors.hpp"
#include "bespoke/micro_tpch.hpp"
#include "bespoke/oracle.hpp"
#include "bespoke/sql.hpp"

using namespace bespoke;
using namespace bespoke::contract;

namespace {

const char* kMinimal = R"(
[table t]
col a int64
col b varchar
pk a

[dataset]
path = data

[objective]
total-runtime

[seed]
7
)";

}  // namespace

TEST_CASE("minimal contract parses") {
  Contract c = parse_contract(kMinimal);
  CHECK(c.tables.size() == 1);
  CHECK(c.templates.empty());
  CHECK(c.seed == 7);
  CHECK(c.tables[0].primary_key == "a");
}

TEST_CASE("bundled contract round-trips through print and parse") {
  std::string text = workloads::micro_tpch_contract_text("data");
  Contract c1 = parse_contract(text);
  CHECK(c1.tables.size() == 8);
  CHECK(c1.templates.size() == 5);
  std::string printed = print_contract(c1);
  Contract c2 = parse_contract(printed);
  CHECK(print_contract(c2) == printed);  // fixpoint
  CHECK(c2.tables.size() == c1.tables.size());
  CHECK(c2.templates.size() == c1.templates.size());
  for (size_t i = 0; i < c1.templates.size(); ++i) {
    CHECK(c2.templates[i].id == c1.templates[i].id);
    CHECK(c2.templates[i].text == c1.templates[i].text);
    CHECK(c2.templates[i].params.size() == c1.templates[i].params.size());
  }
}

TEST_CASE("template referencing an undeclared column is rejected by name") {
  std::string bad = std::string(kMinimal) +
                    "[template q]\n"
                    "sql = \"SELECT foo FROM t\"\n";
  try {
    parse_contract(bad);
    FAIL("expected SemanticError");
  } catch (const SemanticError& e) {
    CHECK(std::string(e.what()).find("foo") != std::string::npos);
  }
}

TEST_CASE("structural validation failures") {
  CHECK_THROWS_AS(parse_contract("[table t]\ncol a int64\ncol a int64\n[dataset]\npath = d\n"), SemanticError);
  CHECK_THROWS_AS(parse_contract("[table t]\ncol a varchar\npk a\n[dataset]\npath = d\n"), SemanticError);
  CHECK_THROWS_AS(
      parse_contract("[table t]\ncol a int64\nfk a -> missing.x\n[dataset]\npath = d\n"), SemanticError);
  // fk must reference the parent's primary key
  CHECK_THROWS_AS(parse_contract("[table p]\ncol x int64\ncol y int64\npk x\n"
                                 "[table t]\ncol a int64\nfk a -> p.y\n[dataset]\npath = d\n"),
                  SemanticError);
  CHECK_THROWS_AS(parse_contract("[table t]\ncol a decimal(12)\n[dataset]\npath = d\n"), SyntaxError);
}

TEST_CASE("sample_bindings: determinism, membership, distinctness") {
  Contract c = workloads::micro_tpch_contract("data");
  const QueryTemplate& q = *c.find_template("q_range");

  auto a = sample_bindings(q, 20, 7);
  auto b = sample_bindings(q, 20, 7);
  CHECK(a.size() == 20);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // Every value inside its domain.
  for (const auto& binding : a)
    for (const auto& dom : q.params) CHECK(dom.contains(binding.at(dom.name)));

  // Date range with >= n distinct values: pairwise distinct draws.
  std::set<int64_t> dates;
  for (const auto& binding : a) dates.insert(binding.at("d1").i);
  CHECK(dates.size() == a.size());

  auto differently_seeded = sample_bindings(q, 20, 8);
  CHECK(differently_seeded != a);
}

TEST_CASE("singleton choice domain repeats its value") {
  Contract c = parse_contract(std::string(kMinimal) +
                              "[template q]\n"
                              "sql = \"SELECT count(*) AS n FROM t WHERE b = :x\"\n"
                              "param x choice('A')\n");
  auto bindings = sample_bindings(*c.find_template("q"), 3, 1);
  CHECK(bindings.size() == 3);
  for (const auto& b : bindings) CHECK(b.at("x").s == "A");
}

TEST_CASE("binding soundness property over random domains") {
  for (uint64_t seed = 1; seed <= 25; ++seed) {
    std::string doc = std::string(kMinimal) +
                      "[template q]\n"
                      "sql = \"SELECT count(*) AS n FROM t WHERE a BETWEEN :lo AND :hi\"\n"
                      "param lo int_range(" + std::to_string(int(seed) * 3) + ", " +
                      std::to_string(int(seed) * 50) + ")\n" +
                      "param hi int_range(" + std::to_string(int(seed) * 51) + ", " +
                      std::to_string(int(seed) * 90 + 1) + ")\n";
    Contract c = parse_contract(doc);
    for (const auto& b : sample_bindings(*c.find_template("q"), 11, seed))
      for (const auto& dom : c.find_template("q")->params) CHECK(dom.contains(b.at(dom.name)));
  }
}

TEST_CASE("instantiate substitutes literals and reports missing params") {
  Contract c = parse_contract(std::string(kMinimal) +
                              "[template q]\n"
                              "sql = \"SELECT count(*) AS n FROM t WHERE a > :x\"\n"
                              "param x int_range(1, 10)\n");
  const auto& tmpl = *c.find_template("q");
  ParamBinding binding{{"x", Value::from_int(5)}};
  sql::QueryAst ast = sql::instantiate(tmpl, c, binding);
  REQUIRE(ast.filters.size() == 1);
  CHECK(ast.filters[0].lo->kind == sql::Expr::Kind::Literal);
  CHECK(ast.filters[0].lo->lit.i == 5);

  CHECK_THROWS_AS(sql::instantiate(tmpl, c, ParamBinding{}), MissingParam);
}

TEST_CASE("instantiated AST equals textual substitution plus reparse") {
  // Q6-like template with three parameter sites; the oracle result of the
  // instantiated AST must equal the result of literal text substitution.
  Contract c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.02, 11);
  const auto& tmpl = *c.find_template("q_range");
  for (const auto& binding : sample_bindings(tmpl, 5, 3)) {
    auto via_ast = sql::instantiate(tmpl, c, binding);
    std::string substituted = sql::substitute_text(tmpl.text, binding);
    auto via_text = sql::parse_query(substituted, c);
    auto r1 = oracle::canonicalize(oracle::execute(via_ast, db), via_ast.order_by);
    auto r2 = oracle::canonicalize(oracle::execute(via_text, db), via_text.order_by);
    CHECK(!oracle::compare(r1, r2).has_value());
  }
}

TEST_CASE("query subset rejections") {
  Contract c = parse_contract(kMinimal);
  CHECK_THROWS_AS(sql::parse_query("SELECT a FROM t WHERE a > b OR a = 1", c), Error);
  CHECK_THROWS_AS(sql::parse_query("SELECT nothere FROM t", c), SemanticError);
  CHECK_THROWS_AS(sql::parse_query("SELECT a FROM missing", c), SemanticError);
  // window functions are simply not part of the grammar
  CHECK_THROWS_AS(sql::parse_query("SELECT rank() OVER (ORDER BY a) FROM t", c), Error);
}
