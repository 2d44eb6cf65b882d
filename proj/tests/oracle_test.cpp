#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "bespoke/datastore.hpp"
#include "bespoke/errors.hpp"
#include "bespoke/micro_tpch.hpp"
#include "bespoke/oracle.hpp"
#include "test_support.hpp"

using namespace bespoke;
using oracle::canonicalize;
using oracle::compare;
using oracle::execute;

namespace {

contract::Contract tiny_contract() {
  return contract::parse_contract(R"(
[table t]
col a int64
col b int64 nullable
col s varchar

[dataset]
path = data

[objective]
total-runtime

[seed]
1
)");
}

RelationMap tiny_db() {
  RelationMap db;
  Relation t;
  t.name = "t";
  t.schema = {{"a", ColumnType::int64(), false},
              {"b", ColumnType::int64(), true},
              {"s", ColumnType::varchar(), false}};
  ColumnData a, b, s;
  a.type = ColumnType::int64();
  b.type = ColumnType::int64();
  s.type = ColumnType::varchar();
  a.push(Value::from_int(1));
  a.push(Value::from_int(2));
  a.push(Value::from_int(3));
  b.push(Value::from_int(10));
  b.push_null();
  b.push(Value::from_int(30));
  s.push(Value::from_string("x"));
  s.push(Value::from_string("y"));
  s.push(Value::from_string("z"));
  t.columns = {a, b, s};
  db["t"] = t;
  return db;
}

}  // namespace

TEST_CASE("count over three rows") {
  auto c = tiny_contract();
  auto db = tiny_db();
  auto rs = execute(sql::parse_query("SELECT count(*) AS n FROM t", c), db);
  REQUIRE(rs.rows.size() == 1);
  CHECK(rs.rows[0][0].i == 3);
}

TEST_CASE("aggregate over empty input yields one row with null sum") {
  auto c = tiny_contract();
  auto db = tiny_db();
  auto rs = execute(sql::parse_query("SELECT sum(a) AS s FROM t WHERE 1 = 0", c), db);
  REQUIRE(rs.rows.size() == 1);
  CHECK(rs.rows[0][0].is_null());
  // count over the same empty input is zero, not null
  auto rc = execute(sql::parse_query("SELECT count(*) AS n FROM t WHERE 1 = 0", c), db);
  CHECK(rc.rows[0][0].i == 0);
  // group-by over empty input: no rows at all
  auto rg = execute(sql::parse_query("SELECT s, count(*) AS n FROM t WHERE 1 = 0 GROUP BY s", c), db);
  CHECK(rg.rows.empty());
}

TEST_CASE("null semantics: predicates fail, aggregates skip, count(col) counts non-null") {
  auto c = tiny_contract();
  auto db = tiny_db();
  auto rs = execute(sql::parse_query("SELECT count(*) AS n FROM t WHERE b > 0", c), db);
  CHECK(rs.rows[0][0].i == 2);
  auto sums = execute(sql::parse_query("SELECT sum(b) AS s, count(b) AS n, avg(b) AS a FROM t", c), db);
  CHECK(sums.rows[0][0].i == 40);
  CHECK(sums.rows[0][1].i == 2);
  CHECK(sums.rows[0][2].f == doctest::Approx(20.0));
}

TEST_CASE("division by zero yields null per SQL convention") {
  auto c = tiny_contract();
  auto db = tiny_db();
  auto rs = execute(sql::parse_query("SELECT a / (a - a) AS q FROM t WHERE a = 1", c), db);
  REQUIRE(rs.rows.size() == 1);
  CHECK(rs.rows[0][0].is_null());
}

TEST_CASE("canonicalize: unordered queries sort lexicographically, nulls first") {
  oracle::ResultSet rs;
  rs.names = {"v"};
  rs.types = {ColumnType::int64()};
  rs.rows = {{Value::from_int(2)}, {Value::from_int(1)}, {Value::null()}};
  auto canon = canonicalize(std::move(rs), {});
  CHECK(canon.rows[0][0].is_null());
  CHECK(canon.rows[1][0].i == 1);
  CHECK(canon.rows[2][0].i == 2);
}

TEST_CASE("canonicalize: ORDER BY ties broken by remaining columns") {
  oracle::ResultSet rs;
  rs.names = {"k", "v"};
  rs.types = {ColumnType::int64(), ColumnType::int64()};
  rs.rows = {{Value::from_int(1), Value::from_int(9)},
             {Value::from_int(1), Value::from_int(3)},
             {Value::from_int(0), Value::from_int(5)}};
  std::vector<sql::OrderKey> order{{0, false}};
  auto canon = canonicalize(std::move(rs), order);
  CHECK(canon.rows[0][1].i == 5);
  CHECK(canon.rows[1][1].i == 3);  // tie on k=1 broken by v
  CHECK(canon.rows[2][1].i == 9);
}

TEST_CASE("compare: equivalence and first differing row") {
  oracle::ResultSet a, b;
  a.names = b.names = {"v"};
  a.types = b.types = {ColumnType::float64()};
  a.rows = {{Value::from_float(10.0 / 3.0)}};
  b.rows = {{Value::from_float(3.3333333333333335)}};
  auto ca = canonicalize(a, {});
  auto cb = canonicalize(b, {});
  CHECK(!compare(ca, cb).has_value());  // equal after 10-digit rounding

  // differing at a coarser digit -> mismatch
  oracle::ResultSet c1 = ca;
  c1.rows[0][0] = Value::from_float(3.34);
  CHECK(compare(canonicalize(c1, {}), cb).has_value());

  // extra row reported at its index (9.0 sorts after the matching row)
  oracle::ResultSet d = ca;
  d.rows.push_back({Value::from_float(9.0)});
  auto mm = compare(canonicalize(d, {}), cb);
  REQUIRE(mm.has_value());
  CHECK(mm->row == 1);

  // compare is symmetric-ish on equals and reflexive
  CHECK(!compare(ca, ca).has_value());
  CHECK(!compare(cb, ca).has_value());
}

TEST_CASE("Q6-like revenue equals an independent flat scan of the CSV") {
  auto dir = testsup::temp_dir("oracle_q6");
  workloads::write_micro_tpch(dir, 0.05, 42);
  auto c = workloads::micro_tpch_contract("data");
  auto loaded = datastore::load_dataset(dir + "/data", c.tables);

  const auto& tmpl = *c.find_template("q_range");
  auto bindings = contract::sample_bindings(tmpl, 3, 17);
  auto raw = testsup::RawCsv::read(dir + "/data/lineitem.csv");
  int ship = raw.col("l_shipdate"), disc = raw.col("l_discount"), qty = raw.col("l_quantity"),
      price = raw.col("l_extendedprice");

  for (const auto& b : bindings) {
    // Independent evaluation over raw CSV text.
    std::string d1 = b.at("d1").to_text(), d2 = b.at("d2").to_text();
    double dlo = std::stod(format_decimal(b.at("dlo").i, 2)), dhi = std::stod(format_decimal(b.at("dhi").i, 2));
    long long qmax = b.at("qty").i;
    long long cents = 0;  // price and discount have scale 2 -> product scale 4
    bool any = false;
    for (const auto& row : raw.rows) {
      const std::string& sd = row[size_t(ship)];
      if (sd < d1 || sd > d2) continue;  // ISO dates compare lexicographically
      double dv = std::stod(row[size_t(disc)]);
      if (dv < dlo - 1e-9 || dv > dhi + 1e-9) continue;
      if (std::stoll(row[size_t(qty)]) >= qmax) continue;
      long long p = std::llround(std::stod(row[size_t(price)]) * 100);
      long long dd = std::llround(dv * 100);
      cents += p * dd;
      any = true;
    }
    auto ast = sql::instantiate(tmpl, c, b);
    auto rs = execute(ast, loaded.relations);
    REQUIRE(rs.rows.size() == 1);
    if (!any) {
      CHECK(rs.rows[0][0].is_null());
    } else {
      CHECK(rs.rows[0][0].tag == Value::Tag::Dec);
      CHECK(rs.rows[0][0].i == cents);
    }
  }
}

TEST_CASE("profile: single-table filter matching nothing has zero selectivity") {
  auto c = tiny_contract();
  auto db = tiny_db();
  auto ast = sql::parse_query("SELECT count(*) AS n FROM t WHERE a > 100", c);
  auto p = oracle::profile_cardinalities(ast, db);
  CHECK(p.filtered_rows[0] == 0);
  CHECK(p.filter_selectivity[0] == doctest::Approx(0.0));
}

TEST_CASE("profile: join cardinalities match brute-force pair counting") {
  auto dir = testsup::temp_dir("oracle_prof");
  auto c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.02, 9);
  auto ast = sql::parse_query("SELECT count(*) AS n FROM orders, lineitem WHERE l_orderkey = o_orderkey", c);
  auto p = oracle::profile_cardinalities(ast, db);

  // Brute force over all pairs.
  const auto& orders = db.at("orders");
  const auto& lineitem = db.at("lineitem");
  int ok = orders.column_index("o_orderkey");
  int lk = lineitem.column_index("l_orderkey");
  size_t matches = 0;
  for (size_t i = 0; i < orders.row_count(); ++i)
    for (size_t j = 0; j < lineitem.row_count(); ++j)
      if (orders.columns[size_t(ok)].ints[i] == lineitem.columns[size_t(lk)].ints[j]) ++matches;
  REQUIRE(p.steps.size() == 1);
  CHECK(p.steps[0].out_rows == matches);
  CHECK(p.steps[0].out_rows == lineitem.row_count());  // key/FK join: child match count

  // Three-table chain totals agree with count(*) through execute.
  auto ast3 = sql::parse_query(
      "SELECT count(*) AS n FROM customer, orders, lineitem "
      "WHERE c_custkey = o_custkey AND l_orderkey = o_orderkey",
      c);
  auto p3 = oracle::profile_cardinalities(ast3, db);
  auto rs = execute(ast3, db);
  CHECK(p3.steps.back().out_rows == uint64_t(rs.rows[0][0].i));
}

TEST_CASE("property: count(*) equals row count of the unaggregated query") {
  auto c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.02, 21);
  std::vector<std::pair<std::string, std::string>> pairs = {
      {"SELECT count(*) AS n FROM orders WHERE o_orderdate >= date '1995-06-01'",
       "SELECT o_orderkey FROM orders WHERE o_orderdate >= date '1995-06-01'"},
      {"SELECT count(*) AS n FROM orders, customer WHERE o_custkey = c_custkey AND c_mktsegment = 'BUILDING'",
       "SELECT o_orderkey FROM orders, customer WHERE o_custkey = c_custkey AND c_mktsegment = 'BUILDING'"},
      {"SELECT count(*) AS n FROM lineitem WHERE l_quantity BETWEEN 10 AND 20",
       "SELECT l_orderkey FROM lineitem WHERE l_quantity BETWEEN 10 AND 20"}};
  for (const auto& [agg, plain] : pairs) {
    auto ra = execute(sql::parse_query(agg, c), db);
    auto rp = execute(sql::parse_query(plain, c), db);
    CHECK(uint64_t(ra.rows[0][0].i) == rp.rows.size());
  }
}

TEST_CASE("property: permuting join input order never changes the canonical result") {
  auto c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.02, 33);
  std::vector<std::vector<std::string>> froms = {
      {"orders", "customer"},
      {"customer", "orders"},
  };
  std::string where = "o_custkey = c_custkey AND c_mktsegment = 'MACHINERY'";
  oracle::ResultSet first;
  bool have_first = false;
  for (const auto& f : froms) {
    std::string q = "SELECT o_orderkey, c_custkey FROM " + f[0] + ", " + f[1] + " WHERE " + where;
    auto ast = sql::parse_query(q, c);
    auto rs = canonicalize(execute(ast, db), ast.order_by);
    if (!have_first) {
      first = std::move(rs);
      have_first = true;
    } else {
      CHECK(!compare(first, rs).has_value());
    }
  }
  // 3-table random-ish permutations
  std::vector<std::vector<std::string>> froms3 = {
      {"customer", "orders", "lineitem"},
      {"lineitem", "orders", "customer"},
      {"orders", "lineitem", "customer"},
  };
  std::string where3 = "o_custkey = c_custkey AND l_orderkey = o_orderkey AND l_quantity < 10";
  have_first = false;
  for (const auto& f : froms3) {
    std::string q = "SELECT count(*) AS n FROM " + f[0] + ", " + f[1] + ", " + f[2] + " WHERE " + where3;
    auto ast = sql::parse_query(q, c);
    auto rs = canonicalize(execute(ast, db), ast.order_by);
    if (!have_first) {
      first = std::move(rs);
      have_first = true;
    } else {
      CHECK(!compare(first, rs).has_value());
    }
  }
}

TEST_CASE("oracle TSV serialization uses \\N for null") {
  oracle::ResultSet rs;
  rs.names = {"a", "b"};
  rs.types = {ColumnType::int64(), ColumnType::varchar()};
  rs.rows = {{Value::from_int(1), Value::null()}};
  CHECK(oracle::to_tsv(rs) == "a\tb\n1\t\\N\n");
}

TEST_CASE("unsupported features are rejected, not silently misevaluated") {
  auto c = tiny_contract();
  auto db = tiny_db();
  // LIKE patterns outside the %infix% form are rejected at evaluation time.
  auto ast = sql::parse_query("SELECT count(*) AS n FROM t WHERE s LIKE 'prefix%'", c);
  CHECK_THROWS_AS(execute(ast, db), UnsupportedFeature);
}
