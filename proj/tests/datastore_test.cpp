#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_set>

#include "bespoke/datastore.hpp"
#include "bespoke/errors.hpp"
#include "bespoke/micro_tpch.hpp"
#include "test_support.hpp"

using namespace bespoke;
namespace fs = std::filesystem;

namespace {

std::vector<contract::TableSchema> toy_schema() {
  contract::TableSchema parent;
  parent.name = "parent";
  parent.columns = {{"id", ColumnType::int64(), false}, {"name", ColumnType::varchar(), false}};
  parent.primary_key = "id";
  contract::TableSchema child;
  child.name = "child";
  child.columns = {{"pid", ColumnType::int64(), false}, {"v", ColumnType::decimal(2), true}};
  child.foreign_keys = {{"pid", "parent", "id"}};
  return {parent, child};
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

}  // namespace

TEST_CASE("csv loader: header-only file yields an empty relation") {
  auto dir = testsup::temp_dir("csv_empty");
  write_file(dir + "/parent.csv", "id,name\n");
  write_file(dir + "/child.csv", "pid,v\n");
  auto loaded = datastore::load_dataset(dir, toy_schema());
  CHECK(loaded.relations.at("parent").row_count() == 0);
  CHECK(loaded.header.tables.at("parent").row_count == 0);
}

TEST_CASE("csv loader: type errors carry table, column and row") {
  auto dir = testsup::temp_dir("csv_bad");
  write_file(dir + "/parent.csv", "id,name\n1,ok\nabc,bad\n");
  write_file(dir + "/child.csv", "pid,v\n");
  try {
    datastore::load_dataset(dir, toy_schema());
    FAIL("expected TypeError");
  } catch (const TypeError& e) {
    CHECK(e.table == "parent");
    CHECK(e.column == "id");
    CHECK(e.row == 2);
  }
}

TEST_CASE("csv loader: quoting, nulls, missing files, strict FK") {
  auto dir = testsup::temp_dir("csv_quote");
  write_file(dir + "/parent.csv", "id,name\n1,\"a,b\"\"c\"\n2,plain\n");
  write_file(dir + "/child.csv", "pid,v\n1,12.34\n2,\n");
  auto loaded = datastore::load_dataset(dir, toy_schema(), /*strict_fk=*/true);
  CHECK(loaded.relations.at("parent").columns[1].strs[0] == "a,b\"c");
  CHECK(loaded.relations.at("child").columns[1].valid[1] == 0);
  CHECK(loaded.relations.at("child").columns[1].ints[0] == 1234);

  fs::remove(dir + "/child.csv");
  CHECK_THROWS_AS(datastore::load_dataset(dir, toy_schema()), MissingFile);

  write_file(dir + "/child.csv", "pid,v\n99,1.00\n");
  CHECK_THROWS_AS(datastore::load_dataset(dir, toy_schema(), true), ForeignKeyViolation);
}

TEST_CASE("load determinism: loading the same files twice is structurally equal") {
  auto dir = testsup::temp_dir("csv_det");
  workloads::write_micro_tpch(dir, 0.02, 5);
  auto schema = workloads::micro_tpch_contract("data").tables;
  auto a = datastore::load_dataset(dir + "/data", schema);
  auto b = datastore::load_dataset(dir + "/data", schema);
  for (const auto& [name, rel] : a.relations) CHECK(testsup::rows_multiset_equal(rel, b.relations.at(name)));
}

TEST_CASE("stats match an independent one-pass scan of the CSVs") {
  auto dir = testsup::temp_dir("stats");
  workloads::write_micro_tpch(dir, 0.05, 42);
  auto contract = workloads::micro_tpch_contract("data");
  auto loaded = datastore::load_dataset(dir + "/data", contract.tables);

  // Independent scan of lineitem.csv with the raw reader.
  auto raw = testsup::RawCsv::read(dir + "/data/lineitem.csv");
  int qcol = raw.col("l_quantity");
  REQUIRE(qcol >= 0);
  int64_t mn = 0, mx = 0;
  bool any = false;
  std::set<long long> distinct;
  for (const auto& row : raw.rows) {
    long long v = std::stoll(row[size_t(qcol)]);
    distinct.insert(v);
    if (!any || v < mn) mn = v;
    if (!any || v > mx) mx = v;
    any = true;
  }
  const auto& stats = *loaded.header.tables.at("lineitem").find("l_quantity");
  CHECK(stats.min.i == mn);
  CHECK(stats.max.i == mx);
  CHECK(stats.distinct_count == distinct.size());
  CHECK(mn >= 1);
  CHECK(mx <= 50);

  // o_orderdate distinct count, same treatment.
  auto raw_orders = testsup::RawCsv::read(dir + "/data/orders.csv");
  int dcol = raw_orders.col("o_orderdate");
  std::set<std::string> ddistinct;
  for (const auto& row : raw_orders.rows) ddistinct.insert(row[size_t(dcol)]);
  CHECK(loaded.header.tables.at("orders").find("o_orderdate")->distinct_count == ddistinct.size());
}

TEST_CASE("compute_stats basics") {
  Relation r;
  r.name = "x";
  r.schema = {{"a", ColumnType::int64(), true}};
  ColumnData c;
  c.type = ColumnType::int64();
  c.push(Value::from_int(1));
  c.push(Value::from_int(1));
  c.push(Value::from_int(2));
  r.columns.push_back(c);
  auto ts = datastore::compute_stats(r);
  CHECK(ts.columns[0].distinct_count == 2);
  CHECK(ts.columns[0].min.i == 1);
  CHECK(ts.columns[0].max.i == 2);
  CHECK(ts.columns[0].null_count == 0);

  Relation all_null;
  all_null.name = "y";
  all_null.schema = {{"a", ColumnType::int64(), true}};
  ColumnData cn;
  cn.type = ColumnType::int64();
  cn.push_null();
  cn.push_null();
  all_null.columns.push_back(cn);
  auto ts2 = datastore::compute_stats(all_null);
  CHECK(ts2.columns[0].null_count == 2);
  CHECK(!ts2.columns[0].has_minmax);
}

TEST_CASE("downscale: identity at factor 1.0") {
  auto db = workloads::generate_micro_tpch(0.02, 3);
  auto schema = workloads::micro_tpch_contract("data").tables;
  auto down = datastore::downscale(db, schema, 1.0, 9);
  for (const auto& [name, rel] : db) CHECK(testsup::rows_multiset_equal(rel, down.at(name)));
}

TEST_CASE("downscale: forced parent closure on a toy parent/child") {
  auto schema = toy_schema();
  RelationMap db;
  {
    Relation p;
    p.name = "parent";
    p.schema = schema[0].columns;
    ColumnData id, name;
    id.type = ColumnType::int64();
    name.type = ColumnType::varchar();
    for (int i = 1; i <= 3; ++i) {
      id.push(Value::from_int(i));
      name.push(Value::from_string("p" + std::to_string(i)));
    }
    p.columns = {id, name};
    db["parent"] = p;
    Relation ch;
    ch.name = "child";
    ch.schema = schema[1].columns;
    ColumnData pid, v;
    pid.type = ColumnType::int64();
    v.type = ColumnType::decimal(2);
    for (int ref : {1, 1, 3}) {
      pid.push(Value::from_int(ref));
      v.push(Value::from_decimal(100, 2));
    }
    ch.columns = {pid, v};
    db["child"] = ch;
  }
  // Whatever child row survives, its parent must be present.
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto down = datastore::downscale(db, schema, 0.34, seed);
    const auto& child = down.at("child");
    const auto& parent = down.at("parent");
    std::unordered_set<int64_t> parents;
    for (size_t r = 0; r < parent.row_count(); ++r) parents.insert(parent.columns[0].ints[r]);
    for (size_t r = 0; r < child.row_count(); ++r) CHECK(parents.count(child.columns[0].ints[r]) == 1);
  }
}

TEST_CASE("downscale: brute-force FK check on the micro workload at 0.25") {
  auto contract = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.05, 42);
  auto down = datastore::downscale(db, contract.tables, 0.25, 7);
  for (const auto& t : contract.tables) {
    for (const auto& fk : t.foreign_keys) {
      const auto& child = down.at(t.name);
      const auto& parent = down.at(fk.parent_table);
      int ccol = child.column_index(fk.column);
      int pcol = parent.column_index(fk.parent_column);
      std::unordered_set<int64_t> keys;
      for (size_t r = 0; r < parent.row_count(); ++r)
        if (parent.columns[size_t(pcol)].valid[r]) keys.insert(parent.columns[size_t(pcol)].ints[r]);
      size_t dangling = 0;
      for (size_t r = 0; r < child.row_count(); ++r)
        if (child.columns[size_t(ccol)].valid[r] && !keys.count(child.columns[size_t(ccol)].ints[r])) ++dangling;
      CHECK(dangling == 0);
    }
  }
}

TEST_CASE("downscale: monotone root-table row counts and determinism") {
  auto contract = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.05, 42);
  // Roots: tables nobody references.
  std::set<std::string> referenced;
  for (const auto& t : contract.tables)
    for (const auto& fk : t.foreign_keys) referenced.insert(fk.parent_table);

  auto d1 = datastore::downscale(db, contract.tables, 0.1, 5);
  auto d2 = datastore::downscale(db, contract.tables, 0.5, 5);
  auto d1_again = datastore::downscale(db, contract.tables, 0.1, 5);
  for (const auto& t : contract.tables) {
    if (referenced.count(t.name)) continue;
    CHECK(d1.at(t.name).row_count() <= d2.at(t.name).row_count());
    CHECK(d1.at(t.name).row_count() == d1_again.at(t.name).row_count());
  }
  for (const auto& [name, rel] : d1) CHECK(testsup::rows_multiset_equal(rel, d1_again.at(name)));
}

TEST_CASE("downscale: dangling input reference is reported") {
  auto schema = toy_schema();
  RelationMap db;
  Relation p;
  p.name = "parent";
  p.schema = schema[0].columns;
  ColumnData id, name;
  id.type = ColumnType::int64();
  name.type = ColumnType::varchar();
  id.push(Value::from_int(1));
  name.push(Value::from_string("p"));
  p.columns = {id, name};
  db["parent"] = p;
  Relation ch;
  ch.name = "child";
  ch.schema = schema[1].columns;
  ColumnData pid, v;
  pid.type = ColumnType::int64();
  v.type = ColumnType::decimal(2);
  pid.push(Value::from_int(42));  // no such parent
  v.push(Value::from_decimal(1, 2));
  ch.columns = {pid, v};
  db["child"] = ch;
  CHECK_THROWS_AS(datastore::downscale(db, schema, 1.0, 1), DanglingReference);
}
