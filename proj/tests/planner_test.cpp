#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "bespoke/datastore.hpp"
#include "bespoke/errors.hpp"
#include "bespoke/micro_tpch.hpp"
#include "bespoke/store.hpp"
#include "test_support.hpp"

using namespace bespoke;
using namespace bespoke::planner;

namespace {

contract::Contract micro() { return workloads::micro_tpch_contract("data"); }

// A schema/contract wrapping one random relation so the generic round-trip
// property can run under arbitrary encodings.
contract::Contract wrap_contract(const Relation& r) {
  contract::Contract c;
  contract::TableSchema t;
  t.name = r.name;
  t.columns = r.schema;
  t.primary_key = "k";
  c.tables.push_back(t);
  c.dataset_path = "data";
  return c;
}

}  // namespace

TEST_CASE("plan rules: dictionary threshold, compact date, directory, masks") {
  auto c = micro();
  auto db = workloads::generate_micro_tpch(0.05, 42);
  auto stats = datastore::compute_header(db);
  StoragePlan plan = plan_storage(c, stats);

  // 3-5 distinct strings over hundreds of rows -> dictionary.
  CHECK(plan.find_table("orders")->encoding_of("o_orderpriority") == Encoding::Dictionary);
  CHECK(plan.find_table("customer")->encoding_of("c_mktsegment") == Encoding::Dictionary);
  // Near-unique strings stay in the arena.
  CHECK(plan.find_table("orders")->encoding_of("o_comment") == Encoding::StringArena);
  // Date column spanning ~2400 days -> 16-bit compact dates.
  CHECK(plan.find_table("orders")->encoding_of("o_orderdate") == Encoding::CompactDate);
  CHECK(plan.find_table("lineitem")->encoding_of("l_shipdate") == Encoding::CompactDate);
  // Decimals are scaled integers.
  CHECK(plan.find_table("lineitem")->encoding_of("l_extendedprice") == Encoding::ScaledInteger);
  // lineitem sorted by its most frequent range/join key: the order key.
  CHECK(plan.find_table("lineitem")->sorted_by("l_orderkey"));
  // orders sorted by the date column driving three range predicates.
  CHECK(plan.find_table("orders")->sorted_by("o_orderdate"));
  // Sorted child FK -> parent pk yields a range directory.
  const auto* dir = plan.find_directory("orders", "lineitem");
  REQUIRE(dir != nullptr);
  CHECK(dir->column == "l_orderkey");
  // LIKE-only comment column carries both char masks.
  CHECK(plan.has_support(SupportStructure::Kind::CharMaskAlpha, "orders", "o_comment"));
  CHECK(plan.has_support(SupportStructure::Kind::CharMaskBigram, "orders", "o_comment"));
  // Join keys of unsorted tables get hash indexes.
  CHECK(plan.has_support(SupportStructure::Kind::HashIndex, "orders", "o_orderkey"));
  // Shared arithmetic subexpression appears as a derived column.
  CHECK(!plan.derived.empty());
  bool has_rev = false;
  for (const auto& d : plan.derived) has_rev |= d.expression.find("l_extendedprice") != std::string::npos;
  CHECK(has_rev);
}

TEST_CASE("plan is a pure function of contract and stats") {
  auto c = micro();
  auto db = workloads::generate_micro_tpch(0.03, 4);
  auto stats = datastore::compute_header(db);
  CHECK(plan_storage(c, stats).to_text() == plan_storage(c, stats).to_text());
}

TEST_CASE("plan file round-trips through text") {
  auto c = micro();
  auto db = workloads::generate_micro_tpch(0.03, 4);
  auto plan = plan_storage(c, datastore::compute_header(db));
  auto parsed = StoragePlan::from_text(plan.to_text());
  CHECK(parsed.to_text() == plan.to_text());
}

TEST_CASE("build_store encoding basics") {
  Relation r;
  r.name = "t";
  r.schema = {{"code", ColumnType::varchar(), false},
              {"price", ColumnType::decimal(2), false},
              {"v", ColumnType::int64(), false}};
  for (const auto& cs : r.schema) {
    ColumnData c;
    c.type = cs.type;
    r.columns.push_back(c);
  }
  for (const char* s : {"DE", "FR", "DE"}) r.columns[0].push(Value::from_string(s));
  for (int64_t p : {1234, 5678, 99}) r.columns[1].push(Value::from_decimal(p, 2));
  for (int64_t v : {1, 2, 3}) r.columns[2].push(Value::from_int(v));

  contract::Contract c = wrap_contract(r);
  c.tables[0].primary_key = "";
  StoragePlan plan;
  TablePlan tp;
  tp.table = "t";
  tp.encodings = {{"code", Encoding::Dictionary}, {"price", Encoding::ScaledInteger}, {"v", Encoding::Plain}};
  plan.tables.push_back(tp);
  plan.supports.push_back({SupportStructure::Kind::ZoneMap, "t", "v", "", 2});

  RelationMap db;
  db["t"] = r;
  auto store = build_store(plan, db, c);
  const auto& st = store.tables.at("t");
  // dictionary ["DE","FR"], codes [0,1,0]
  REQUIRE(st.columns[0].dict_str.size() == 2);
  CHECK(st.columns[0].dict_str[0] == "DE");
  CHECK(st.columns[0].dict_str[1] == "FR");
  CHECK(st.columns[0].codes == std::vector<uint32_t>{0, 1, 0});
  // 12.34 stored as 1234
  CHECK(st.columns[1].i64[0] == 1234);
  // zone map shard 2 over [1,2],[3]
  const auto* z = st.zone_map("v");
  REQUIRE(z);
  CHECK(z->mins == std::vector<int64_t>{1, 3});
  CHECK(z->maxs == std::vector<int64_t>{2, 3});
}

TEST_CASE("zone map shard 4 over sorted 1..8") {
  Relation r;
  r.name = "t";
  r.schema = {{"k", ColumnType::int64(), false}, {"v", ColumnType::int64(), false}};
  ColumnData k, v;
  k.type = v.type = ColumnType::int64();
  for (int i = 1; i <= 8; ++i) {
    k.push(Value::from_int(i));
    v.push(Value::from_int(i));
  }
  r.columns = {k, v};
  contract::Contract c;
  contract::TableSchema ts;
  ts.name = "t";
  ts.columns = r.schema;
  c.tables.push_back(ts);
  StoragePlan plan;
  plan.tables.push_back({"t", {"v"}, {{"k", Encoding::Plain}, {"v", Encoding::Plain}}});
  plan.supports.push_back({SupportStructure::Kind::ZoneMap, "t", "v", "", 4});
  RelationMap db;
  db["t"] = r;
  auto store = build_store(plan, db, c);
  const auto* z = store.tables.at("t").zone_map("v");
  CHECK(z->mins == std::vector<int64_t>{1, 5});
  CHECK(z->maxs == std::vector<int64_t>{4, 8});
}

TEST_CASE("zone map soundness on random data") {
  testsup::RelationGen gen(99);
  auto r = gen.random_relation("t", 3000, false);
  contract::Contract c = wrap_contract(r);
  StoragePlan plan;
  plan.tables.push_back({"t", {}, {}});
  for (const auto& cs : r.schema) plan.tables[0].encodings.push_back({cs.name, Encoding::Plain});
  plan.tables[0].encodings[2].encoding = Encoding::ScaledInteger;
  plan.tables[0].encodings[4].encoding = Encoding::StringArena;
  plan.tables[0].encodings[5].encoding = Encoding::StringArena;
  plan.supports.push_back({SupportStructure::Kind::ZoneMap, "t", "small", "", 128});
  RelationMap db;
  db["t"] = r;
  auto store = build_store(plan, db, c);
  const auto& st = store.tables.at("t");
  const auto* z = st.zone_map("small");
  int small = st.column_index("small");
  for (size_t row = 0; row < st.rows; ++row) {
    size_t shard = row / z->shard_size;
    int64_t v = st.columns[size_t(small)].value_i64(row);
    CHECK(v >= z->mins[shard]);
    CHECK(v <= z->maxs[shard]);
  }
}

TEST_CASE("range directory enumerates each child row exactly once") {
  auto c = micro();
  auto db = workloads::generate_micro_tpch(0.03, 8);
  auto plan = plan_storage(c, datastore::compute_header(db));
  auto store = build_store(plan, db, c);
  const auto& li = store.tables.at("lineitem");
  const auto* dir = li.directory_from("orders");
  REQUIRE(dir);
  std::vector<int> seen(li.rows, 0);
  for (size_t p = 0; p < store.tables.at("orders").rows; ++p)
    for (uint32_t r = dir->start[p]; r < dir->end[p]; ++r) ++seen[r];
  // Every lineitem row belongs to exactly one order's range.
  for (size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == 1);
}

TEST_CASE("dictionary decode(encode(v)) is the identity") {
  testsup::RelationGen gen(5);
  auto r = gen.random_relation("t", 500);
  contract::Contract c = wrap_contract(r);
  StoragePlan plan;
  plan.tables.push_back({"t", {}, {}});
  for (const auto& cs : r.schema)
    plan.tables[0].encodings.push_back(
        {cs.name, cs.type.kind == TypeKind::Varchar ? Encoding::Dictionary : Encoding::Plain});
  plan.tables[0].encodings[1].encoding = Encoding::Dictionary;  // low-cardinality ints too
  RelationMap db;
  db["t"] = r;
  auto store = build_store(plan, db, c);
  const auto& st = store.tables.at("t");
  for (size_t col = 0; col < r.columns.size(); ++col) {
    for (size_t row = 0; row < st.rows; ++row) {
      Value orig = r.columns[col].get(st.logical_of[row]);
      CHECK(st.columns[col].value(row) == orig);
    }
  }
}

TEST_CASE("compact date overflow is reported as EncodingOverflow") {
  Relation r;
  r.name = "t";
  r.schema = {{"d", ColumnType::date(), false}};
  ColumnData d;
  d.type = ColumnType::date();
  d.push(Value::from_date(0));
  d.push(Value::from_date(70000));  // > 16-bit day span
  r.columns = {d};
  contract::Contract c;
  contract::TableSchema ts;
  ts.name = "t";
  ts.columns = r.schema;
  c.tables.push_back(ts);
  StoragePlan plan;
  plan.tables.push_back({"t", {}, {{"d", Encoding::CompactDate}}});
  RelationMap db;
  db["t"] = r;
  CHECK_THROWS_AS(build_store(plan, db, c), EncodingOverflow);
}

TEST_CASE("materialize_flat: empty store, every encoding, sort permutation") {
  // Empty relations round trip.
  Relation empty;
  empty.name = "t";
  empty.schema = {{"k", ColumnType::int64(), false}, {"s", ColumnType::varchar(), false}};
  ColumnData k, s;
  k.type = ColumnType::int64();
  s.type = ColumnType::varchar();
  empty.columns = {k, s};
  contract::Contract c;
  contract::TableSchema ts;
  ts.name = "t";
  ts.columns = empty.schema;
  c.tables.push_back(ts);
  StoragePlan plan;
  plan.tables.push_back({"t", {}, {{"k", Encoding::Plain}, {"s", Encoding::StringArena}}});
  RelationMap db;
  db["t"] = empty;
  auto store = build_store(plan, db, c);
  auto flat = materialize_flat(store);
  CHECK(flat.at("t").row_count() == 0);

  // Sorted store: multiset-equal with order restored.
  testsup::RelationGen gen(7);
  auto r = gen.random_relation("t", 200);
  c.tables[0].columns = r.schema;
  StoragePlan plan2;
  plan2.tables.push_back({"t",
                          {"small"},
                          {{"k", Encoding::Plain},
                           {"small", Encoding::Dictionary},
                           {"dec", Encoding::ScaledInteger},
                           {"d", Encoding::CompactDate},
                           {"s", Encoding::StringArena},
                           {"tag", Encoding::Dictionary}}});
  RelationMap db2;
  db2["t"] = r;
  auto store2 = build_store(plan2, db2, c);
  auto flat2 = materialize_flat(store2);
  CHECK(testsup::rows_multiset_equal(flat2.at("t"), r));
  // Ingestion order is restored exactly, not just as a multiset.
  for (size_t i = 0; i < r.row_count(); ++i)
    for (size_t col = 0; col < r.columns.size(); ++col)
      CHECK(flat2.at("t").columns[col].get(i) == r.columns[col].get(i));
}

TEST_CASE("round-trip property: 120 random relations under all encodings") {
  for (uint64_t seed = 1; seed <= 120; ++seed) {
    testsup::RelationGen gen(seed);
    auto r = gen.random_relation("t", 1 + seed % 97);
    contract::Contract c = wrap_contract(r);
    StoragePlan plan;
    std::vector<std::string> sort = seed % 3 == 0 ? std::vector<std::string>{"d"}
                                   : seed % 3 == 1 ? std::vector<std::string>{"tag"}
                                                   : std::vector<std::string>{};
    plan.tables.push_back({"t",
                           sort,
                           {{"k", Encoding::Plain},
                            {"small", seed % 2 ? Encoding::Dictionary : Encoding::Plain},
                            {"dec", Encoding::ScaledInteger},
                            {"d", Encoding::CompactDate},
                            {"s", seed % 2 ? Encoding::StringArena : Encoding::Dictionary},
                            {"tag", Encoding::Dictionary}}});
    RelationMap db;
    db["t"] = r;
    auto flat = materialize_flat(build_store(plan, db, c));
    CHECK(testsup::rows_multiset_equal(flat.at("t"), r));
  }
}

TEST_CASE("char masks: forced accept/reject and no false negatives") {
  CHECK((char_mask_of("ab", false) & (1ull << ('z' - 'a'))) == 0);  // 'z' unset for "ab"
  uint64_t needle_zz = char_mask_of("zz", false);
  uint64_t row_ab = char_mask_of("ab", false);
  CHECK((needle_zz & ~row_ab) != 0);  // prefilter rejects
  uint64_t needle_ab = char_mask_of("ab", false);
  CHECK((needle_ab & ~row_ab) == 0);  // prefilter passes

  // 1000 random string/needle pairs: a true substring is never rejected.
  std::mt19937_64 rng(424242);
  auto rand_str = [&](size_t maxlen) {
    static const char* alpha = "abcdefghijklmnopqrstuvwxyz 0123456789";
    size_t n = rng() % maxlen;
    std::string s;
    for (size_t i = 0; i < n; ++i) s += alpha[rng() % 37];
    return s;
  };
  for (int i = 0; i < 1000; ++i) {
    std::string row = rand_str(40);
    std::string needle;
    if (!row.empty() && rng() % 2) {
      size_t a = rng() % row.size();
      size_t len = 1 + rng() % std::min<size_t>(6, row.size() - a);
      needle = row.substr(a, len);
    } else {
      needle = rand_str(5);
    }
    bool truly_contains = row.find(needle) != std::string::npos;
    bool alpha_pass = (char_mask_of(needle, false) & ~char_mask_of(row, false)) == 0;
    bool bigram_pass = (char_mask_of(needle, true) & ~char_mask_of(row, true)) == 0;
    if (truly_contains) {
      CHECK(alpha_pass);
      CHECK(bigram_pass);
    }
  }
}
