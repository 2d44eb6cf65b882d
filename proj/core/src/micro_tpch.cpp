#include "bespoke/micro_tpch.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "bespoke/datastore.hpp"

namespace bespoke::workloads {

namespace {

const char* kRegions[5] = {"AFRICA", "AMERICA", "ASIA", "EUROPE", "MIDDLE EAST"};

const char* kNations[25] = {"ALGERIA", "ARGENTINA", "BRAZIL",  "CANADA",  "EGYPT",   "ETHIOPIA", "FRANCE",
                            "GERMANY", "INDIA",     "INDONESIA", "IRAN",   "IRAQ",    "JAPAN",    "JORDAN",
                            "KENYA",   "MOROCCO",   "MOZAMBIQUE", "PERU",  "CHINA",   "ROMANIA",  "SAUDI ARABIA",
                            "VIETNAM", "RUSSIA",    "UNITED KINGDOM", "UNITED STATES"};

const char* kSegments[5] = {"AUTOMOBILE", "BUILDING", "FURNITURE", "HOUSEHOLD", "MACHINERY"};

const char* kPriorities[5] = {"1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW"};

const char* kWords[] = {"carefully", "quickly",  "furiously", "slyly",    "blithely", "deposits", "requests",
                        "accounts",  "packages", "theodolites", "pinto",  "beans",    "foxes",    "ideas",
                        "instructions", "platelets", "asymptotes", "dolphins", "warthogs", "courts", "braids",
                        "sauternes", "sheaves",  "realms",    "dugouts"};

const char* kLikeWords[4] = {"special", "pending", "unusual", "express"};

struct Rng {
  std::mt19937_64 g;
  explicit Rng(uint64_t seed) : g(seed) {}
  int64_t range(int64_t lo, int64_t hi) { return lo + int64_t(g() % uint64_t(hi - lo + 1)); }
  double unit() { return double(g() >> 11) * (1.0 / 9007199254740992.0); }
};

std::string comment_text(Rng& rng, int min_words, int max_words, double like_word_prob) {
  std::string out;
  int n = int(rng.range(min_words, max_words));
  for (int i = 0; i < n; ++i) {
    if (!out.empty()) out += ' ';
    out += kWords[rng.range(0, int64_t(std::size(kWords)) - 1)];
  }
  if (rng.unit() < like_word_prob) {
    // splice one of the searchable words into the middle
    out += ' ';
    out += kLikeWords[rng.range(0, 3)];
    out += ' ';
    out += kWords[rng.range(0, int64_t(std::size(kWords)) - 1)];
  }
  return out;
}

ColumnData make_col(ColumnType t) {
  ColumnData c;
  c.type = t;
  return c;
}

}  // namespace

RelationMap generate_micro_tpch(double scale, uint64_t seed) {
  Rng rng(seed * 0x9e3779b97f4a7c15ull + 1);

  const size_t n_orders = std::max<size_t>(10, size_t(15000 * scale));
  const size_t n_customer = std::max<size_t>(5, size_t(1500 * scale));
  const size_t n_supplier = std::max<size_t>(5, size_t(100 * scale));
  const size_t n_part = std::max<size_t>(5, size_t(2000 * scale));

  RelationMap db;

  {
    Relation r;
    r.name = "region";
    r.schema = {{"r_regionkey", ColumnType::int64(), false}, {"r_name", ColumnType::varchar(), false},
                {"r_comment", ColumnType::varchar(), false}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (int i = 0; i < 5; ++i) {
      r.columns[0].push(Value::from_int(i));
      r.columns[1].push(Value::from_string(kRegions[i]));
      r.columns[2].push(Value::from_string(comment_text(rng, 3, 8, 0)));
    }
    db["region"] = std::move(r);
  }
  {
    Relation r;
    r.name = "nation";
    r.schema = {{"n_nationkey", ColumnType::int64(), false},
                {"n_name", ColumnType::varchar(), false},
                {"n_regionkey", ColumnType::int64(), false},
                {"n_comment", ColumnType::varchar(), false}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (int i = 0; i < 25; ++i) {
      r.columns[0].push(Value::from_int(i));
      r.columns[1].push(Value::from_string(kNations[i]));
      r.columns[2].push(Value::from_int(i % 5));
      r.columns[3].push(Value::from_string(comment_text(rng, 3, 8, 0)));
    }
    db["nation"] = std::move(r);
  }
  {
    Relation r;
    r.name = "supplier";
    r.schema = {{"s_suppkey", ColumnType::int64(), false},
                {"s_name", ColumnType::varchar(), false},
                {"s_nationkey", ColumnType::int64(), false},
                {"s_acctbal", ColumnType::decimal(2), false}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (size_t i = 1; i <= n_supplier; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "Supplier#%09zu", i);
      r.columns[0].push(Value::from_int(int64_t(i)));
      r.columns[1].push(Value::from_string(name));
      r.columns[2].push(Value::from_int(rng.range(0, 24)));
      r.columns[3].push(Value::from_decimal(rng.range(-99999, 999999), 2));
    }
    db["supplier"] = std::move(r);
  }
  {
    Relation r;
    r.name = "customer";
    r.schema = {{"c_custkey", ColumnType::int64(), false},
                {"c_name", ColumnType::varchar(), false},
                {"c_nationkey", ColumnType::int64(), false},
                {"c_mktsegment", ColumnType::varchar(), false},
                {"c_acctbal", ColumnType::decimal(2), false}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (size_t i = 1; i <= n_customer; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "Customer#%09zu", i);
      r.columns[0].push(Value::from_int(int64_t(i)));
      r.columns[1].push(Value::from_string(name));
      r.columns[2].push(Value::from_int(rng.range(0, 24)));
      r.columns[3].push(Value::from_string(kSegments[rng.range(0, 4)]));
      r.columns[4].push(Value::from_decimal(rng.range(-99999, 999999), 2));
    }
    db["customer"] = std::move(r);
  }
  {
    Relation r;
    r.name = "part";
    r.schema = {{"p_partkey", ColumnType::int64(), false},
                {"p_name", ColumnType::varchar(), false},
                {"p_brand", ColumnType::varchar(), false},
                {"p_size", ColumnType::int64(), false},
                {"p_retailprice", ColumnType::decimal(2), false}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (size_t i = 1; i <= n_part; ++i) {
      char brand[16];
      std::snprintf(brand, sizeof brand, "Brand#%lld%lld", (long long)rng.range(1, 5), (long long)rng.range(1, 5));
      r.columns[0].push(Value::from_int(int64_t(i)));
      r.columns[1].push(Value::from_string(comment_text(rng, 2, 4, 0)));
      r.columns[2].push(Value::from_string(brand));
      r.columns[3].push(Value::from_int(rng.range(1, 50)));
      r.columns[4].push(Value::from_decimal(rng.range(90000, 200000), 2));
    }
    db["part"] = std::move(r);
  }
  {
    Relation r;
    r.name = "partsupp";
    r.schema = {{"ps_partkey", ColumnType::int64(), false},
                {"ps_suppkey", ColumnType::int64(), false},
                {"ps_availqty", ColumnType::int64(), false},
                {"ps_supplycost", ColumnType::decimal(2), false}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (size_t p = 1; p <= n_part; ++p) {
      for (int k = 0; k < 4; ++k) {
        r.columns[0].push(Value::from_int(int64_t(p)));
        r.columns[1].push(Value::from_int(int64_t((p + size_t(k) * (n_supplier / 4 + 1)) % n_supplier + 1)));
        r.columns[2].push(Value::from_int(rng.range(1, 9999)));
        r.columns[3].push(Value::from_decimal(rng.range(100, 100000), 2));
      }
    }
    db["partsupp"] = std::move(r);
  }

  const int32_t date_lo = days_from_civil(1992, 1, 1);
  const int32_t date_hi = days_from_civil(1998, 8, 2);

  std::vector<int32_t> order_dates(n_orders);
  {
    Relation r;
    r.name = "orders";
    r.schema = {{"o_orderkey", ColumnType::int64(), false},
                {"o_custkey", ColumnType::int64(), false},
                {"o_orderstatus", ColumnType::varchar(), false},
                {"o_totalprice", ColumnType::decimal(2), false},
                {"o_orderdate", ColumnType::date(), false},
                {"o_orderpriority", ColumnType::varchar(), false},
                {"o_comment", ColumnType::varchar(), false}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (size_t i = 1; i <= n_orders; ++i) {
      int32_t d = int32_t(rng.range(date_lo, date_hi));
      order_dates[i - 1] = d;
      const char* status[] = {"F", "O", "P"};
      r.columns[0].push(Value::from_int(int64_t(i)));
      r.columns[1].push(Value::from_int(rng.range(1, int64_t(n_customer))));
      r.columns[2].push(Value::from_string(status[rng.range(0, 2)]));
      r.columns[3].push(Value::from_decimal(rng.range(90000, 50000000), 2));
      r.columns[4].push(Value::from_date(d));
      r.columns[5].push(Value::from_string(kPriorities[rng.range(0, 4)]));
      r.columns[6].push(Value::from_string(comment_text(rng, 4, 12, 0.08)));
    }
    db["orders"] = std::move(r);
  }
  {
    Relation r;
    r.name = "lineitem";
    r.schema = {{"l_orderkey", ColumnType::int64(), false},
                {"l_partkey", ColumnType::int64(), false},
                {"l_suppkey", ColumnType::int64(), false},
                {"l_linenumber", ColumnType::int64(), false},
                {"l_quantity", ColumnType::int64(), false},
                {"l_extendedprice", ColumnType::decimal(2), false},
                {"l_discount", ColumnType::decimal(2), false},
                {"l_tax", ColumnType::decimal(2), false},
                {"l_returnflag", ColumnType::varchar(), false},
                {"l_linestatus", ColumnType::varchar(), false},
                {"l_shipdate", ColumnType::date(), false},
                {"l_commitdate", ColumnType::date(), false},
                {"l_receiptdate", ColumnType::date(), false},
                {"l_comment", ColumnType::varchar(), true}};
    for (const auto& s : r.schema) r.columns.push_back(make_col(s.type));
    for (size_t o = 1; o <= n_orders; ++o) {
      int lines = int(rng.range(1, 7));
      for (int ln = 1; ln <= lines; ++ln) {
        int64_t qty = rng.range(1, 50);
        int64_t unit_price = rng.range(1000, 100000);  // 10.00 .. 1000.00
        int32_t od = order_dates[o - 1];
        int32_t ship = od + int32_t(rng.range(1, 121));
        const char* rf[] = {"R", "A", "N"};
        const char* ls[] = {"O", "F"};
        r.columns[0].push(Value::from_int(int64_t(o)));
        r.columns[1].push(Value::from_int(rng.range(1, int64_t(n_part))));
        r.columns[2].push(Value::from_int(rng.range(1, int64_t(n_supplier))));
        r.columns[3].push(Value::from_int(ln));
        r.columns[4].push(Value::from_int(qty));
        r.columns[5].push(Value::from_decimal(qty * unit_price, 2));
        r.columns[6].push(Value::from_decimal(rng.range(0, 10), 2));
        r.columns[7].push(Value::from_decimal(rng.range(0, 8), 2));
        r.columns[8].push(Value::from_string(rf[rng.range(0, 2)]));
        r.columns[9].push(Value::from_string(ls[rng.range(0, 1)]));
        r.columns[10].push(Value::from_date(ship));
        r.columns[11].push(Value::from_date(od + int32_t(rng.range(30, 90))));
        r.columns[12].push(Value::from_date(ship + int32_t(rng.range(1, 30))));
        if (rng.unit() < 0.02)
          r.columns[13].push_null();
        else
          r.columns[13].push(Value::from_string(comment_text(rng, 2, 6, 0.02)));
      }
    }
    db["lineitem"] = std::move(r);
  }
  return db;
}

std::string micro_tpch_contract_text(const std::string& dataset_path) {
  std::string t;
  t += "# Micro TPC-H-like workload: 8 tables, 5 parameterized templates.\n";
  t += "[table region]\n"
       "col r_regionkey int64\n"
       "col r_name varchar\n"
       "col r_comment varchar\n"
       "pk r_regionkey\n\n";
  t += "[table nation]\n"
       "col n_nationkey int64\n"
       "col n_name varchar\n"
       "col n_regionkey int64\n"
       "col n_comment varchar\n"
       "pk n_nationkey\n"
       "fk n_regionkey -> region.r_regionkey\n\n";
  t += "[table supplier]\n"
       "col s_suppkey int64\n"
       "col s_name varchar\n"
       "col s_nationkey int64\n"
       "col s_acctbal decimal(2)\n"
       "pk s_suppkey\n"
       "fk s_nationkey -> nation.n_nationkey\n\n";
  t += "[table customer]\n"
       "col c_custkey int64\n"
       "col c_name varchar\n"
       "col c_nationkey int64\n"
       "col c_mktsegment varchar\n"
       "col c_acctbal decimal(2)\n"
       "pk c_custkey\n"
       "fk c_nationkey -> nation.n_nationkey\n\n";
  t += "[table part]\n"
       "col p_partkey int64\n"
       "col p_name varchar\n"
       "col p_brand varchar\n"
       "col p_size int64\n"
       "col p_retailprice decimal(2)\n"
       "pk p_partkey\n\n";
  t += "[table partsupp]\n"
       "col ps_partkey int64\n"
       "col ps_suppkey int64\n"
       "col ps_availqty int64\n"
       "col ps_supplycost decimal(2)\n"
       "fk ps_partkey -> part.p_partkey\n"
       "fk ps_suppkey -> supplier.s_suppkey\n\n";
  t += "[table orders]\n"
       "col o_orderkey int64\n"
       "col o_custkey int64\n"
       "col o_orderstatus varchar\n"
       "col o_totalprice decimal(2)\n"
       "col o_orderdate date\n"
       "col o_orderpriority varchar\n"
       "col o_comment varchar\n"
       "pk o_orderkey\n"
       "fk o_custkey -> customer.c_custkey\n\n";
  t += "[table lineitem]\n"
       "col l_orderkey int64\n"
       "col l_partkey int64\n"
       "col l_suppkey int64\n"
       "col l_linenumber int64\n"
       "col l_quantity int64\n"
       "col l_extendedprice decimal(2)\n"
       "col l_discount decimal(2)\n"
       "col l_tax decimal(2)\n"
       "col l_returnflag varchar\n"
       "col l_linestatus varchar\n"
       "col l_shipdate date\n"
       "col l_commitdate date\n"
       "col l_receiptdate date\n"
       "col l_comment varchar nullable\n"
       "fk l_orderkey -> orders.o_orderkey\n"
       "fk l_partkey -> part.p_partkey\n"
       "fk l_suppkey -> supplier.s_suppkey\n\n";

  t += "[template q_range]\n"
       "sql = \"SELECT sum(l_extendedprice * l_discount) AS revenue FROM lineitem "
       "WHERE l_shipdate BETWEEN :d1 AND :d2 AND l_discount BETWEEN :dlo AND :dhi AND l_quantity < :qty\"\n"
       "param d1 date_range(1992-06-01, 1996-12-31)\n"
       "param d2 date_range(1997-01-01, 1998-09-01)\n"
       "param dlo decimal_range(0.00, 0.04, 2)\n"
       "param dhi decimal_range(0.05, 0.10, 2)\n"
       "param qty int_range(20, 50)\n\n";

  t += "[template q_join]\n"
       "sql = \"SELECT n_name, sum(l_extendedprice * (1 - l_discount)) AS revenue "
       "FROM customer, orders, lineitem, supplier, nation, region "
       "WHERE c_custkey = o_custkey AND l_orderkey = o_orderkey AND l_suppkey = s_suppkey "
       "AND c_nationkey = s_nationkey AND s_nationkey = n_nationkey AND n_regionkey = r_regionkey "
       "AND r_name = :region AND o_orderdate >= :d1 AND o_orderdate < :d2 "
       "GROUP BY n_name ORDER BY revenue DESC\"\n"
       "param region choice('AFRICA', 'AMERICA', 'ASIA', 'EUROPE', 'MIDDLE EAST')\n"
       "param d1 date_range(1992-06-01, 1996-12-31)\n"
       "param d2 date_range(1997-01-01, 1998-09-01)\n\n";

  t += "[template q_semi]\n"
       "sql = \"SELECT o_orderpriority, count(*) AS order_count FROM orders "
       "WHERE o_orderdate >= :d1 AND o_orderdate < :d2 "
       "AND EXISTS (SELECT 1 FROM lineitem WHERE l_orderkey = o_orderkey AND l_commitdate < l_receiptdate) "
       "GROUP BY o_orderpriority ORDER BY o_orderpriority\"\n"
       "param d1 date_range(1992-06-01, 1996-12-31)\n"
       "param d2 date_range(1997-01-01, 1998-09-01)\n\n";

  t += "[template q_like]\n"
       "sql = \"SELECT count(*) AS matching FROM orders, customer "
       "WHERE o_custkey = c_custkey AND c_mktsegment = :seg AND o_orderdate >= :d3 AND o_comment LIKE :pat\"\n"
       "param seg choice('AUTOMOBILE', 'BUILDING', 'FURNITURE', 'HOUSEHOLD', 'MACHINERY')\n"
       "param d3 date_range(1992-01-01, 1996-12-31)\n"
       "param pat choice('%special%', '%pending%', '%unusual%', '%express%')\n\n";

  t += "[template q_group]\n"
       "sql = \"SELECT l_returnflag, l_linestatus, sum(l_quantity) AS sum_qty, "
       "sum(l_extendedprice) AS sum_base, sum(l_extendedprice * (1 - l_discount)) AS sum_disc, "
       "avg(l_quantity) AS avg_qty, count(*) AS count_order FROM lineitem "
       "WHERE l_shipdate <= :d GROUP BY l_returnflag, l_linestatus ORDER BY l_returnflag, l_linestatus\"\n"
       "param d date_range(1995-01-01, 1998-12-01)\n\n";

  t += "[dataset]\npath = " + dataset_path + "\n\n";
  t += "[objective]\ntotal-runtime\n\n";
  t += "[seed]\n42\n";
  return t;
}

contract::Contract micro_tpch_contract(const std::string& dataset_path) {
  return contract::parse_contract(micro_tpch_contract_text(dataset_path));
}

void write_micro_tpch(const std::string& dir, double scale, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "data");
  auto db = generate_micro_tpch(scale, seed);
  datastore::write_dataset_csv(db, (fs::path(dir) / "data").string());
  std::ofstream out(fs::path(dir) / "contract.bdl");
  out << micro_tpch_contract_text("data");
}

}  // namespace bespoke::workloads
