#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "bespoke/errors.hpp"
#include "bespoke/kernel_emit.hpp"
#include "bespoke/kernelgen.hpp"
#include "bespoke/micro_tpch.hpp"
#include "strategy_harness.hpp"

using namespace bespoke;
using namespace bespoke::kernelgen;
using testsup::MiniWorkload;

namespace {

KernelSpec spec_of(MiniWorkload& w, const std::string& query, const std::string& id = "q") {
  return basic_spec(w.ast(query), id);
}

contract::ParamBinding bx(int64_t x) { return {{"x", Value::from_int(x)}}; }

}  // namespace

TEST_CASE("join operator equivalence: hash, index nested loop, sort merge") {
  const char* q = "SELECT d_tag, count(*) AS n, sum(f_dec) AS s FROM d, f WHERE f_key = d_key AND f_a < :x "
                  "GROUP BY d_tag ORDER BY d_tag";
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    for (const char* sort : {"f_key", "f_a"}) {
      auto w = MiniWorkload::make(seed, 20 + seed, 300, sort);
      for (auto op : {JoinOp::HashJoin, JoinOp::IndexNestedLoop}) {
        // Driver d, probe f: directory (f_key sort) or hash index.
        KernelSpec s = spec_of(w, q);
        s.join_order = {0, 1};
        s.join_ops = {op};
        CHECK(w.check(q, s, bx(int64_t(seed * 7 % 100))) == "");
      }
      {
        // Probe d by key: sorted-unique lookup or per-run hash build.
        KernelSpec s = spec_of(w, q);
        s.join_order = {1, 0};
        s.join_ops = {JoinOp::IndexNestedLoop};
        CHECK(w.check(q, s, bx(50)) == "");
      }
      if (std::string(sort) == "f_key") {
        // Both sides sorted on the join key: merge from the sorted driver.
        KernelSpec s = spec_of(w, q);
        s.join_order = {1, 0};
        s.join_ops = {JoinOp::SortMerge};
        CHECK(w.check(q, s, bx(80)) == "");
      }
    }
  }
}

TEST_CASE("semi-join equivalence: bitmap and tag-array vs the oracle's hash semi-join") {
  const char* q = "SELECT count(*) AS n FROM d WHERE d_val < :x AND "
                  "EXISTS (SELECT 1 FROM f WHERE f_key = d_key AND f_a > 40)";
  for (uint64_t seed = 1; seed <= 15; ++seed) {
    auto w = MiniWorkload::make(seed, 40, 400, "f_key");
    for (auto op : {JoinOp::BitmapSemiJoin, JoinOp::TagArrayJoin, JoinOp::HashJoin}) {
      KernelSpec s = spec_of(w, q);
      s.semi_ops = {op};
      CHECK(w.check(q, s, bx(int64_t(seed * 67 % 1000))) == "");
    }
  }
}

TEST_CASE("aggregation equivalence: dense, direct, hash, two-phase, fused and unfused") {
  const char* grouped = "SELECT d_tag, sum(d_val) AS s, count(*) AS n, avg(d_val) AS a, min(d_val) AS lo, "
                        "max(d_val) AS hi FROM d, f WHERE f_key = d_key AND f_a <= :x GROUP BY d_tag";
  const char* by_pk = "SELECT d_key, count(*) AS n FROM d, f WHERE f_key = d_key GROUP BY d_key";
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    auto w = MiniWorkload::make(seed, 30, 500, "f_key");
    for (auto agg : {AggStrategy::DenseKeyArray, AggStrategy::HashGroup, AggStrategy::TwoPhase}) {
      for (bool fused : {false, true}) {
        if (agg == AggStrategy::TwoPhase && fused) continue;
        KernelSpec s = spec_of(w, grouped);
        s.agg = agg;
        s.fused = fused;
        CHECK(w.check(grouped, s, bx(int64_t(seed * 13 % 101))) == "");
      }
    }
    {
      KernelSpec s = spec_of(w, by_pk);
      s.agg = AggStrategy::DirectArray;
      s.fused = true;
      CHECK(w.check(by_pk, s, {}) == "");
    }
  }
}

TEST_CASE("scan path equivalence: sorted range, zone skip, dictionary rewrite, char mask") {
  const char* range_q = "SELECT count(*) AS n, sum(f_dec) AS s FROM f WHERE f_a BETWEEN :x AND 90";
  const char* dict_q = "SELECT count(*) AS n FROM d WHERE d_tag = 'red' AND d_val >= :x";
  const char* in_q = "SELECT count(*) AS n FROM d WHERE d_tag IN ('red', 'blue', 'nope') AND d_val >= :x";
  const char* like_q = "SELECT count(*) AS n FROM f WHERE f_s LIKE '%special%' AND f_a >= :x";
  const char* like_param_q = "SELECT count(*) AS n FROM f WHERE f_s LIKE :p";

  for (uint64_t seed = 1; seed <= 12; ++seed) {
    // Sorted by the filter column: sorted range scan.
    {
      auto w = MiniWorkload::make(seed, 10, 400, "f_a");
      KernelSpec s = spec_of(w, range_q);
      s.filter_paths[0] = AccessPath::SortedRangeScan;
      CHECK(w.check(range_q, s, bx(int64_t(seed * 11 % 80))) == "");
    }
    // Unsorted: zone-skip scan must agree with a plain full scan.
    {
      auto w = MiniWorkload::make(seed, 10, 400, "f_key");
      KernelSpec plain = spec_of(w, range_q);
      KernelSpec zone = spec_of(w, range_q);
      zone.filter_paths[0] = AccessPath::ZoneSkipScan;
      auto b = bx(int64_t(seed * 17 % 85));
      CHECK(w.check(range_q, plain, b) == "");
      CHECK(w.check(range_q, zone, b) == "");
    }
    // Dictionary rewrites for equality and IN.
    {
      auto w = MiniWorkload::make(seed, 60, 100, "f_key");
      KernelSpec s = spec_of(w, dict_q);
      s.filter_paths[0] = AccessPath::DictionaryRewrite;
      CHECK(w.check(dict_q, s, bx(int64_t(seed * 31 % 900))) == "");
      KernelSpec si = spec_of(w, in_q);
      si.filter_paths[0] = AccessPath::DictionaryRewrite;
      CHECK(w.check(in_q, si, bx(int64_t(seed * 29 % 900))) == "");
    }
    // Char-mask prefilter vs plain substring evaluation.
    {
      auto w = MiniWorkload::make(seed, 10, 300, "f_key");
      KernelSpec s = spec_of(w, like_q);
      s.filter_paths[0] = AccessPath::CharMaskPrefilter;
      CHECK(w.check(like_q, s, bx(0)) == "");
      KernelSpec sp = spec_of(w, like_param_q);
      sp.filter_paths[0] = AccessPath::CharMaskPrefilter;
      contract::ParamBinding b{{"p", Value::from_string("%pending%")}};
      CHECK(w.check(like_param_q, sp, b) == "");
    }
  }
}

TEST_CASE("micro-flags do not change results") {
  const char* q = "SELECT d_tag, count(*) AS n FROM d, f WHERE f_key = d_key AND f_a < :x GROUP BY d_tag";
  auto w = MiniWorkload::make(3, 25, 600, "f_key");
  for (int mask = 0; mask < 8; ++mask) {
    KernelSpec s = spec_of(w, q);
    s.branchless_predicates = mask & 1;
    s.presized_outputs = mask & 2;
    s.unrolled_inner = mask & 4;
    CHECK(w.check(q, s, bx(37)) == "");
  }
}

TEST_CASE("tracing neutrality: identical results with counters on") {
  const char* q = "SELECT d_tag, sum(f_dec) AS s FROM d, f WHERE f_key = d_key AND f_a < :x GROUP BY d_tag";
  auto w = MiniWorkload::make(5, 20, 400, "f_key");
  KernelSpec s = spec_of(w, q);
  auto b = bx(55);
  CHECK(w.check(q, s, b, false) == "");
  CHECK(w.check(q, s, b, true) == "");

  const auto& a = w.ast(q);
  auto traced = InterpretedKernel::build(s, a, *w.store, w.c, true);
  TraceReport tr;
  traced->run(b, &tr);
  CHECK(tr.total_iterations() > 0);
  bool has_scan = false;
  for (const auto& op : tr.ops) has_scan |= op.name.rfind("scan:", 0) == 0;
  CHECK(has_scan);

  auto untraced = InterpretedKernel::build(s, a, *w.store, w.c, false);
  TraceReport empty;
  untraced->run(b, &empty);
  CHECK(empty.ops.empty());
}

TEST_CASE("emitted source: tracing off leaves no counter tokens; on emits them") {
  auto w = MiniWorkload::make(2, 15, 120, "f_key");
  const char* q = "SELECT d_tag, count(*) AS n FROM d, f WHERE f_key = d_key GROUP BY d_tag";
  KernelSpec s = spec_of(w, q);
  auto off = emit_kernel_source(s, w.ast(q), *w.store, w.c, false);
  CHECK(off.source.find("BQ_TRACE") == std::string::npos);
  auto on = emit_kernel_source(s, w.ast(q), *w.store, w.c, true);
  CHECK(on.source.find("BQ_TRACE") != std::string::npos);
  CHECK(off.entry_symbol == "bespoke_q_q");
}

TEST_CASE("enumerate_join_orders: shapes and pruning") {
  auto c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.02, 6);

  // Single table: exactly one (trivial) order.
  auto ast1 = sql::parse_query("SELECT count(*) AS n FROM orders", c);
  auto p1 = oracle::profile_cardinalities(ast1, db);
  auto o1 = enumerate_join_orders(ast1, p1, 4);
  REQUIRE(o1.size() == 1);
  CHECK(o1[0] == std::vector<int>{0});

  // Two tables: both orders when the beam allows.
  auto ast2 = sql::parse_query("SELECT count(*) AS n FROM orders, lineitem WHERE l_orderkey = o_orderkey", c);
  auto p2 = oracle::profile_cardinalities(ast2, db);
  auto o2 = enumerate_join_orders(ast2, p2, 4);
  CHECK(o2.size() == 2);
}

TEST_CASE("enumerate_join_orders: skewed 3-chain ranks the true-minimal order first") {
  // Chain a -- b -- c where a->b explodes and b->c collapses: the cheap
  // orders start from c.
  auto c = contract::parse_contract(R"(
[table a]
col a_k int64

[table b]
col b_k int64
col b_c int64

[table c]
col c_c int64
col c_f int64

[dataset]
path = data

[objective]
total-runtime

[seed]
3
)");
  RelationMap db;
  auto mk = [&](const std::string& name, std::vector<std::pair<std::string, std::vector<int64_t>>> cols) {
    Relation r;
    r.name = name;
    for (auto& [cn, vals] : cols) {
      r.schema.push_back({cn, ColumnType::int64(), false});
      ColumnData cd;
      cd.type = ColumnType::int64();
      for (auto v : vals) cd.push(Value::from_int(v));
      r.columns.push_back(cd);
    }
    db[name] = std::move(r);
  };
  // a: 200 rows all key 1; b: key 1 x 50 (fanout 200*50), b_c unique; c: 3 rows.
  std::vector<int64_t> ak(200, 1);
  std::vector<int64_t> bk(50, 1), bc;
  for (int i = 0; i < 50; ++i) bc.push_back(i);
  mk("a", {{"a_k", ak}});
  mk("b", {{"b_k", bk}, {"b_c", bc}});
  mk("c", {{"c_c", {0, 1, 2}}, {"c_f", {7, 8, 9}}});

  auto ast = sql::parse_query("SELECT count(*) AS n FROM a, b, c WHERE a_k = b_k AND b_c = c_c", c);
  auto profile = oracle::profile_cardinalities(ast, db);
  auto orders = enumerate_join_orders(ast, profile, 8);
  REQUIRE(!orders.empty());

  // Exhaustively compute true intermediate sums with the oracle as counter.
  auto true_sum = [&](const std::vector<int>& order) -> double {
    // Emulate a left-deep evaluation: count intermediate result sizes by
    // running count(*) prefixes through the oracle.
    double total = 0;
    for (size_t k = 1; k <= order.size(); ++k) {
      std::vector<std::string> tables;
      for (size_t i = 0; i < k; ++i) tables.push_back(ast.from[size_t(order[i])].table);
      std::string q = "SELECT count(*) AS n FROM ";
      for (size_t i = 0; i < tables.size(); ++i) q += (i ? ", " : "") + tables[i];
      std::vector<std::string> conds;
      auto have = [&](const std::string& t) {
        return std::find(tables.begin(), tables.end(), t) != tables.end();
      };
      if (have("a") && have("b")) conds.push_back("a_k = b_k");
      if (have("b") && have("c")) conds.push_back("b_c = c_c");
      if (!conds.empty()) {
        q += " WHERE ";
        for (size_t i = 0; i < conds.size(); ++i) q += (i ? " AND " : "") + conds[i];
      }
      auto rs = oracle::execute(sql::parse_query(q, c), db);
      total += double(rs.rows[0][0].i);
    }
    return total;
  };
  double best_true = std::numeric_limits<double>::max();
  for (const auto& o : orders) best_true = std::min(best_true, true_sum(o));
  CHECK(true_sum(orders[0]) == doctest::Approx(best_true));
}

TEST_CASE("split_parameter_space unit behavior") {
  auto c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.02, 2);
  auto stats = datastore::compute_header(db);
  auto plan = planner::plan_storage(c, stats);
  const auto& tmpl = *c.find_template("q_like");
  const auto& ast = sql::parse_query(tmpl.text, c);

  std::vector<int> A{0, 1}, B{1, 0};
  auto mk = [&](int64_t d3_days, double ta, double tb) {
    SplitMeasurement m;
    m.binding = contract::sample_bindings(tmpl, 1, 77)[0];
    m.binding["d3"] = Value::from_date(int32_t(d3_days));
    m.order_times = {{A, ta}, {B, tb}};
    return m;
  };

  SUBCASE("all bindings agree: one whole-domain region") {
    std::vector<SplitMeasurement> ms = {mk(8000, 1, 2), mk(8100, 1, 2), mk(8200, 1, 2)};
    auto out = split_parameter_space(tmpl, ast, plan, stats, c, ms);
    REQUIRE(out.size() == 1);
    CHECK(out[0].first.param.empty());
    CHECK(out[0].second.join_order == A);
  }

  SUBCASE("bimodal winners split at the midpoint between extremes") {
    std::vector<SplitMeasurement> ms = {mk(8000, 1, 5), mk(8200, 1, 5), mk(9000, 9, 2), mk(9100, 9, 2)};
    auto out = split_parameter_space(tmpl, ast, plan, stats, c, ms);
    REQUIRE(out.size() == 2);
    CHECK(out[0].first.param == "d3");
    REQUIRE(out[0].first.hi.has_value());
    CHECK(*out[0].first.hi == (8200 + 9000) / 2);
    CHECK(out[0].second.join_order == A);
    CHECK(out[1].second.join_order == B);
    REQUIRE(out[1].first.lo.has_value());
    CHECK(*out[1].first.lo == (8200 + 9000) / 2 + 1);
    CHECK(!out[0].first.lo.has_value());  // regions cover the whole domain
    CHECK(!out[1].first.hi.has_value());
  }

  SUBCASE("alternating winners cannot be separated: robust worst-case order") {
    std::vector<SplitMeasurement> ms = {mk(8000, 1, 5), mk(8500, 9, 2), mk(9000, 1, 5), mk(9500, 9, 2)};
    // worst(A) = 9, worst(B) = 5 -> robust is B
    auto out = split_parameter_space(tmpl, ast, plan, stats, c, ms);
    REQUIRE(out.size() == 1);
    CHECK(out[0].first.param.empty());
    CHECK(out[0].second.join_order == B);
  }
}

TEST_CASE("select_strategies is a pure function of its inputs") {
  auto c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.03, 5);
  auto stats = datastore::compute_header(db);
  auto plan = planner::plan_storage(c, stats);
  for (const auto& tmpl : c.templates) {
    const auto& ast = sql::parse_query(tmpl.text, c);
    std::vector<int> order;
    for (size_t i = 0; i < ast.from.size(); ++i) order.push_back(int(i));
    auto s1 = select_strategies(ast, plan, stats, c, order, tmpl.id);
    auto s2 = select_strategies(ast, plan, stats, c, order, tmpl.id);
    CHECK(s1 == s2);
  }
}

TEST_CASE("incompatible strategies are reported, not silently misapplied") {
  auto w = MiniWorkload::make(1, 10, 50, "f_key");
  const char* q = "SELECT count(*) AS n FROM f WHERE f_a BETWEEN 1 AND :x";
  KernelSpec s = spec_of(w, q);
  s.filter_paths[0] = AccessPath::SortedRangeScan;  // fact sorted by f_key, not f_a
  CHECK_THROWS_AS(InterpretedKernel::build(s, w.ast(q), *w.store, w.c, false), IncompatibleStrategy);

  KernelSpec s2 = spec_of(w, q);
  s2.filter_paths[0] = AccessPath::DictionaryRewrite;  // f_a is plain, not dictionary
  CHECK_THROWS_AS(InterpretedKernel::build(s2, w.ast(q), *w.store, w.c, false), IncompatibleStrategy);

  const char* qj = "SELECT count(*) AS n FROM d, f WHERE f_key = d_key";
  KernelSpec s3 = spec_of(w, qj);
  s3.join_ops = {JoinOp::BitmapSemiJoin};  // existence-only operator on a plain join
  CHECK_THROWS_AS(InterpretedKernel::build(s3, w.ast(qj), *w.store, w.c, false), IncompatibleStrategy);
}

TEST_CASE("select_strategies picks catalog entries the plan supports") {
  auto c = workloads::micro_tpch_contract("data");
  auto db = workloads::generate_micro_tpch(0.05, 42);
  auto stats = datastore::compute_header(db);
  auto plan = planner::plan_storage(c, stats);

  {
    // EXISTS over a small key domain: bitmap semi-join.
    const auto& ast = sql::parse_query(c.find_template("q_semi")->text, c);
    auto spec = select_strategies(ast, plan, stats, c, {0}, "q_semi");
    REQUIRE(spec.semi_ops.size() == 1);
    CHECK(spec.semi_ops[0] == JoinOp::BitmapSemiJoin);
    // GROUP BY on a dictionary-coded priority column: dense-key aggregation.
    CHECK(spec.agg == AggStrategy::DenseKeyArray);
    CHECK(spec.fused);
    // orders is sorted by o_orderdate: the date range runs as a sorted scan.
    bool sorted_scan = false;
    for (auto& [fi, p] : spec.filter_paths) sorted_scan |= p == AccessPath::SortedRangeScan;
    CHECK(sorted_scan);
  }
  {
    // Driver = orders sorted by date, lineitem joined next: the directory
    // makes it an index nested loop.
    const auto& ast = sql::parse_query(c.find_template("q_join")->text, c);
    std::vector<int> order{1, 2, 0, 3, 4, 5};  // orders, lineitem, customer, supplier, nation, region
    auto spec = select_strategies(ast, plan, stats, c, order, "q_join");
    CHECK(spec.join_ops[0] == JoinOp::IndexNestedLoop);
  }
}
