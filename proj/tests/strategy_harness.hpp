#pragma once

#include <functional>
#include <random>

#include "bespoke/datastore.hpp"
#include "bespoke/kernelgen.hpp"
#include "bespoke/oracle.hpp"
#include "bespoke/store.hpp"
#include "test_support.hpp"

namespace testsup {

using namespace bespoke;

// A dim/fact pair with every support structure a strategy test needs. The
// fact table exists in two sort variants so directory tests and sorted-scan
// tests can both run. The oracle executor is the brute-force reference.
struct MiniWorkload {
  contract::Contract c;
  RelationMap db;
  planner::StoragePlan plan;
  std::shared_ptr<planner::BespokeStore> store;
  std::map<std::string, sql::QueryAst> asts;

  static constexpr const char* kContract = R"(
[table d]
col d_key int64
col d_tag varchar
col d_val int64
pk d_key

[table f]
col f_key int64
col f_a int64
col f_dec decimal(2)
col f_s varchar
col f_date date
fk f_key -> d.d_key

[dataset]
path = data

[objective]
total-runtime

[seed]
1
)";

  // sort_fact_by: "f_key" enables the d->f range directory; "f_a" enables
  // sorted range scans on the filter column.
  static MiniWorkload make(uint64_t seed, size_t dim_rows, size_t fact_rows, const std::string& sort_fact_by) {
    MiniWorkload w;
    w.c = contract::parse_contract(kContract);
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + 7);
    auto uniform = [&](int64_t lo, int64_t hi) { return lo + int64_t(rng() % uint64_t(hi - lo + 1)); };

    static const char* tags[] = {"red", "green", "blue", "cyan", "violet"};
    Relation d;
    d.name = "d";
    d.schema = w.c.find_table("d")->columns;
    for (const auto& cs : d.schema) {
      ColumnData col;
      col.type = cs.type;
      d.columns.push_back(col);
    }
    for (size_t i = 0; i < dim_rows; ++i) {
      d.columns[0].push(Value::from_int(int64_t(i)));
      d.columns[1].push(Value::from_string(tags[uniform(0, 4)]));
      d.columns[2].push(Value::from_int(uniform(0, 1000)));
    }

    static const char* words[] = {"alpha", "bravo", "special", "delta", "pending", "zulu", "echo"};
    Relation f;
    f.name = "f";
    f.schema = w.c.find_table("f")->columns;
    for (const auto& cs : f.schema) {
      ColumnData col;
      col.type = cs.type;
      f.columns.push_back(col);
    }
    for (size_t i = 0; i < fact_rows; ++i) {
      f.columns[0].push(Value::from_int(uniform(0, int64_t(dim_rows) - 1)));
      f.columns[1].push(Value::from_int(uniform(0, 100)));
      f.columns[2].push(Value::from_decimal(uniform(-5000, 5000), 2));
      std::string s = std::string(words[uniform(0, 6)]) + " " + words[uniform(0, 6)];
      f.columns[3].push(Value::from_string(s));
      f.columns[4].push(Value::from_date(int32_t(uniform(9000, 9600))));
    }
    w.db["d"] = std::move(d);
    w.db["f"] = std::move(f);

    using planner::Encoding;
    using planner::SupportStructure;
    planner::TablePlan dp;
    dp.table = "d";
    dp.sort_order = {"d_key"};
    dp.encodings = {{"d_key", Encoding::Plain}, {"d_tag", Encoding::Dictionary}, {"d_val", Encoding::Plain}};
    planner::TablePlan fp;
    fp.table = "f";
    if (!sort_fact_by.empty()) fp.sort_order = {sort_fact_by};
    fp.encodings = {{"f_key", Encoding::Plain},
                    {"f_a", Encoding::Plain},
                    {"f_dec", Encoding::ScaledInteger},
                    {"f_s", Encoding::StringArena},
                    {"f_date", Encoding::CompactDate}};
    w.plan.tables = {dp, fp};
    w.plan.supports.push_back({SupportStructure::Kind::HashIndex, "f", "f_key", "", 0});
    w.plan.supports.push_back({SupportStructure::Kind::HashIndex, "f", "f_a", "", 0});
    w.plan.supports.push_back({SupportStructure::Kind::ZoneMap, "f", "f_a", "", 64});
    w.plan.supports.push_back({SupportStructure::Kind::ZoneMap, "f", "f_date", "", 64});
    w.plan.supports.push_back({SupportStructure::Kind::CharMaskAlpha, "f", "f_s", "", 0});
    w.plan.supports.push_back({SupportStructure::Kind::CharMaskBigram, "f", "f_s", "", 0});
    if (sort_fact_by == "f_key")
      w.plan.supports.push_back({SupportStructure::Kind::RangeDirectory, "f", "f_key", "d", 0});
    w.store = std::make_shared<planner::BespokeStore>(planner::build_store(w.plan, w.db, w.c));
    return w;
  }

  const sql::QueryAst& ast(const std::string& text) {
    auto it = asts.find(text);
    if (it != asts.end()) return it->second;
    return asts.emplace(text, sql::parse_query(text, c)).first->second;
  }

  // Runs one spec against the oracle on one binding; returns the mismatch
  // text or empty on success.
  std::string check(const std::string& query_text, const kernelgen::KernelSpec& spec,
                    const contract::ParamBinding& binding, bool tracing = false) {
    const auto& a = ast(query_text);
    auto kernel = kernelgen::InterpretedKernel::build(spec, a, *store, c, tracing);
    auto actual = oracle::canonicalize(kernel->run(binding), a.order_by);
    auto expected = oracle::canonicalize(oracle::execute(sql::instantiate(a, binding), db), a.order_by);
    auto mm = oracle::compare(expected, actual);
    return mm ? mm->to_string() : "";
  }
};

}  // namespace testsup
