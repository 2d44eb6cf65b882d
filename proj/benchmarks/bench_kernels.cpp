// Microbenchmarks: the oracle executor vs basic and strategy-selected
// kernels on the bundled workload, plus isolated operator comparisons.

#include <benchmark/benchmark.h>

#include <memory>

#include "bespoke/datastore.hpp"
#include "bespoke/kernelgen.hpp"
#include "bespoke/micro_tpch.hpp"
#include "bespoke/oracle.hpp"

using namespace bespoke;

namespace {

struct Env {
  contract::Contract c = workloads::micro_tpch_contract("data");
  RelationMap db = workloads::generate_micro_tpch(0.25, 42);
  DatasetHeader stats = datastore::compute_header(db);
  planner::StoragePlan plan = planner::plan_storage(c, stats);
  planner::BespokeStore store = planner::build_store(plan, db, c);
  std::map<std::string, sql::QueryAst> asts;

  Env() {
    for (const auto& t : c.templates) asts.emplace(t.id, sql::parse_query(t.text, c));
  }

  const sql::QueryAst& ast(const std::string& id) { return asts.at(id); }

  contract::ParamBinding binding(const std::string& id) {
    return contract::sample_bindings(*c.find_template(id), 1, 7)[0];
  }

  kernelgen::KernelSpec selected(const std::string& id) {
    auto profile =
        oracle::profile_cardinalities(sql::instantiate(ast(id), binding(id)), db);
    auto orders = kernelgen::enumerate_join_orders(ast(id), profile, 4);
    return kernelgen::select_strategies(ast(id), plan, stats, c,
                                        orders.empty() ? std::vector<int>{0} : orders[0], id);
  }
};

Env& env() {
  static Env e;
  return e;
}

void BM_Oracle(benchmark::State& state, const std::string& id) {
  auto& e = env();
  auto inst = sql::instantiate(e.ast(id), e.binding(id));
  for (auto _ : state) benchmark::DoNotOptimize(oracle::execute(inst, e.db));
}

void BM_BasicKernel(benchmark::State& state, const std::string& id) {
  auto& e = env();
  auto spec = kernelgen::basic_spec(e.ast(id), id);
  auto kernel = kernelgen::InterpretedKernel::build(spec, e.ast(id), e.store, e.c, false);
  auto b = e.binding(id);
  for (auto _ : state) benchmark::DoNotOptimize(kernel->run(b));
}

void BM_SelectedKernel(benchmark::State& state, const std::string& id) {
  auto& e = env();
  auto kernel = kernelgen::InterpretedKernel::build(e.selected(id), e.ast(id), e.store, e.c, false);
  auto b = e.binding(id);
  for (auto _ : state) benchmark::DoNotOptimize(kernel->run(b));
}

void BM_SemiJoin(benchmark::State& state, kernelgen::JoinOp op) {
  auto& e = env();
  const std::string id = "q_semi";
  auto spec = e.selected(id);
  spec.semi_ops = {op};
  auto kernel = kernelgen::InterpretedKernel::build(spec, e.ast(id), e.store, e.c, false);
  auto b = e.binding(id);
  for (auto _ : state) benchmark::DoNotOptimize(kernel->run(b));
}

void BM_Aggregation(benchmark::State& state, kernelgen::AggStrategy agg, bool fused) {
  auto& e = env();
  const std::string id = "q_group";
  auto spec = e.selected(id);
  spec.agg = agg;
  spec.fused = fused;
  auto kernel = kernelgen::InterpretedKernel::build(spec, e.ast(id), e.store, e.c, false);
  auto b = e.binding(id);
  for (auto _ : state) benchmark::DoNotOptimize(kernel->run(b));
}

}  // namespace

BENCHMARK_CAPTURE(BM_Oracle, q_range, std::string("q_range"));
BENCHMARK_CAPTURE(BM_BasicKernel, q_range, std::string("q_range"));
BENCHMARK_CAPTURE(BM_SelectedKernel, q_range, std::string("q_range"));
BENCHMARK_CAPTURE(BM_Oracle, q_join, std::string("q_join"));
BENCHMARK_CAPTURE(BM_BasicKernel, q_join, std::string("q_join"));
BENCHMARK_CAPTURE(BM_SelectedKernel, q_join, std::string("q_join"));
BENCHMARK_CAPTURE(BM_Oracle, q_group, std::string("q_group"));
BENCHMARK_CAPTURE(BM_SelectedKernel, q_group, std::string("q_group"));
BENCHMARK_CAPTURE(BM_SemiJoin, bitmap, kernelgen::JoinOp::BitmapSemiJoin);
BENCHMARK_CAPTURE(BM_SemiJoin, tag_array, kernelgen::JoinOp::TagArrayJoin);
BENCHMARK_CAPTURE(BM_SemiJoin, hash_set, kernelgen::JoinOp::HashJoin);
BENCHMARK_CAPTURE(BM_Aggregation, dense_fused, kernelgen::AggStrategy::DenseKeyArray, true);
BENCHMARK_CAPTURE(BM_Aggregation, dense_unfused, kernelgen::AggStrategy::DenseKeyArray, false);
BENCHMARK_CAPTURE(BM_Aggregation, hash_fused, kernelgen::AggStrategy::HashGroup, true);
BENCHMARK_CAPTURE(BM_Aggregation, two_phase, kernelgen::AggStrategy::TwoPhase, false);

BENCHMARK_MAIN();
