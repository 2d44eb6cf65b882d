#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bespoke/kernel_interp.hpp"
#include "bespoke/kernel_spec.hpp"
#include "bespoke/oracle.hpp"
#include "bespoke/store.hpp"

namespace bespoke::kernelgen {

// Left-deep join orders ranked by the sum of estimated intermediate
// cardinalities under a measured profile. Orders whose worst intermediate
// exceeds prune_ratio x the best candidate's are dropped (pass 0 to keep
// every order); the top `beam` survive.
std::vector<std::vector<int>> enumerate_join_orders(const sql::QueryAst& ast,
                                                    const oracle::CardinalityProfile& profile, size_t beam,
                                                    double prune_ratio = 10.0);

// The basic (stage-1) bundle: textual join order, hash joins, full scans,
// unfused hash/scalar aggregation, no micro-flags.
KernelSpec basic_spec(const sql::QueryAst& ast, const std::string& template_id);

// Deterministic rule-based selection from the strategy catalog for one join
// order; throws IncompatibleStrategy when a rule picks a structure the plan
// lacks.
KernelSpec select_strategies(const sql::QueryAst& ast, const planner::StoragePlan& plan,
                             const DatasetHeader& stats, const contract::Contract& contract,
                             const std::vector<int>& order, const std::string& template_id);

struct KernelArtifact {
  enum class Backend : uint8_t { Interpreted, EmittedSource };
  Backend backend = Backend::Interpreted;
  KernelSpec spec;
  bool tracing = false;

  std::shared_ptr<InterpretedKernel> interp;  // Interpreted
  std::string source;                         // EmittedSource
  std::string entry_symbol;
  std::string manifest_json;
};

KernelArtifact emit_kernel(const KernelSpec& spec, KernelArtifact::Backend backend, bool tracing,
                           const sql::QueryAst& ast, const planner::BespokeStore& store,
                           const contract::Contract& contract);

// One measured binding for parameter-space splitting: every candidate order's
// runtime at this binding.
struct SplitMeasurement {
  contract::ParamBinding binding;
  std::vector<std::pair<std::vector<int>, double>> order_times;

  const std::vector<int>* best_order() const;
};

// Partitions the binding space by thresholds on the single most disagreeing
// parameter; regions cover the domain and are disjoint. When no parameter
// separates the per-binding winners, returns one robust spec: the order with
// the best worst-case measured runtime.
std::vector<std::pair<RegionPredicate, KernelSpec>> split_parameter_space(
    const contract::QueryTemplate& tmpl, const sql::QueryAst& ast, const planner::StoragePlan& plan,
    const DatasetHeader& stats, const contract::Contract& contract,
    const std::vector<SplitMeasurement>& measurements);

}  // namespace bespoke::kernelgen
