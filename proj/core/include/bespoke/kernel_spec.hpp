#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bespoke/contract.hpp"

namespace bespoke::kernelgen {

enum class JoinOp : uint8_t { IndexNestedLoop, HashJoin, SortMerge, BitmapSemiJoin, TagArrayJoin };
enum class AccessPath : uint8_t { FullScan, SortedRangeScan, ZoneSkipScan, DictionaryRewrite, CharMaskPrefilter };
enum class AggStrategy : uint8_t { Scalar, DenseKeyArray, DirectArray, HashGroup, TwoPhase };

std::string join_op_name(JoinOp op);
std::string access_path_name(AccessPath p);
std::string agg_strategy_name(AggStrategy s);

// Per-template strategy bundle: join order, operator per join step, access
// path per filter, aggregation strategy, and codegen micro-flags. The spec is
// the unit the governor proposes, snapshots and swaps.
struct KernelSpec {
  std::string template_id;
  std::vector<int> join_order;             // FROM positions; [0] is the driver
  std::vector<JoinOp> join_ops;            // one per join step (join_order[1..])
  std::map<int, AccessPath> filter_paths;  // ast.filters index -> path
  std::vector<JoinOp> semi_ops;            // per ast.semis index
  AggStrategy agg = AggStrategy::Scalar;
  bool fused = false;          // aggregation inline in the deepest loop
  bool use_derived = false;    // read precomputed derived columns
  bool branchless_predicates = false;
  bool presized_outputs = false;
  bool unrolled_inner = false;

  std::string to_json() const;
  static KernelSpec from_json(const std::string& text);
  bool operator==(const KernelSpec&) const = default;
};

// Binding-space region for parameter-split kernels. Empty param = whole
// domain. Bounds are inclusive, on the parameter's integer payload.
struct RegionPredicate {
  std::string param;
  std::optional<int64_t> lo;
  std::optional<int64_t> hi;

  bool contains(const contract::ParamBinding& binding) const;
  std::string to_string() const;
  bool operator==(const RegionPredicate&) const = default;
};

struct TraceReport {
  struct OpCounters {
    std::string name;
    uint64_t iterations = 0;
    uint64_t rows_out = 0;
    uint64_t ns = 0;
  };
  std::vector<OpCounters> ops;

  uint64_t total_iterations() const;
  const OpCounters* find(const std::string& name) const;
};

}  // namespace bespoke::kernelgen
