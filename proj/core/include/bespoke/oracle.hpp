#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bespoke/relation.hpp"
#include "bespoke/sql.hpp"

namespace bespoke::oracle {

struct ResultSet {
  std::vector<std::string> names;
  std::vector<ColumnType> types;
  std::vector<std::vector<Value>> rows;
};

// Deliberately naive reference executor: materialized tuples, Value-typed
// evaluation, hash maps for equi-joins. Serves as the system-wide correctness
// oracle and the fallback path for ad-hoc queries.
ResultSet execute(const sql::QueryAst& ast, const RelationMap& relations);

// Canonical form for comparison: derived floats rounded to 10 significant
// digits; without a total ORDER BY rows are sorted lexicographically over all
// columns (nulls first); with one, ties on the ORDER BY prefix are broken by
// the remaining columns.
ResultSet canonicalize(ResultSet rs, const std::vector<sql::OrderKey>& order_by);

struct Mismatch {
  size_t row = 0;
  int column = -1;  // -1: header/row-count difference
  std::string left;
  std::string right;
  std::string to_string() const;
};

// Match == nullopt. Inputs must be canonicalized.
std::optional<Mismatch> compare(const ResultSet& a, const ResultSet& b);

std::string to_tsv(const ResultSet& rs);

// One left-deep measured evaluation: exact filter selectivities and exact
// per-step intermediate cardinalities, with per-edge join selectivities
// derived for reordering estimates.
struct JoinStep {
  int table_idx = -1;
  std::vector<int> edge_ids;  // indices into ast.joins consumed at this step
  size_t left_rows = 0;
  size_t right_rows = 0;
  size_t out_rows = 0;
};

struct CardinalityProfile {
  std::vector<size_t> base_rows;       // per FROM position
  std::vector<size_t> filtered_rows;   // after local filters and semi-joins
  std::vector<double> filter_selectivity;
  std::vector<JoinStep> steps;
  std::vector<double> edge_selectivity;  // per ast.joins index
};

CardinalityProfile profile_cardinalities(const sql::QueryAst& ast, const RelationMap& relations);

// Pluggable external reference engine; the built-in oracle is the default.
class ReferenceEngine {
 public:
  virtual ~ReferenceEngine() = default;
  virtual ResultSet run(const sql::QueryAst& ast, const RelationMap& relations) = 0;
};

ReferenceEngine& builtin_reference();

}  // namespace bespoke::oracle
