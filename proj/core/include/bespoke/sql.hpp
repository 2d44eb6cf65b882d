#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bespoke/contract.hpp"
#include "bespoke/value.hpp"

namespace bespoke::sql {

enum class AggKind : uint8_t { Sum, Count, Avg, Min, Max };
enum class CmpOp : uint8_t { Eq, Lt, Le, Gt, Ge };

struct Expr;
using ExprPtr = std::unique_ptr<Expr>;

// Scalar expression tree. Column refs are resolved against the contract at
// parse time (table_idx is the position in QueryAst::from, col_idx in the
// table schema); parameters keep their placeholder name until instantiation.
struct Expr {
  enum class Kind : uint8_t { Literal, ColumnRef, Param, Arith, Agg };
  Kind kind = Kind::Literal;

  Value lit;                   // Literal
  std::string qualifier;       // ColumnRef: alias as written (may be empty)
  std::string column;          // ColumnRef
  int table_idx = -1;          // ColumnRef, resolved
  int col_idx = -1;            // ColumnRef, resolved
  std::string param;           // Param
  char op = 0;                 // Arith: + - * /
  AggKind agg = AggKind::Sum;  // Agg
  bool star = false;           // Agg: COUNT(*)
  std::vector<ExprPtr> args;   // Arith operands / Agg argument

  ColumnType type;  // inferred at resolution

  ExprPtr clone() const;
  bool contains_agg() const;
  bool contains_param() const;
  void collect_columns(std::vector<const Expr*>& out) const;
};

// One conjunct of a WHERE clause after join extraction. Everything here
// references at most one FROM table (plus literals/params).
struct FilterPred {
  enum class Kind : uint8_t { Compare, Between, InList, Like };
  Kind kind = Kind::Compare;
  CmpOp op = CmpOp::Eq;
  ExprPtr lhs;
  ExprPtr lo;                 // Compare rhs / Between lower
  ExprPtr hi;                 // Between upper
  std::vector<ExprPtr> list;  // InList items (literals or params)
  ExprPtr pattern;            // Like pattern (string literal or param)
  int table_idx = -1;         // -1 for constant predicates

  FilterPred clone() const;
};

// Inner equi-join edge between two FROM tables.
struct JoinPred {
  int left_table = -1;
  int left_col = -1;
  int right_table = -1;
  int right_col = -1;
};

// EXISTS / IN subquery in single-table semi-join form: probe rows survive when
// the inner table has a match on the correlation key that passes the local
// filters.
struct SemiJoin {
  std::string inner_table;           // table name (resolved schema lookup)
  std::string inner_alias;
  int inner_key_col = -1;            // correlated column inside the subquery
  ExprPtr outer_key;                 // outer-side expression
  std::vector<FilterPred> inner_filters;  // table_idx == 0 relative to inner
};

struct TableRef {
  std::string table;
  std::string alias;
};

struct SelectItem {
  ExprPtr expr;
  std::string alias;  // output column name
};

struct OrderKey {
  int select_idx = -1;
  bool desc = false;
};

struct QueryAst {
  std::vector<SelectItem> select;
  std::vector<TableRef> from;
  std::vector<JoinPred> joins;
  std::vector<FilterPred> filters;
  std::vector<SemiJoin> semis;
  std::vector<ExprPtr> group_by;  // resolved column refs
  std::vector<OrderKey> order_by;
  std::optional<int64_t> limit;

  bool has_aggregates() const;
  QueryAst clone() const;
};

// Parses a query in the supported subset and resolves all names against the
// contract schema. Placeholders (:name) are allowed; their inferred types are
// returned through placeholder_types when non-null.
QueryAst parse_query(const std::string& text, const contract::Contract& schema,
                     std::vector<std::pair<std::string, ColumnType>>* placeholder_types = nullptr);

// Substitutes literals for every placeholder; throws MissingParam.
QueryAst instantiate(const QueryAst& ast, const contract::ParamBinding& binding);
QueryAst instantiate(const contract::QueryTemplate& tmpl, const contract::Contract& schema,
                     const contract::ParamBinding& binding);

// Literal text substitution of :name placeholders, for differential checks.
std::string substitute_text(const std::string& text, const contract::ParamBinding& binding);

// Canonical fully-parenthesized rendering; used to match derived-column
// expressions and in reports. Column refs print unqualified.
std::string expr_to_text(const Expr& e);

// Parses an arithmetic expression over one table's columns (plus optional
// parent.column refs for every listed reachable parent).
ExprPtr parse_table_expr(const std::string& text, const contract::Contract& schema,
                         const std::string& table);

}  // namespace bespoke::sql
