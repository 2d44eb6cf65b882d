#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bespoke/value.hpp"

namespace bespoke::contract {

struct ColumnSchema {
  std::string name;
  ColumnType type;
  bool nullable = false;
};

struct ForeignKey {
  std::string column;        // local column
  std::string parent_table;  // referenced table
  std::string parent_column; // referenced primary key column
};

struct TableSchema {
  std::string name;
  std::vector<ColumnSchema> columns;
  std::string primary_key;  // empty when undeclared
  std::vector<ForeignKey> foreign_keys;

  const ColumnSchema* find_column(const std::string& name) const;
  int column_index(const std::string& name) const;
};

// Parameter domain for a template placeholder.
struct ParamDomain {
  enum class Kind : uint8_t { IntRange, DecimalRange, DateRange, Choice };
  std::string name;
  Kind kind = Kind::IntRange;
  int64_t lo = 0;      // scaled for DecimalRange, days for DateRange
  int64_t hi = 0;
  uint8_t scale = 0;   // DecimalRange only
  std::vector<Value> choices;

  bool contains(const Value& v) const;
};

struct QueryTemplate {
  std::string id;
  std::string text;  // query string with :name placeholders
  std::vector<ParamDomain> params;

  const ParamDomain* find_param(const std::string& name) const;
};

using ParamBinding = std::map<std::string, Value>;

enum class Objective : uint8_t { TotalRuntime, PerQueryMedian };

struct Contract {
  std::vector<TableSchema> tables;
  std::vector<QueryTemplate> templates;
  std::string dataset_path;
  Objective objective = Objective::TotalRuntime;
  uint64_t seed = 0;

  const TableSchema* find_table(const std::string& name) const;
  const QueryTemplate* find_template(const std::string& id) const;
};

// Parses + validates a contract document; throws SyntaxError / SemanticError.
Contract parse_contract(const std::string& text);
std::string print_contract(const Contract& c);

// n bindings inside the declared domains, deterministic in (template, n, seed).
// Ranges with at least n distinct values yield pairwise distinct draws.
std::vector<ParamBinding> sample_bindings(const QueryTemplate& tmpl, size_t n, uint64_t seed);

}  // namespace bespoke::contract
