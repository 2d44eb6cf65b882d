#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bespoke/contract.hpp"
#include "bespoke/value.hpp"

namespace bespoke {

// Type-tagged contiguous column with a validity mask. Fixed-width values
// (int64, scaled decimal, date-as-days) live in ints; varchar in strs.
struct ColumnData {
  ColumnType type;
  std::vector<int64_t> ints;
  std::vector<std::string> strs;
  std::vector<uint8_t> valid;  // 1 = present

  size_t size() const { return valid.size(); }
  bool is_string() const { return type.kind == TypeKind::Varchar; }
  Value get(size_t row) const;
  void push(const Value& v);
  void push_null();
};

// Flat in-memory table; the always-materializable ground truth every encoded
// layout must reproduce.
struct Relation {
  std::string name;
  std::vector<contract::ColumnSchema> schema;
  std::vector<ColumnData> columns;

  size_t row_count() const { return columns.empty() ? 0 : columns[0].size(); }
  int column_index(const std::string& name) const;
  std::vector<Value> row(size_t r) const;
};

using RelationMap = std::map<std::string, Relation>;

struct ColumnStats {
  std::string column;
  size_t distinct_count = 0;
  size_t null_count = 0;
  bool has_minmax = false;  // false when every value is null
  Value min;
  Value max;
};

struct TableStats {
  std::string table;
  size_t row_count = 0;
  std::vector<ColumnStats> columns;

  const ColumnStats* find(const std::string& column) const;
};

// Exact per-table statistics computed from loaded data.
struct DatasetHeader {
  std::map<std::string, TableStats> tables;
};

}  // namespace bespoke
