#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bespoke/contract.hpp"
#include "bespoke/relation.hpp"

namespace bespoke::planner {

enum class Encoding : uint8_t { Plain, Dictionary, ScaledInteger, CompactDate, StringArena };

std::string encoding_name(Encoding e);

struct ColumnPlan {
  std::string column;
  Encoding encoding = Encoding::Plain;
};

struct SupportStructure {
  enum class Kind : uint8_t { HashIndex, RangeDirectory, ZoneMap, CharMaskAlpha, CharMaskBigram };
  Kind kind = Kind::HashIndex;
  std::string table;         // owning table (child for RangeDirectory)
  std::string column;        // key / filtered / masked column
  std::string parent_table;  // RangeDirectory only
  uint32_t shard_size = 0;   // ZoneMap only
};

// Extra physical column: an arithmetic expression over the owning table's
// columns, or a denormalized parent attribute reachable over a declared FK
// (referenced as <parent_table>.<column> in the expression text).
struct DerivedColumn {
  std::string table;
  std::string name;
  std::string expression;
};

struct TablePlan {
  std::string table;
  std::vector<std::string> sort_order;
  std::vector<ColumnPlan> encodings;

  Encoding encoding_of(const std::string& column) const;
  bool sorted_by(const std::string& column) const;
};

struct StoragePlan {
  std::vector<TablePlan> tables;
  std::vector<SupportStructure> supports;
  std::vector<DerivedColumn> derived;

  const TablePlan* find_table(const std::string& name) const;
  bool has_support(SupportStructure::Kind kind, const std::string& table, const std::string& column) const;
  const SupportStructure* find_directory(const std::string& parent, const std::string& child) const;

  std::string to_text() const;
  static StoragePlan from_text(const std::string& text);
};

// Fixed planner thresholds. The rule set is deterministic; the governor can
// still override individual choices through replan candidates.
struct PlannerLimits {
  double dictionary_max_ratio = 0.5;
  size_t dictionary_max_distinct = 65536;
  int64_t compact_date_max_span = 65535;
  uint32_t zone_map_shard = 4096;
  size_t derived_min_reuse = 2;
};

StoragePlan plan_storage(const contract::Contract& c, const DatasetHeader& stats,
                         const PlannerLimits& limits = {});

}  // namespace bespoke::planner
