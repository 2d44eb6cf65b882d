#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "bespoke/relation.hpp"
#include "bespoke/storage_plan.hpp"

namespace bespoke::planner {

// One physical column. Payload layout depends on the encoding:
//   Plain / ScaledInteger : i64 values (scaled integers for decimals)
//   CompactDate           : epoch + u16 day offsets
//   Dictionary            : u32 codes into a sorted dictionary
//   StringArena           : monotone offsets into one byte buffer
// Nulls are tracked by the validity mask; payload slots for nulls are zero.
struct EncodedColumn {
  Encoding enc = Encoding::Plain;
  ColumnType logical_type;
  bool nullable = false;

  std::vector<int64_t> i64;
  std::vector<uint16_t> u16;
  int64_t epoch = 0;
  std::vector<uint32_t> codes;
  std::vector<int64_t> dict_i64;        // sorted ascending
  std::vector<std::string> dict_str;    // sorted ascending
  std::vector<uint64_t> offsets;        // size rows+1
  std::string bytes;
  std::vector<uint8_t> valid;

  size_t size() const { return valid.size(); }
  bool is_valid(size_t row) const { return valid[row] != 0; }

  // Decoded logical value as int64 (days for dates, scaled for decimals).
  int64_t value_i64(size_t row) const;
  std::string_view value_str(size_t row) const;
  Value value(size_t row) const;

  size_t dict_size() const { return enc == Encoding::Dictionary ? std::max(dict_i64.size(), dict_str.size()) : 0; }
  // Code of a logical value; -1 when absent from the dictionary.
  int64_t dict_code_of(const Value& v) const;
  // First code whose value is >= v (codes are order-isomorphic to values).
  int64_t dict_lower_bound(const Value& v) const;
};

// key -> row-id chains, open addressing over power-of-two buckets.
struct HashIndexData {
  std::string column;
  std::vector<int64_t> keys;     // per bucket
  std::vector<int32_t> head;     // per bucket, -1 empty
  std::vector<int32_t> next;     // per row, -1 end
  uint64_t mask = 0;

  struct Iter {
    const HashIndexData* idx;
    int32_t row;
    bool at_end() const { return row < 0; }
    void advance() { row = idx->next[size_t(row)]; }
  };
  Iter probe(int64_t key) const;
};

// Per parent physical row: [start, end) slice of the child's physical rows.
struct RangeDirectoryData {
  std::string parent_table;
  std::string key_column;  // child column
  std::vector<uint32_t> start;
  std::vector<uint32_t> end;
};

struct ZoneMapData {
  std::string column;
  uint32_t shard_size = 0;
  std::vector<int64_t> mins;
  std::vector<int64_t> maxs;
};

struct CharMaskData {
  std::string column;
  bool bigram = false;
  std::vector<uint64_t> masks;
};

uint64_t char_mask_of(std::string_view s, bool bigram);
std::vector<uint64_t> build_char_masks(const EncodedColumn& string_col, bool bigram);

struct StoreTable {
  std::string name;
  size_t rows = 0;
  std::vector<contract::ColumnSchema> schema;
  std::vector<EncodedColumn> columns;
  std::vector<uint32_t> logical_of;  // physical row -> ingestion row

  std::vector<DerivedColumn> derived_meta;
  std::vector<EncodedColumn> derived;

  std::vector<HashIndexData> hash_indexes;
  std::vector<RangeDirectoryData> directories;
  std::vector<ZoneMapData> zone_maps;
  std::vector<CharMaskData> char_masks;

  int column_index(const std::string& name) const;
  int derived_index(const std::string& expression_text) const;  // match by canonical expr
  const HashIndexData* hash_index(const std::string& column) const;
  const RangeDirectoryData* directory_from(const std::string& parent) const;
  const ZoneMapData* zone_map(const std::string& column) const;
  const CharMaskData* char_mask(const std::string& column, bool bigram) const;

  // Dictionary strings flattened to offsets + bytes for the emitted-kernel
  // ABI; built lazily, cached per column.
  struct DictArena {
    std::vector<uint64_t> offsets;
    std::string bytes;
  };
  mutable std::map<size_t, DictArena> dict_arenas;
  void ensure_dict_arena(size_t column) const;
};

struct BespokeStore {
  StoragePlan plan;
  std::map<std::string, StoreTable> tables;
  uint64_t build_count = 0;  // bumped by every build_store call on the host
};

BespokeStore build_store(const StoragePlan& plan, const RelationMap& relations,
                         const contract::Contract& contract);

// Reconstructs the flat relations, restoring ingestion row order.
RelationMap materialize_flat(const BespokeStore& store);

}  // namespace bespoke::planner
