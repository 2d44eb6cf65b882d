#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bespoke/contract.hpp"
#include "bespoke/relation.hpp"

namespace bespoke::datastore {

// Pluggable ingestion format. The required on-disk form is CSV with a header
// row and RFC-4180 quoting; other formats (e.g. Parquet) can implement this
// interface without touching the loader.
class DatasetReader {
 public:
  virtual ~DatasetReader() = default;
  virtual bool has_table(const std::string& dir, const std::string& table) const = 0;
  virtual Relation read_table(const std::string& dir, const contract::TableSchema& schema) const = 0;
};

const DatasetReader& csv_reader();

struct LoadResult {
  RelationMap relations;
  DatasetHeader header;
};

// Loads <table>.csv for every declared table and computes exact statistics.
// strict_fk additionally verifies every declared foreign key resolves.
LoadResult load_dataset(const std::string& path, const std::vector<contract::TableSchema>& tables,
                        bool strict_fk = false, const DatasetReader& reader = csv_reader());

TableStats compute_stats(const Relation& rel);
DatasetHeader compute_header(const RelationMap& relations);

// Referentially consistent downscale: root tables (no inbound FK) are sampled
// to ceil(factor * rows); referenced tables keep their own sample plus the FK
// closure of everything retained. Samples nest across factors for a fixed
// seed, so rc(f1) <= rc(f2) whenever f1 <= f2.
RelationMap downscale(const RelationMap& relations, const std::vector<contract::TableSchema>& tables,
                      double factor, uint64_t seed);

void write_csv(const Relation& rel, const std::string& file_path);
void write_dataset_csv(const RelationMap& relations, const std::string& dir);

}  // namespace bespoke::datastore
