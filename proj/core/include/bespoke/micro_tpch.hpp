#pragma once

#include <cstdint>
#include <string>

#include "bespoke/contract.hpp"
#include "bespoke/relation.hpp"

namespace bespoke::workloads {

// The bundled TPC-H-flavored micro workload: 8 tables, 5 templates covering
// range scans, a 6-table join, a semi-join, an infix LIKE and a wide
// aggregation. scale 1.0 yields ~60k lineitem rows.
std::string micro_tpch_contract_text(const std::string& dataset_path);
contract::Contract micro_tpch_contract(const std::string& dataset_path);

RelationMap generate_micro_tpch(double scale = 1.0, uint64_t seed = 42);

// Writes <dir>/contract.bdl plus data/*.csv under <dir>.
void write_micro_tpch(const std::string& dir, double scale = 1.0, uint64_t seed = 42);

}  // namespace bespoke::workloads
