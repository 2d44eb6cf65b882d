#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bespoke/kernel_spec.hpp"
#include "bespoke/oracle.hpp"
#include "bespoke/sql.hpp"
#include "bespoke/store.hpp"

namespace bespoke::kernelgen {

// C ABI between the host and emitted kernels. The emitted source re-declares
// these structs verbatim; the layout is hashed and checked at load time.
extern "C" {
struct bq_binding {
  const long long* ints;
  const char* const* strs;
};

struct bq_sink {
  void* ctx;
  void (*begin_row)(void*);
  void (*cell_i64)(void*, long long);
  void (*cell_f64)(void*, double);
  void (*cell_str)(void*, const char*, unsigned long long);
  void (*cell_null)(void*);
  void (*error)(void*, const char*);
};
}

using EntryFn = int (*)(const void* const* slots, const bq_binding* binding, const bq_sink* sink,
                        unsigned long long* trace_buf);

// FNV-1a over the ABI declaration text; embedded in every manifest.
uint64_t abi_signature_hash();

struct EmittedKernel {
  std::string source;
  std::string entry_symbol;   // bespoke_q_<template id>
  std::string manifest_json;  // slots, params, columns, counters, abi hash
};

EmittedKernel emit_kernel_source(const KernelSpec& spec, const sql::QueryAst& ast,
                                 const planner::BespokeStore& store, const contract::Contract& contract,
                                 bool tracing);

// Host-side resolution of a manifest against a live store. Owns the scalar
// cells (row counts, epochs) the slot pointers reference.
struct ResolvedSlots {
  std::vector<const void*> slots;
  std::vector<uint64_t> scalar_cells;
  uint64_t abi_hash = 0;
  std::vector<std::string> counter_names;
  std::vector<std::string> int_params;
  std::vector<std::string> str_params;
  std::vector<std::pair<std::string, ColumnType>> columns;
};

ResolvedSlots resolve_slots(const std::string& manifest_json, const planner::BespokeStore& store);

// Runs an emitted entry against a binding; marshals parameters and collects
// the result set. Throws KernelPanic when the kernel reports an error.
oracle::ResultSet run_emitted(EntryFn entry, const ResolvedSlots& slots, const contract::ParamBinding& binding,
                              uint64_t* trace_buf);

}  // namespace bespoke::kernelgen
