#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "bespoke/datastore.hpp"
#include "bespoke/kernel_emit.hpp"
#include "bespoke/kernelgen.hpp"

namespace bespoke::runtime {

bool toolchain_available();

// A compiled-and-loaded kernel unit. The dlopen handle stays open for the
// process lifetime; units are never unloaded (swapped-out kernels are
// retained, eliminating use-after-swap hazards).
struct LoadedUnit {
  std::string source_path;
  std::string object_path;
  void* handle = nullptr;
  kernelgen::EntryFn entry = nullptr;
  std::string entry_symbol;
  kernelgen::ResolvedSlots slots;

  ~LoadedUnit();  // keeps the handle open; releases nothing by design
};

// Compiles emitted source into a shared object under build_dir. Throws
// ToolchainMissing or CompileErrors with file/line diagnostics.
std::string compile_unit(const std::string& source, const std::string& build_dir, const std::string& unit_name);

// dlopens a compiled unit and resolves its manifest against the live store.
// Throws SymbolMissing / AbiMismatch.
std::shared_ptr<LoadedUnit> load_unit(const std::string& object_path, const std::string& entry_symbol,
                                      const std::string& manifest_json, const planner::BespokeStore& store);

// An executable kernel: interpreted pipeline or a loaded unit.
struct InstalledKernel {
  kernelgen::KernelSpec spec;
  bool tracing = false;
  std::shared_ptr<kernelgen::InterpretedKernel> interp;
  std::shared_ptr<LoadedUnit> unit;

  oracle::ResultSet run(const contract::ParamBinding& binding, kernelgen::TraceReport* trace = nullptr) const;
};

// (template, region) -> current kernel + version. Single mutator; lookups are
// safe from a reader thread, and a swap is atomic with respect to any single
// dispatch.
class DispatchTable {
 public:
  struct Entry {
    kernelgen::RegionPredicate region;
    std::shared_ptr<const InstalledKernel> kernel;
    uint64_t version = 0;
  };

  // Replaces all regions of a template; returns the new version.
  uint64_t swap(const std::string& template_id,
                std::vector<std::pair<kernelgen::RegionPredicate, std::shared_ptr<const InstalledKernel>>> kernels);

  std::shared_ptr<const InstalledKernel> lookup(const std::string& template_id,
                                                const contract::ParamBinding& binding) const;
  std::vector<Entry> entries(const std::string& template_id) const;
  uint64_t version(const std::string& template_id) const;
  std::vector<std::string> templates() const;
  void clear();

  size_t retained_count() const { return retired_.size(); }

 private:
  struct Regions {
    std::vector<Entry> entries;
  };
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<const Regions>> map_;
  uint64_t next_version_ = 1;
  std::vector<std::shared_ptr<const InstalledKernel>> retired_;  // never reclaimed
};

enum class MeasureMode : uint8_t { WallTime, WorkUnits };

struct Measurement {
  std::string template_id;
  size_t reps = 0;
  size_t warmup = 0;
  bool pinned = false;
  MeasureMode mode = MeasureMode::WallTime;
  // Seconds for WallTime, loop iterations for WorkUnits.
  std::vector<std::vector<double>> times;     // per binding, per rep
  std::vector<double> per_binding_min;
  std::optional<kernelgen::TraceReport> trace;

  double total_min() const;    // sum of per-binding minima
  double median_min() const;   // median of per-binding minima
};

// Pins the calling thread to `core` when supported; returns success.
bool pin_to_core(int core);

// Runs warmup + reps timed executions per binding with tracing off (WallTime)
// or over an instrumented artifact (WorkUnits, deterministic).
Measurement benchmark_kernel(const InstalledKernel& kernel, const std::vector<contract::ParamBinding>& bindings,
                             size_t warmup, size_t reps, std::optional<int> core,
                             MeasureMode mode = MeasureMode::WallTime);

// The living engine process: resident store, dispatch table, oracle fallback.
// Kernel swaps never reload data; only an explicit replan rebuilds storage.
class EngineHost {
 public:
  EngineHost(contract::Contract contract, std::vector<double> validation_factors, uint64_t seed);

  void ingest(const std::string& dataset_path);
  void ingest_relations(RelationMap relations);  // for synthetic workloads
  uint64_t ingest_count() const { return ingest_count_; }
  uint64_t store_build_count() const { return store_ ? store_->build_count : 0; }

  // Commits a storage plan: builds the store (and the downscaled variants)
  // and invalidates every installed kernel.
  void apply_plan(const planner::StoragePlan& plan);
  const planner::StoragePlan& plan() const { return plan_; }
  bool has_plan() const { return store_ != nullptr; }

  const contract::Contract& contract() const { return contract_; }
  const DatasetHeader& stats() const { return header_; }
  const RelationMap& relations() const { return relations_; }
  const RelationMap& relations_at(double factor) const;
  const planner::BespokeStore& store() const { return *store_; }
  const planner::BespokeStore& store_at(double factor) const;
  const sql::QueryAst& ast(const std::string& template_id) const;
  const std::vector<double>& validation_factors() const { return factors_; }

  // Instantiates an artifact against the resident store (interpreted) or
  // compiles + loads it (emitted). build_dir receives compiled objects.
  std::shared_ptr<const InstalledKernel> install(const kernelgen::KernelArtifact& artifact,
                                                 const std::string& build_dir, int version_hint = 0);
  // Same against a downscaled store (interpreted only; used for validation).
  std::shared_ptr<const InstalledKernel> install_scaled(const kernelgen::KernelSpec& spec, double factor);

  DispatchTable& dispatch() { return dispatch_; }
  const DispatchTable& dispatch() const { return dispatch_; }

  // Dispatch + execute; falls back to NoKernel when no region matches.
  oracle::ResultSet run(const std::string& template_id, const contract::ParamBinding& binding,
                        kernelgen::TraceReport* trace = nullptr) const;

  // Ad-hoc path: materializes flat relations from the store and runs the
  // oracle executor over them.
  oracle::ResultSet run_adhoc(const std::string& query_text) const;

  // Replaces the contract without reloading data; requires an identical
  // schema (throws SchemaChanged otherwise). Used by live resynthesis.
  void reset_contract(contract::Contract next, bool keep_store);

  uint64_t seed() const { return seed_; }

 private:
  contract::Contract contract_;
  std::vector<double> factors_;
  uint64_t seed_;
  RelationMap relations_;
  DatasetHeader header_;
  uint64_t ingest_count_ = 0;
  planner::StoragePlan plan_;
  std::shared_ptr<planner::BespokeStore> store_;
  std::map<double, RelationMap> scaled_relations_;
  std::map<double, std::shared_ptr<planner::BespokeStore>> scaled_stores_;
  DispatchTable dispatch_;
  std::map<std::string, sql::QueryAst> asts_;
  uint64_t store_builds_ = 0;
};

}  // namespace bespoke::runtime
