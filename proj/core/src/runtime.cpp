#include "bespoke/runtime.hpp"

#include <dlfcn.h>
#include <pthread.h>
#include <sched.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "bespoke/errors.hpp"

namespace fs = std::filesystem;

namespace bespoke::runtime {

namespace {

const char* compiler_path() {
  if (const char* env = std::getenv("BESPOKE_CXX")) return env;
  return "g++";
}

}  // namespace

bool toolchain_available() {
  static int cached = -1;
  if (cached < 0) {
    std::string cmd = std::string(compiler_path()) + " --version > /dev/null 2>&1";
    cached = std::system(cmd.c_str()) == 0 ? 1 : 0;
  }
  return cached == 1;
}

LoadedUnit::~LoadedUnit() = default;

std::string compile_unit(const std::string& source, const std::string& build_dir, const std::string& unit_name) {
  if (!toolchain_available()) throw ToolchainMissing();
  fs::create_directories(build_dir);
  fs::path src = fs::path(build_dir) / (unit_name + ".cc");
  fs::path obj = fs::path(build_dir) / (unit_name + ".so");
  fs::path log = fs::path(build_dir) / (unit_name + ".log");
  {
    std::ofstream out(src, std::ios::binary);
    out << source;
  }
  std::string cmd = std::string(compiler_path()) + " -std=c++20 -O2 -shared -fPIC -o " + obj.string() + " " +
                    src.string() + " 2> " + log.string();
  int rc = std::system(cmd.c_str());
  if (rc != 0) {
    std::ifstream in(log);
    std::vector<CompileDiagnostic> diags;
    std::string line;
    // g++ diagnostics: <file>:<line>:<col>: error: <message>
    std::regex re(R"(([^:]+):(\d+):(?:\d+:)?\s*(?:fatal )?error:\s*(.*))");
    while (std::getline(in, line)) {
      std::smatch m;
      if (std::regex_match(line, m, re)) diags.push_back({m[1], std::stoi(m[2]), m[3]});
    }
    if (diags.empty()) diags.push_back({src.string(), 0, "compiler exited with status " + std::to_string(rc)});
    throw CompileErrors(std::move(diags));
  }
  return obj.string();
}

std::shared_ptr<LoadedUnit> load_unit(const std::string& object_path, const std::string& entry_symbol,
                                      const std::string& manifest_json, const planner::BespokeStore& store) {
  kernelgen::ResolvedSlots slots = kernelgen::resolve_slots(manifest_json, store);
  if (slots.abi_hash != kernelgen::abi_signature_hash())
    throw AbiMismatch(kernelgen::abi_signature_hash(), slots.abi_hash);

  void* handle = dlopen(object_path.c_str(), RTLD_NOW | RTLD_LOCAL);
  if (!handle) throw Error(std::string("dlopen failed: ") + dlerror());
  void* sym = dlsym(handle, entry_symbol.c_str());
  if (!sym) throw SymbolMissing(entry_symbol);

  auto unit = std::make_shared<LoadedUnit>();
  unit->object_path = object_path;
  unit->handle = handle;
  unit->entry = reinterpret_cast<kernelgen::EntryFn>(sym);
  unit->entry_symbol = entry_symbol;
  unit->slots = std::move(slots);
  return unit;
}

oracle::ResultSet InstalledKernel::run(const contract::ParamBinding& binding,
                                       kernelgen::TraceReport* trace) const {
  try {
    if (interp) return interp->run(binding, trace);
    std::vector<uint64_t> counters;
    uint64_t* buf = nullptr;
    if (tracing && !unit->slots.counter_names.empty()) {
      counters.assign(unit->slots.counter_names.size(), 0);
      buf = counters.data();
    }
    oracle::ResultSet rs = kernelgen::run_emitted(unit->entry, unit->slots, binding, buf);
    if (trace && buf) {
      trace->ops.clear();
      for (size_t i = 0; i < counters.size(); ++i)
        trace->ops.push_back({unit->slots.counter_names[i], counters[i], 0, 0});
    }
    return rs;
  } catch (const Error&) {
    throw;  // typed engine errors keep their meaning
  } catch (const std::exception& e) {
    throw KernelPanic(e.what());
  }
}

uint64_t DispatchTable::swap(
    const std::string& template_id,
    std::vector<std::pair<kernelgen::RegionPredicate, std::shared_ptr<const InstalledKernel>>> kernels) {
  auto regions = std::make_shared<Regions>();
  std::unique_lock lock(mu_);
  uint64_t v = next_version_++;
  for (auto& [pred, k] : kernels) regions->entries.push_back({pred, std::move(k), v});
  auto it = map_.find(template_id);
  if (it != map_.end())
    for (const auto& e : it->second->entries) retired_.push_back(e.kernel);
  map_[template_id] = std::move(regions);
  return v;
}

std::shared_ptr<const InstalledKernel> DispatchTable::lookup(const std::string& template_id,
                                                             const contract::ParamBinding& binding) const {
  std::shared_ptr<const Regions> regions;
  {
    std::shared_lock lock(mu_);
    auto it = map_.find(template_id);
    if (it == map_.end()) return nullptr;
    regions = it->second;
  }
  for (const auto& e : regions->entries)
    if (e.region.contains(binding)) return e.kernel;
  return nullptr;
}

std::vector<DispatchTable::Entry> DispatchTable::entries(const std::string& template_id) const {
  std::shared_lock lock(mu_);
  auto it = map_.find(template_id);
  return it == map_.end() ? std::vector<Entry>{} : it->second->entries;
}

uint64_t DispatchTable::version(const std::string& template_id) const {
  std::shared_lock lock(mu_);
  auto it = map_.find(template_id);
  return it == map_.end() || it->second->entries.empty() ? 0 : it->second->entries.front().version;
}

std::vector<std::string> DispatchTable::templates() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, _] : map_) out.push_back(id);
  return out;
}

void DispatchTable::clear() {
  std::unique_lock lock(mu_);
  for (auto& [id, regions] : map_)
    for (const auto& e : regions->entries) retired_.push_back(e.kernel);
  map_.clear();
}

double Measurement::total_min() const {
  double t = 0;
  for (double v : per_binding_min) t += v;
  return t;
}

double Measurement::median_min() const {
  if (per_binding_min.empty()) return 0;
  std::vector<double> s = per_binding_min;
  std::sort(s.begin(), s.end());
  size_t n = s.size();
  return n % 2 ? s[n / 2] : (s[n / 2 - 1] + s[n / 2]) / 2;
}

bool pin_to_core(int core) {
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(core, &set);
  return pthread_setaffinity_np(pthread_self(), sizeof(set), &set) == 0;
}

Measurement benchmark_kernel(const InstalledKernel& kernel, const std::vector<contract::ParamBinding>& bindings,
                             size_t warmup, size_t reps, std::optional<int> core, MeasureMode mode) {
  if (mode == MeasureMode::WorkUnits && !kernel.tracing)
    throw Error("work-unit measurement requires a tracing kernel");
  Measurement m;
  m.template_id = kernel.spec.template_id;
  m.reps = reps;
  m.warmup = warmup;
  m.mode = mode;
  if (core) m.pinned = pin_to_core(*core);

  using clock = std::chrono::steady_clock;
  for (const auto& b : bindings) {
    for (size_t w = 0; w < warmup; ++w) kernel.run(b);
    std::vector<double> times;
    times.reserve(reps);
    for (size_t r = 0; r < reps; ++r) {
      if (mode == MeasureMode::WorkUnits) {
        kernelgen::TraceReport tr;
        kernel.run(b, &tr);
        times.push_back(double(tr.total_iterations()));
      } else {
        auto t0 = clock::now();
        kernel.run(b);
        auto t1 = clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
      }
    }
    m.per_binding_min.push_back(*std::min_element(times.begin(), times.end()));
    m.times.push_back(std::move(times));
  }
  return m;
}

EngineHost::EngineHost(contract::Contract contract, std::vector<double> validation_factors, uint64_t seed)
    : contract_(std::move(contract)), factors_(std::move(validation_factors)), seed_(seed) {
  for (const auto& tmpl : contract_.templates) asts_.emplace(tmpl.id, sql::parse_query(tmpl.text, contract_));
}

void EngineHost::ingest(const std::string& dataset_path) {
  auto loaded = datastore::load_dataset(dataset_path, contract_.tables);
  ingest_relations(std::move(loaded.relations));
}

void EngineHost::ingest_relations(RelationMap relations) {
  relations_ = std::move(relations);
  header_ = datastore::compute_header(relations_);
  ++ingest_count_;
  scaled_relations_.clear();
  for (double f : factors_) {
    if (f >= 1.0) continue;
    scaled_relations_[f] = datastore::downscale(relations_, contract_.tables, f, seed_);
  }
}

void EngineHost::apply_plan(const planner::StoragePlan& plan) {
  plan_ = plan;
  ++store_builds_;
  store_ = std::make_shared<planner::BespokeStore>(planner::build_store(plan, relations_, contract_));
  store_->build_count = store_builds_;
  scaled_stores_.clear();
  for (auto& [f, rels] : scaled_relations_)
    scaled_stores_[f] = std::make_shared<planner::BespokeStore>(planner::build_store(plan, rels, contract_));
  dispatch_.clear();
}

const RelationMap& EngineHost::relations_at(double factor) const {
  if (factor >= 1.0) return relations_;
  auto it = scaled_relations_.find(factor);
  if (it == scaled_relations_.end()) throw FatalSetupError("no downscaled dataset at requested factor");
  return it->second;
}

const planner::BespokeStore& EngineHost::store_at(double factor) const {
  if (factor >= 1.0) return *store_;
  auto it = scaled_stores_.find(factor);
  if (it == scaled_stores_.end()) throw FatalSetupError("no downscaled store at requested factor");
  return *it->second;
}

const sql::QueryAst& EngineHost::ast(const std::string& template_id) const {
  auto it = asts_.find(template_id);
  if (it == asts_.end()) throw UnknownPath(template_id);
  return it->second;
}

std::shared_ptr<const InstalledKernel> EngineHost::install(const kernelgen::KernelArtifact& artifact,
                                                           const std::string& build_dir, int version_hint) {
  auto k = std::make_shared<InstalledKernel>();
  k->spec = artifact.spec;
  k->tracing = artifact.tracing;
  if (artifact.backend == kernelgen::KernelArtifact::Backend::Interpreted) {
    k->interp = artifact.interp
                    ? artifact.interp
                    : std::shared_ptr<kernelgen::InterpretedKernel>(kernelgen::InterpretedKernel::build(
                          artifact.spec, ast(artifact.spec.template_id), *store_, contract_, artifact.tracing));
    return k;
  }
  std::string unit_name = "q_" + artifact.spec.template_id + "_v" + std::to_string(version_hint);
  std::string obj = compile_unit(artifact.source, build_dir, unit_name);
  k->unit = load_unit(obj, artifact.entry_symbol, artifact.manifest_json, *store_);
  return k;
}

std::shared_ptr<const InstalledKernel> EngineHost::install_scaled(const kernelgen::KernelSpec& spec,
                                                                  double factor) {
  auto k = std::make_shared<InstalledKernel>();
  k->spec = spec;
  k->tracing = false;
  k->interp = std::shared_ptr<kernelgen::InterpretedKernel>(
      kernelgen::InterpretedKernel::build(spec, ast(spec.template_id), store_at(factor), contract_, false));
  return k;
}

oracle::ResultSet EngineHost::run(const std::string& template_id, const contract::ParamBinding& binding,
                                  kernelgen::TraceReport* trace) const {
  auto kernel = dispatch_.lookup(template_id, binding);
  if (!kernel) throw NoKernel(template_id);
  return kernel->run(binding, trace);
}

oracle::ResultSet EngineHost::run_adhoc(const std::string& query_text) const {
  if (!store_) throw FatalSetupError("no store resident");
  RelationMap flat = planner::materialize_flat(*store_);
  sql::QueryAst ast2 = sql::parse_query(query_text, contract_);
  return oracle::execute(ast2, flat);
}

namespace {

bool same_schema(const contract::Contract& a, const contract::Contract& b) {
  if (a.tables.size() != b.tables.size()) return false;
  for (size_t i = 0; i < a.tables.size(); ++i) {
    const auto& x = a.tables[i];
    const auto& y = b.tables[i];
    if (x.name != y.name || x.primary_key != y.primary_key || x.columns.size() != y.columns.size() ||
        x.foreign_keys.size() != y.foreign_keys.size())
      return false;
    for (size_t c = 0; c < x.columns.size(); ++c)
      if (x.columns[c].name != y.columns[c].name || !(x.columns[c].type == y.columns[c].type) ||
          x.columns[c].nullable != y.columns[c].nullable)
        return false;
    for (size_t f = 0; f < x.foreign_keys.size(); ++f)
      if (x.foreign_keys[f].column != y.foreign_keys[f].column ||
          x.foreign_keys[f].parent_table != y.foreign_keys[f].parent_table ||
          x.foreign_keys[f].parent_column != y.foreign_keys[f].parent_column)
        return false;
  }
  return true;
}

}  // namespace

void EngineHost::reset_contract(contract::Contract next, bool keep_store) {
  if (!same_schema(contract_, next)) throw SchemaChanged("table definitions differ from the resident schema");
  contract_ = std::move(next);
  asts_.clear();
  for (const auto& tmpl : contract_.templates) asts_.emplace(tmpl.id, sql::parse_query(tmpl.text, contract_));
  dispatch_.clear();
  if (!keep_store) {
    store_.reset();
    scaled_stores_.clear();
  }
}

}  // namespace bespoke::runtime
