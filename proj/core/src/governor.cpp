#include "bespoke/governor.hpp"

#include <json.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "bespoke/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bespoke::governor {

std::string Config::to_json() const {
  json j;
  j["validation_bindings"] = validation_bindings;
  j["factors"] = factors;
  j["warmup"] = warmup;
  j["reps"] = reps;
  j["bench_bindings"] = bench_bindings;
  j["epsilon"] = epsilon;
  j["beam"] = beam;
  if (core) j["core"] = *core;
  j["emitted_backend"] = emitted_backend;
  j["measure"] = measure == runtime::MeasureMode::WallTime ? "walltime" : "workunits";
  j["seed"] = seed;
  return j.dump(2);
}

Config Config::from_json(const std::string& text) {
  json j = json::parse(text);
  Config c;
  c.validation_bindings = j.value("validation_bindings", size_t(20));
  c.factors = j.value("factors", std::vector<double>{1.0, 0.25, 0.1});
  c.warmup = j.value("warmup", size_t(2));
  c.reps = j.value("reps", size_t(5));
  c.bench_bindings = j.value("bench_bindings", size_t(5));
  c.epsilon = j.value("epsilon", 0.02);
  c.beam = j.value("beam", size_t(4));
  if (j.contains("core")) c.core = j.at("core").get<int>();
  c.emitted_backend = j.value("emitted_backend", false);
  c.measure = j.value("measure", "walltime") == std::string("workunits") ? runtime::MeasureMode::WorkUnits
                                                                         : runtime::MeasureMode::WallTime;
  c.seed = j.value("seed", uint64_t(0));
  return c;
}

Governor::Governor(runtime::EngineHost& host, Workspace& workspace, Config config)
    : host_(host), workspace_(workspace), config_(std::move(config)) {
  if (config_.seed == 0) config_.seed = host_.contract().seed;
  report_.measure_unit = config_.measure == runtime::MeasureMode::WallTime ? "seconds" : "work units";
}

const std::vector<contract::ParamBinding>& Governor::validation_set(const std::string& template_id) {
  auto it = validation_bindings_.find(template_id);
  if (it != validation_bindings_.end()) return it->second;
  const auto* tmpl = host_.contract().find_template(template_id);
  auto res = validation_bindings_.emplace(
      template_id, contract::sample_bindings(*tmpl, config_.validation_bindings, config_.seed ^ 0x5eedull));
  return res.first->second;
}

const std::vector<contract::ParamBinding>& Governor::bench_set(const std::string& template_id) {
  auto it = bench_bindings_.find(template_id);
  if (it != bench_bindings_.end()) return it->second;
  const auto* tmpl = host_.contract().find_template(template_id);
  auto res = bench_bindings_.emplace(
      template_id, contract::sample_bindings(*tmpl, config_.bench_bindings, config_.seed ^ 0xbe9c4ull));
  return res.first->second;
}

const std::vector<oracle::ResultSet>& Governor::expected_results(const std::string& template_id, double factor) {
  auto key = std::make_pair(template_id, factor);
  auto it = expected_.find(key);
  if (it != expected_.end()) return it->second;
  const auto& ast = host_.ast(template_id);
  const auto& relations = host_.relations_at(factor);
  std::vector<oracle::ResultSet> out;
  // The reference engine is pluggable; the built-in oracle is the default.
  oracle::ReferenceEngine& reference = oracle::builtin_reference();
  for (const auto& b : validation_set(template_id)) {
    auto inst = sql::instantiate(ast, b);
    out.push_back(oracle::canonicalize(reference.run(inst, relations), ast.order_by));
  }
  return expected_.emplace(key, std::move(out)).first->second;
}

double Governor::metric_of(const runtime::Measurement& m) const {
  return host_.contract().objective == contract::Objective::PerQueryMedian ? m.median_min() : m.total_min();
}

void Governor::write_kernel_file(
    const std::string& template_id,
    const std::vector<std::pair<kernelgen::RegionPredicate, kernelgen::KernelSpec>>& regions) {
  KernelFile f;
  f.template_id = template_id;
  f.backend = config_.emitted_backend ? "emitted" : "interpreted";
  f.regions = regions;
  std::string rel = workspace_.kernel_file(template_id);
  std::string old_text = workspace_.exists(rel) ? workspace_.read(rel) : "";
  Patch p = make_patch(rel, old_text, f.to_json());
  if (!p.hunks.empty()) tool_patch(p);
}

void Governor::tool_patch(const Patch& p) {
  // Log entries carry a payload digest so transcripts identify exact diffs.
  std::string digest = snapshot::sha256_hex(p.to_json()).substr(0, 12);
  try {
    workspace_.apply(p);
    log_.add("patch", p.path + "#" + digest, true, p.changed_lines());
  } catch (const Error&) {
    log_.add("patch", p.path + "#" + digest, false, 0);
    throw;
  }
}

void Governor::tool_compile(const std::string& template_id) {
  try {
    install_current(template_id);
    log_.add("compile", template_id, true);
  } catch (const Error& e) {
    log_.add("compile", std::string(template_id) + ": " + e.what(), false);
    throw;
  }
}

void Governor::install_current(const std::string& template_id, bool traced_twin) {
  KernelFile f = KernelFile::from_json(workspace_.read(workspace_.kernel_file(template_id)));
  const auto& ast = host_.ast(template_id);
  std::vector<std::pair<kernelgen::RegionPredicate, std::shared_ptr<const runtime::InstalledKernel>>> kernels;

  for (const auto& [region, spec] : f.regions) {
    kernelgen::KernelArtifact art;
    if (f.backend == "emitted") {
      art = kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::EmittedSource, false, ast,
                                   host_.store(), host_.contract());
      uint64_t v = host_.dispatch().version(template_id) + 1;
      workspace_.write(workspace_.kernel_source_file(template_id, v), art.source);
      kernels.push_back({region, host_.install(art, workspace_.build_dir(), int(v))});
    } else {
      art = kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::Interpreted, false, ast,
                                   host_.store(), host_.contract());
      kernels.push_back({region, host_.install(art, workspace_.build_dir())});
    }
  }
  host_.dispatch().swap(template_id, std::move(kernels));
  (void)traced_twin;
}

void Governor::install_all() {
  for (const auto& tmpl : host_.contract().templates) {
    if (workspace_.exists(workspace_.kernel_file(tmpl.id))) install_current(tmpl.id);
  }
}

Governor::BenchmarkResult Governor::tool_benchmark(const std::string& template_id, bool timed) {
  BenchmarkResult result;
  const auto& ast = host_.ast(template_id);
  const auto& bindings = validation_set(template_id);

  // Correctness first, smallest scale first, full scale last.
  std::vector<double> factors = config_.factors;
  std::sort(factors.begin(), factors.end());
  KernelFile f = KernelFile::from_json(workspace_.read(workspace_.kernel_file(template_id)));

  for (double factor : factors) {
    const auto& expected = expected_results(template_id, factor);
    // Instantiate each region's spec against the scaled store.
    std::vector<std::pair<kernelgen::RegionPredicate, std::shared_ptr<const runtime::InstalledKernel>>> scaled;
    for (const auto& [region, spec] : f.regions) {
      if (factor >= 1.0) break;  // full scale runs through the dispatch table
      scaled.push_back({region, host_.install_scaled(spec, factor)});
    }
    for (size_t i = 0; i < bindings.size(); ++i) {
      oracle::ResultSet actual;
      try {
        if (factor >= 1.0) {
          actual = host_.run(template_id, bindings[i]);
        } else {
          std::shared_ptr<const runtime::InstalledKernel> k;
          for (auto& [region, kern] : scaled)
            if (region.contains(bindings[i])) {
              k = kern;
              break;
            }
          if (!k) throw NoKernel(template_id);
          actual = k->run(bindings[i]);
        }
      } catch (const Error& e) {
        result.correct = false;
        result.first_mismatch = "binding " + std::to_string(i) + " at factor " + std::to_string(factor) + ": " +
                                e.what();
        log_.add("benchmark", template_id + " (failed)", false);
        return result;
      }
      auto mm = oracle::compare(expected[i], oracle::canonicalize(std::move(actual), ast.order_by));
      if (mm) {
        result.correct = false;
        result.first_mismatch = "binding " + std::to_string(i) + " at factor " + std::to_string(factor) + ": " +
                                mm->to_string();
        log_.add("benchmark", template_id + " (mismatch)", false);
        return result;
      }
    }
  }

  if (timed) {
    // Region-aware measurement through the dispatch table, preserving the
    // binding order so split winners can be compared per binding. Work-unit
    // measurement counts loop iterations, which requires traced twins.
    runtime::Measurement merged;
    merged.template_id = template_id;
    merged.reps = config_.reps;
    merged.warmup = config_.warmup;
    merged.mode = config_.measure;
    std::map<const runtime::InstalledKernel*, std::shared_ptr<runtime::InstalledKernel>> traced;
    for (const auto& b : bench_set(template_id)) {
      auto kernel = host_.dispatch().lookup(template_id, b);
      if (!kernel) throw NoKernel(template_id);
      const runtime::InstalledKernel* measured = kernel.get();
      if (config_.measure == runtime::MeasureMode::WorkUnits) {
        auto& twin = traced[kernel.get()];
        if (!twin) {
          twin = std::make_shared<runtime::InstalledKernel>();
          twin->spec = kernel->spec;
          twin->tracing = true;
          twin->interp = std::shared_ptr<kernelgen::InterpretedKernel>(kernelgen::InterpretedKernel::build(
              kernel->spec, ast, host_.store(), host_.contract(), true));
        }
        measured = twin.get();
      }
      auto m = runtime::benchmark_kernel(*measured, {b}, config_.warmup, config_.reps, config_.core,
                                         config_.measure);
      merged.pinned = m.pinned;
      merged.per_binding_min.push_back(m.per_binding_min[0]);
      merged.times.push_back(std::move(m.times[0]));
    }
    result.measurement = std::move(merged);
  }
  log_.add("benchmark", template_id, true);
  return result;
}

std::string Governor::tool_inspect(const std::string& path) {
  std::string out;
  if (path == "plan") {
    out = workspace_.exists(workspace_.plan_file()) ? workspace_.read(workspace_.plan_file()) : "";
  } else if (path.rfind("stats/", 0) == 0) {
    std::string table = path.substr(6);
    auto it = host_.stats().tables.find(table);
    if (it == host_.stats().tables.end()) {
      log_.add("inspect", path, false);
      throw UnknownPath(path);
    }
    std::ostringstream os;
    os << table << " rows=" << it->second.row_count << "\n";
    for (const auto& c : it->second.columns) {
      os << "  " << c.column << " distinct=" << c.distinct_count << " nulls=" << c.null_count;
      if (c.has_minmax) os << " min=" << c.min.to_text() << " max=" << c.max.to_text();
      os << "\n";
    }
    out = os.str();
  } else if (path.rfind("traces/", 0) == 0) {
    std::string rel = path + ".txt";
    if (!workspace_.exists(rel)) {
      log_.add("inspect", path, false);
      throw UnknownPath(path);
    }
    out = workspace_.read(rel);
  } else if (workspace_.exists(path)) {
    out = workspace_.read(path);
  } else {
    log_.add("inspect", path, false);
    throw UnknownPath(path);
  }
  log_.add("inspect", path, true);
  return out;
}

std::string Governor::snapshot_commit() {
  auto payload = workspace_.capture_state();
  std::string id = workspace_.snapshots().commit(payload, baseline_.head_snapshot_id);
  baseline_.head_snapshot_id = id;
  return id;
}

void Governor::rollback(const std::string& id) {
  auto payload = workspace_.snapshots().restore(id);
  workspace_.restore_state(payload);
  baseline_.head_snapshot_id = id;
  // Rehydrate the engine from the restored files.
  if (workspace_.exists(workspace_.plan_file())) {
    auto plan = planner::StoragePlan::from_text(workspace_.read(workspace_.plan_file()));
    if (plan.to_text() != host_.plan().to_text() || !host_.has_plan()) host_.apply_plan(plan);
  }
  install_all();
}

EvalOutcome Governor::evaluate_candidate(const Candidate& c) {
  EvalOutcome outcome;
  const std::string pre_snapshot = baseline_.head_snapshot_id;
  auto* bl = baseline_.templates.count(c.template_id) ? &baseline_.templates[c.template_id] : nullptr;
  bool replan = c.replan.has_value();

  try {
    if (replan) {
      std::string old_plan = workspace_.exists(workspace_.plan_file()) ? workspace_.read(workspace_.plan_file()) : "";
      Patch p = make_patch(workspace_.plan_file(), old_plan, c.replan->to_text());
      if (!p.hunks.empty()) tool_patch(p);
      host_.apply_plan(*c.replan);
    }
    write_kernel_file(c.template_id, c.regions);
    if (replan) {
      install_all();
      log_.add("compile", "all (replan)", true);
    } else {
      tool_compile(c.template_id);
    }
  } catch (const Error& e) {
    outcome.kind = EvalOutcome::Kind::RejectCorrectness;
    outcome.detail = e.what();
    rollback(pre_snapshot);
    return outcome;
  }

  BenchmarkResult bench = tool_benchmark(c.template_id);
  bool all_ok = bench.correct;
  std::string detail = bench.first_mismatch;
  if (all_ok && replan) {
    // Shared-component change: every other template must stay correct.
    for (const auto& tmpl : host_.contract().templates) {
      if (tmpl.id == c.template_id || !workspace_.exists(workspace_.kernel_file(tmpl.id))) continue;
      auto other = tool_benchmark(tmpl.id, /*timed=*/false);
      if (!other.correct) {
        all_ok = false;
        detail = tmpl.id + ": " + other.first_mismatch;
        break;
      }
    }
  }
  if (!all_ok) {
    outcome.kind = EvalOutcome::Kind::RejectCorrectness;
    outcome.detail = detail;
    rollback(pre_snapshot);
    return outcome;
  }

  outcome.measurement = bench.measurement;
  outcome.new_metric = metric_of(bench.measurement);
  if (bl) {
    outcome.old_metric = bl->metric;
    if (outcome.new_metric >= bl->metric * (1.0 - config_.epsilon)) {
      outcome.kind = EvalOutcome::Kind::RejectRegression;
      outcome.detail = "no improvement beyond epsilon";
      rollback(pre_snapshot);
      return outcome;
    }
  }

  // Accept: snapshot the new state and update the baseline.
  outcome.kind = EvalOutcome::Kind::Accept;
  std::string id = snapshot_commit();
  auto& tb = baseline_.templates[c.template_id];
  tb.regions = c.regions;
  tb.metric = outcome.new_metric;
  tb.snapshot_id = id;
  tb.accepted_history.push_back(outcome.new_metric);
  if (replan) baseline_.storage_snapshot_id = id;
  return outcome;
}

bool Governor::validate_all(std::string* first_failure) {
  for (const auto& tmpl : host_.contract().templates) {
    if (!workspace_.exists(workspace_.kernel_file(tmpl.id))) continue;
    auto r = tool_benchmark(tmpl.id, /*timed=*/false);
    if (!r.correct) {
      if (first_failure) *first_failure = tmpl.id + ": " + r.first_mismatch;
      return false;
    }
  }
  return true;
}

void Governor::stage_plan_storage(bool reuse_existing_plan) {
  if (host_.relations().empty()) throw FatalSetupError("dataset not ingested");
  // The policy inspects the dataset before planning, like any careful DBA.
  for (const auto& t : host_.contract().tables) tool_inspect("stats/" + t.name);

  planner::StoragePlan plan;
  if (reuse_existing_plan && workspace_.exists(workspace_.plan_file())) {
    plan = planner::StoragePlan::from_text(workspace_.read(workspace_.plan_file()));
  } else {
    plan = planner::plan_storage(host_.contract(), host_.stats());
    std::string old_text = workspace_.exists(workspace_.plan_file()) ? workspace_.read(workspace_.plan_file()) : "";
    Patch p = make_patch(workspace_.plan_file(), old_text, plan.to_text());
    if (!p.hunks.empty()) tool_patch(p);
  }
  workspace_.write(workspace_.config_file(), config_.to_json());
  // A reused plan over a resident store keeps storage exactly as-is; the
  // ingestion pipeline never reruns for kernel-only resynthesis.
  if (!(reuse_existing_plan && host_.has_plan() && host_.plan().to_text() == plan.to_text()))
    host_.apply_plan(plan);
  std::string id = snapshot_commit();
  baseline_.storage_snapshot_id = id;
}

void Governor::stage_basic_kernels() {
  for (const auto& tmpl : host_.contract().templates) {
    Candidate c;
    c.template_id = tmpl.id;
    c.regions = {{kernelgen::RegionPredicate{}, kernelgen::basic_spec(host_.ast(tmpl.id), tmpl.id)}};
    c.provenance = "S1:basic";
    EvalOutcome out = evaluate_candidate(c);
    if (out.kind != EvalOutcome::Kind::Accept)
      throw FatalSetupError("basic kernel for " + tmpl.id + " failed: " + out.detail);
  }
}

std::vector<SessionBranch> Governor::branch_sessions(const std::vector<std::string>& templates) {
  std::vector<SessionBranch> out;
  for (const auto& id : templates) {
    SessionBranch b;
    b.template_id = id;
    b.base_snapshot_id = baseline_.head_snapshot_id;
    out.push_back(std::move(b));
  }
  return out;
}

double Governor::current_metric(const std::string& template_id) {
  auto it = baseline_.templates.find(template_id);
  return it == baseline_.templates.end() ? 0.0 : it->second.metric;
}

void Governor::record_stage(const std::string& stage) {
  report_.stage_order.push_back(stage);
  double total = 0;
  for (const auto& tmpl : host_.contract().templates) {
    double m = current_metric(tmpl.id);
    total += m;
    auto it = std::find_if(report_.templates.begin(), report_.templates.end(),
                           [&](const report::TemplateReport& t) { return t.id == tmpl.id; });
    if (it == report_.templates.end()) {
      report_.templates.push_back({});
      it = report_.templates.end() - 1;
      it->id = tmpl.id;
    }
    it->stage_metric[stage] = m;
  }
  report_.stage_total[stage] = total;
}

// --- optimization rounds -----------------------------------------------------

namespace {

std::vector<int> current_order(const TemplateBaseline& bl) { return bl.regions.front().second.join_order; }

}  // namespace

void Governor::round_join_order(SessionBranch& branch) {
  const std::string& tid = branch.template_id;
  const auto& ast = host_.ast(tid);
  if (ast.from.size() < 2) return;

  // One measured plan seeds the search with actual cardinalities.
  auto seed_binding = contract::sample_bindings(*host_.contract().find_template(tid), 1, config_.seed ^ 0x777)[0];
  auto profile = oracle::profile_cardinalities(sql::instantiate(ast, seed_binding), host_.relations());
  auto orders = kernelgen::enumerate_join_orders(ast, profile, config_.beam);
  r1_orders_[tid] = orders;

  std::vector<int> cur = current_order(baseline_.templates[tid]);
  std::vector<kernelgen::SplitMeasurement> measurements;
  for (const auto& b : bench_set(tid)) {
    kernelgen::SplitMeasurement m;
    m.binding = b;
    measurements.push_back(std::move(m));
  }
  auto note_times = [&](const std::vector<int>& order, const runtime::Measurement& m) {
    for (size_t i = 0; i < m.per_binding_min.size() && i < measurements.size(); ++i)
      measurements[i].order_times.push_back({order, m.per_binding_min[i]});
  };

  // Baseline times for the current order.
  auto base_bench = tool_benchmark(tid);
  if (base_bench.correct) note_times(cur, base_bench.measurement);

  for (const auto& order : orders) {
    if (order == cur) continue;
    kernelgen::KernelSpec spec = kernelgen::basic_spec(ast, tid);
    spec.join_order = order;
    Candidate c;
    c.template_id = tid;
    c.regions = {{kernelgen::RegionPredicate{}, spec}};
    c.provenance = "R1:order";
    branch.proposals.push_back(c.provenance);
    EvalOutcome out = evaluate_candidate(c);
    if (out.kind == EvalOutcome::Kind::Accept) {
      ++branch.accepted;
      note_times(order, out.measurement);
    } else if (out.kind == EvalOutcome::Kind::RejectRegression) {
      note_times(order, out.measurement);
    }
  }

  // Conflicting per-binding winners: try region-split kernels.
  std::set<std::vector<int>> winners;
  for (const auto& m : measurements)
    if (const auto* w = m.best_order()) winners.insert(*w);
  if (winners.size() >= 2) {
    auto regions = kernelgen::split_parameter_space(*host_.contract().find_template(tid), ast, host_.plan(),
                                                    host_.stats(), host_.contract(), measurements);
    if (regions.size() >= 1) {
      Candidate c;
      c.template_id = tid;
      c.regions = std::move(regions);
      c.provenance = "R1:split";
      branch.proposals.push_back(c.provenance);
      if (evaluate_candidate(c).kind == EvalOutcome::Kind::Accept) ++branch.accepted;
    }
  }
}

void Governor::round_trace_guided(SessionBranch& branch) {
  const std::string& tid = branch.template_id;
  const auto& ast = host_.ast(tid);
  const auto& bl = baseline_.templates[tid];
  const auto& [region0, spec0] = bl.regions.front();

  // Traced execution of the current kernel on one in-region binding.
  kernelgen::TraceReport trace;
  contract::ParamBinding probe;
  bool found = false;
  for (const auto& b : bench_set(tid))
    if (region0.contains(b)) {
      probe = b;
      found = true;
      break;
    }
  if (!found) return;
  auto traced = kernelgen::InterpretedKernel::build(spec0, ast, host_.store(), host_.contract(), true);
  traced->run(probe, &trace);

  // Persist the trace for inspection.
  {
    std::ostringstream os;
    for (const auto& op : trace.ops)
      os << op.name << "\titer=" << op.iterations << "\trows=" << op.rows_out << "\tns=" << op.ns << "\n";
    workspace_.write("traces/" + tid + ".txt", os.str());
    tool_inspect("traces/" + tid);
  }

  // Exclusive time per operator: inclusive minus the next nested operator.
  // Ties resolve to the lowest operator index.
  struct Scored {
    size_t idx;
    const kernelgen::TraceReport::OpCounters* op;
    double score;
  };
  std::vector<Scored> scored;
  for (size_t i = 0; i < trace.ops.size(); ++i) {
    double inclusive = double(trace.ops[i].ns);
    double child = 0;
    if (trace.ops[i].name.rfind("semi:", 0) != 0 && i + 1 < trace.ops.size() &&
        trace.ops[i + 1].name.rfind("semi:", 0) != 0)
      child = double(trace.ops[i + 1].ns);
    double score = inclusive > child ? inclusive - child : 0;
    if (score == 0) score = double(trace.ops[i].iterations);  // ns-free ops (semi builds)
    scored.push_back({i, &trace.ops[i], score});
  }
  if (scored.empty()) return;
  const Scored* hot = &scored[0];
  for (const auto& s : scored)
    if (s.score > hot->score) hot = &s;

  auto try_candidate = [&](kernelgen::KernelSpec spec, const char* rule) {
    Candidate c;
    c.template_id = tid;
    c.regions = bl.regions;
    for (auto& [r, s] : c.regions) s = spec;
    c.provenance = std::string("R2:") + rule;
    branch.proposals.push_back(c.provenance);
    if (evaluate_candidate(c).kind == EvalOutcome::Kind::Accept) ++branch.accepted;
  };

  const std::string& name = hot->op->name;
  if (name.rfind("join:", 0) == 0) {
    // Identify the step index from the pipeline order.
    std::string table = name.substr(5);
    for (size_t step = 1; step < spec0.join_order.size(); ++step) {
      if (ast.from[size_t(spec0.join_order[step])].table != table) continue;
      for (auto alt : {kernelgen::JoinOp::IndexNestedLoop, kernelgen::JoinOp::HashJoin,
                       kernelgen::JoinOp::SortMerge}) {
        if (alt == spec0.join_ops[step - 1]) continue;
        kernelgen::KernelSpec spec = spec0;
        spec.join_ops[step - 1] = alt;
        try {
          try_candidate(spec, "join-alt");
        } catch (const Error&) {
          // Incompatible alternative; the next one may still apply.
        }
      }
      break;
    }
  } else if (name.rfind("semi:", 0) == 0) {
    for (size_t si = 0; si < spec0.semi_ops.size(); ++si) {
      for (auto alt : {kernelgen::JoinOp::BitmapSemiJoin, kernelgen::JoinOp::TagArrayJoin,
                       kernelgen::JoinOp::HashJoin}) {
        if (alt == spec0.semi_ops[si]) continue;
        kernelgen::KernelSpec spec = spec0;
        spec.semi_ops[si] = alt;
        try {
          try_candidate(spec, "semi-alt");
        } catch (const Error&) {
        }
      }
    }
  } else if (name.rfind("scan:", 0) == 0) {
    // Try the rule-selected access paths for the driver's filters.
    kernelgen::KernelSpec rules = kernelgen::select_strategies(ast, host_.plan(), host_.stats(),
                                                               host_.contract(), spec0.join_order, tid);
    if (rules.filter_paths != spec0.filter_paths) {
      kernelgen::KernelSpec spec = spec0;
      spec.filter_paths = rules.filter_paths;
      try {
        try_candidate(spec, "scan-paths");
      } catch (const Error&) {
      }
    }
  }
}

void Governor::round_catalog(SessionBranch& branch) {
  const std::string& tid = branch.template_id;
  const auto& ast = host_.ast(tid);

  auto try_candidate = [&](const kernelgen::KernelSpec& spec, const char* rule) {
    Candidate c;
    c.template_id = tid;
    c.regions = baseline_.templates[tid].regions;
    for (auto& [r, s] : c.regions) {
      kernelgen::KernelSpec next = spec;
      next.join_order = s.join_order;  // keep per-region orders
      s = next;
    }
    c.provenance = std::string("R3:") + rule;
    branch.proposals.push_back(c.provenance);
    try {
      if (evaluate_candidate(c).kind == EvalOutcome::Kind::Accept) ++branch.accepted;
    } catch (const Error&) {
    }
  };

  const auto bl_spec = baseline_.templates[tid].regions.front().second;
  kernelgen::KernelSpec rules = kernelgen::select_strategies(ast, host_.plan(), host_.stats(), host_.contract(),
                                                             bl_spec.join_order, tid);

  // Stepwise catalog rewrites: scan paths, join operators, semi operators,
  // aggregation strategy, fused aggregation, derived columns.
  if (rules.filter_paths != bl_spec.filter_paths) {
    kernelgen::KernelSpec spec = bl_spec;
    spec.filter_paths = rules.filter_paths;
    try_candidate(spec, "paths");
  }
  {
    auto cur = baseline_.templates[tid].regions.front().second;
    if (rules.join_ops != cur.join_ops) {
      kernelgen::KernelSpec spec = cur;
      spec.join_ops = rules.join_ops;
      try_candidate(spec, "joins");
    }
  }
  {
    auto cur = baseline_.templates[tid].regions.front().second;
    if (rules.semi_ops != cur.semi_ops) {
      kernelgen::KernelSpec spec = cur;
      spec.semi_ops = rules.semi_ops;
      try_candidate(spec, "semis");
    }
  }
  {
    auto cur = baseline_.templates[tid].regions.front().second;
    if (rules.agg != cur.agg || rules.fused != cur.fused) {
      kernelgen::KernelSpec spec = cur;
      spec.agg = rules.agg;
      spec.fused = rules.fused;
      try_candidate(spec, "agg");
    }
  }
  {
    auto cur = baseline_.templates[tid].regions.front().second;
    if (!cur.use_derived && !host_.plan().derived.empty()) {
      kernelgen::KernelSpec spec = cur;
      spec.use_derived = true;
      try_candidate(spec, "derived");
    }
  }
  {
    // Two-phase aggregation as a catalog alternative for grouped templates.
    auto cur = baseline_.templates[tid].regions.front().second;
    if (!ast.group_by.empty() && ast.group_by.size() <= 2 && cur.agg != kernelgen::AggStrategy::TwoPhase) {
      kernelgen::KernelSpec spec = cur;
      spec.agg = kernelgen::AggStrategy::TwoPhase;
      spec.fused = false;
      try_candidate(spec, "two-phase");
    }
  }

  // Storage proposal: precompute this template's single-table arithmetic
  // subexpressions that the shared plan does not carry yet.
  std::set<std::pair<std::string, std::string>> want;  // (table, expr)
  std::function<void(const sql::Expr&)> walk = [&](const sql::Expr& e) {
    if (e.kind == sql::Expr::Kind::Arith && !e.contains_param() && !e.contains_agg()) {
      std::vector<const sql::Expr*> cols;
      e.collect_columns(cols);
      if (!cols.empty()) {
        int t = cols[0]->table_idx;
        bool single = std::all_of(cols.begin(), cols.end(), [&](const sql::Expr* c) { return c->table_idx == t; });
        bool numeric = e.type.kind != TypeKind::Float64;  // derived columns store integers
        if (single && numeric) want.insert({ast.from[size_t(t)].table, sql::expr_to_text(e)});
      }
    }
    for (const auto& a : e.args) walk(*a);
  };
  for (const auto& item : ast.select) walk(*item.expr);
  for (const auto& [table, expr] : want) {
    bool present = std::any_of(host_.plan().derived.begin(), host_.plan().derived.end(),
                               [&](const planner::DerivedColumn& d) { return d.table == table && d.expression == expr; });
    if (present) continue;
    planner::StoragePlan plan = host_.plan();
    planner::DerivedColumn d;
    d.table = table;
    d.name = "dx_" + std::to_string(plan.derived.size());
    d.expression = expr;
    plan.derived.push_back(d);
    Candidate c;
    c.template_id = tid;
    c.regions = baseline_.templates[tid].regions;
    for (auto& [r, s] : c.regions) s.use_derived = true;
    c.replan = std::move(plan);
    c.provenance = "R3:derive " + expr;
    branch.proposals.push_back(c.provenance);
    try {
      if (evaluate_candidate(c).kind == EvalOutcome::Kind::Accept) ++branch.accepted;
    } catch (const Error&) {
    }
  }
}

void Governor::round_holistic(SessionBranch& branch) {
  const std::string& tid = branch.template_id;
  const auto& ast = host_.ast(tid);

  auto try_mutation = [&](const std::function<void(kernelgen::KernelSpec&)>& mutate, const char* rule) {
    Candidate c;
    c.template_id = tid;
    c.regions = baseline_.templates[tid].regions;
    for (auto& [r, s] : c.regions) mutate(s);
    c.provenance = std::string("R4:") + rule;
    branch.proposals.push_back(c.provenance);
    try {
      if (evaluate_candidate(c).kind == EvalOutcome::Kind::Accept) ++branch.accepted;
    } catch (const Error&) {
    }
  };

  try_mutation([](kernelgen::KernelSpec& s) { s.branchless_predicates = true; }, "branchless");
  try_mutation([](kernelgen::KernelSpec& s) { s.presized_outputs = true; }, "presize");
  try_mutation([](kernelgen::KernelSpec& s) { s.unrolled_inner = true; }, "unroll");

  // Re-try the two best orders with the full strategy bundle applied jointly.
  auto it = r1_orders_.find(tid);
  if (it != r1_orders_.end()) {
    const auto flags = baseline_.templates[tid].regions.front().second;
    size_t count = 0;
    for (const auto& order : it->second) {
      if (count++ >= 2) break;
      kernelgen::KernelSpec spec;
      try {
        spec = kernelgen::select_strategies(ast, host_.plan(), host_.stats(), host_.contract(), order, tid);
      } catch (const Error&) {
        continue;
      }
      spec.branchless_predicates = flags.branchless_predicates;
      spec.presized_outputs = flags.presized_outputs;
      spec.unrolled_inner = flags.unrolled_inner;
      Candidate c;
      c.template_id = tid;
      c.regions = {{kernelgen::RegionPredicate{}, spec}};
      c.provenance = "R4:joint";
      branch.proposals.push_back(c.provenance);
      try {
        if (evaluate_candidate(c).kind == EvalOutcome::Kind::Accept) ++branch.accepted;
      } catch (const Error&) {
      }
    }
  }
}

report::EngineReport Governor::run_pipeline(bool reuse_storage) {
  if (host_.relations().empty()) throw FatalSetupError("dataset not ingested");

  stage_plan_storage(reuse_storage);
  record_stage("S0");

  stage_basic_kernels();
  record_stage("S1");

  std::vector<std::string> ids;
  for (const auto& tmpl : host_.contract().templates) ids.push_back(tmpl.id);
  branches_ = branch_sessions(ids);

  // Four optimization rounds; each branch commits before the next begins.
  struct Round {
    const char* name;
    void (Governor::*fn)(SessionBranch&);
  };
  const Round rounds[] = {{"R1", &Governor::round_join_order},
                          {"R2", &Governor::round_trace_guided},
                          {"R3", &Governor::round_catalog},
                          {"R4", &Governor::round_holistic}};
  for (const auto& round : rounds) {
    for (auto& branch : branches_) {
      branch.base_snapshot_id = baseline_.head_snapshot_id;
      (this->*round.fn)(branch);
      branch.commit_snapshot_id = baseline_.head_snapshot_id;
    }
    record_stage(round.name);
  }

  // Tracing off for the final engine, then one full validation pass.
  install_all();
  std::string failure;
  if (!validate_all(&failure)) throw FatalSetupError("final validation failed: " + failure);

  // Report assembly: oracle baselines and final wall-time measurements.
  for (const auto& tmpl : host_.contract().templates) {
    auto it = std::find_if(report_.templates.begin(), report_.templates.end(),
                           [&](const report::TemplateReport& t) { return t.id == tmpl.id; });
    if (it == report_.templates.end()) continue;
    const auto& ast = host_.ast(tmpl.id);
    const auto& bindings = bench_set(tmpl.id);

    using clock = std::chrono::steady_clock;
    double oracle_total = 0;
    std::vector<double> oracle_mins;
    for (const auto& b : bindings) {
      auto inst = sql::instantiate(ast, b);
      double best = std::numeric_limits<double>::max();
      for (size_t r = 0; r < 2; ++r) {
        auto t0 = clock::now();
        oracle::execute(inst, host_.relations());
        best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count());
      }
      oracle_mins.push_back(best);
      oracle_total += best;
    }
    runtime::Measurement final_wall;
    for (const auto& b : bindings) {
      auto kernel = host_.dispatch().lookup(tmpl.id, b);
      auto m = runtime::benchmark_kernel(*kernel, {b}, config_.warmup, config_.reps, config_.core,
                                         runtime::MeasureMode::WallTime);
      final_wall.per_binding_min.push_back(m.per_binding_min[0]);
    }
    double oracle_metric = host_.contract().objective == contract::Objective::PerQueryMedian
                               ? [&] {
                                   std::sort(oracle_mins.begin(), oracle_mins.end());
                                   size_t n = oracle_mins.size();
                                   return n % 2 ? oracle_mins[n / 2]
                                                : (oracle_mins[n / 2 - 1] + oracle_mins[n / 2]) / 2;
                                 }()
                               : oracle_total;
    double final_metric = host_.contract().objective == contract::Objective::PerQueryMedian
                              ? final_wall.median_min()
                              : final_wall.total_min();
    it->oracle_metric = oracle_metric;
    it->final_metric = current_metric(tmpl.id);
    it->speedup_vs_oracle = final_metric > 0 ? oracle_metric / final_metric : 0;
    it->accepted_history = baseline_.templates[tmpl.id].accepted_history;

    // Strategy names from the final spec.
    const auto& spec = baseline_.templates[tmpl.id].regions.front().second;
    std::set<std::string> strategies;
    for (auto op : spec.join_ops) strategies.insert(kernelgen::join_op_name(op));
    for (auto op : spec.semi_ops) strategies.insert(kernelgen::join_op_name(op));
    for (const auto& [fi, p] : spec.filter_paths) strategies.insert(kernelgen::access_path_name(p));
    if (!ast.group_by.empty() || ast.has_aggregates())
      strategies.insert(kernelgen::agg_strategy_name(spec.agg) + "_aggregation");
    if (spec.fused) strategies.insert("fused_inline_aggregation");
    if (spec.use_derived && !host_.plan().derived.empty()) strategies.insert("precomputed_derived_column");
    if (spec.branchless_predicates) strategies.insert("branchless_predicates");
    if (spec.presized_outputs) strategies.insert("presized_outputs");
    if (spec.unrolled_inner) strategies.insert("unrolled_inner");
    if (baseline_.templates[tmpl.id].regions.size() > 1) strategies.insert("parameter_space_split");
    it->strategies.assign(strategies.begin(), strategies.end());
  }

  // Strategy usage: % of templates per execution strategy, % of columns per
  // encoding (the plan side).
  std::map<std::string, size_t> counts;
  for (const auto& t : report_.templates)
    for (const auto& s : t.strategies) ++counts[s];
  for (const auto& [name, n] : counts)
    report_.strategy_usage[name + " (queries)"] = 100.0 * double(n) / double(report_.templates.size());
  size_t total_cols = 0;
  std::map<std::string, size_t> enc_counts;
  for (const auto& tp : host_.plan().tables)
    for (const auto& e : tp.encodings) {
      ++total_cols;
      ++enc_counts[planner::encoding_name(e.encoding)];
    }
  size_t sorted_cols = 0;
  for (const auto& tp : host_.plan().tables) sorted_cols += tp.sort_order.empty() ? 0 : 1;
  for (const auto& [name, n] : enc_counts)
    report_.strategy_usage[name + " (columns)"] = 100.0 * double(n) / double(std::max<size_t>(total_cols, 1));
  report_.strategy_usage["physical_sort_order (tables)"] =
      100.0 * double(sorted_cols) / double(std::max<size_t>(host_.plan().tables.size(), 1));

  for (const char* tool : {"compile", "benchmark", "inspect", "patch"}) report_.tool_calls[tool] = log_.count(tool);
  size_t patches = log_.count("patch");
  report_.avg_patch_lines = patches ? double(log_.total_changed_lines()) / double(patches) : 0;
  size_t benches = log_.count("benchmark");
  report_.patches_per_benchmark = benches ? double(patches) / double(benches) : 0;
  report_.final_snapshot_id = baseline_.head_snapshot_id;

  // Persist report artifacts.
  workspace_.write("reports/report.txt", report_.render_text());
  workspace_.write("reports/runtimes.tsv", report_.runtimes_tsv());
  workspace_.write("reports/strategy_usage.tsv", report_.strategy_usage_tsv());
  workspace_.write("reports/tool_calls.tsv", report_.tool_calls_tsv());
  workspace_.write("reports/report.json", report_.to_json());
  workspace_.write("reports/tool_log.json", log_.to_json());
  {
    // Accept-chain transcript: snapshot ids from head to root.
    auto chain = workspace_.snapshots().chain(baseline_.head_snapshot_id);
    json t = json::array();
    for (auto it2 = chain.rbegin(); it2 != chain.rend(); ++it2) t.push_back(*it2);
    workspace_.write("reports/transcript.json", t.dump(2));
  }
  return report_;
}

std::string replay_accept_chain(Workspace& workspace, const std::vector<std::string>& accept_chain) {
  if (accept_chain.empty()) throw Error("empty accept chain");
  snapshot::Payload payload;
  for (const auto& id : accept_chain) payload = workspace.snapshots().restore(id);
  workspace.restore_state(payload);
  return workspace.state_digest();
}

}  // namespace bespoke::governor
