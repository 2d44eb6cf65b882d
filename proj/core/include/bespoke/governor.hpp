#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bespoke/report.hpp"
#include "bespoke/runtime.hpp"
#include "bespoke/workspace.hpp"

namespace bespoke::governor {

struct Config {
  size_t validation_bindings = 20;  // K
  std::vector<double> factors = {1.0, 0.25, 0.1};
  size_t warmup = 2;
  size_t reps = 5;
  size_t bench_bindings = 5;
  double epsilon = 0.02;  // accept only > 2% improvement
  size_t beam = 4;
  std::optional<int> core;
  bool emitted_backend = false;  // interpreted is the default everywhere
  runtime::MeasureMode measure = runtime::MeasureMode::WallTime;
  uint64_t seed = 0;

  std::string to_json() const;
  static Config from_json(const std::string& text);
};

// A proposed change: new kernel regions for one template, or a storage
// replan. Candidates are evaluated strictly one at a time.
struct Candidate {
  std::string template_id;
  std::vector<std::pair<kernelgen::RegionPredicate, kernelgen::KernelSpec>> regions;
  std::optional<planner::StoragePlan> replan;
  std::string provenance;  // stage/rule that proposed it
};

struct EvalOutcome {
  enum class Kind : uint8_t { Accept, RejectCorrectness, RejectRegression } kind = Kind::Accept;
  std::string detail;
  double old_metric = 0;
  double new_metric = 0;
  runtime::Measurement measurement;  // present for Accept and RejectRegression
};

struct TemplateBaseline {
  std::vector<std::pair<kernelgen::RegionPredicate, kernelgen::KernelSpec>> regions;
  double metric = 0;
  std::string snapshot_id;
  std::vector<double> accepted_history;  // non-increasing by construction
};

struct AcceptedBaseline {
  std::map<std::string, TemplateBaseline> templates;
  std::string storage_snapshot_id;
  std::string head_snapshot_id;
};

struct SessionBranch {
  std::string template_id;
  std::string base_snapshot_id;
  std::vector<std::string> proposals;  // provenance of each candidate, in order
  size_t accepted = 0;
  std::string commit_snapshot_id;
};

// The single mutator of engine state: runs the staged pipeline, evaluates
// every candidate through validate-then-benchmark, enforces monotone
// acceptance and restores the baseline snapshot on any rejection.
class Governor {
 public:
  Governor(runtime::EngineHost& host, Workspace& workspace, Config config);

  // S0 storage plan -> S1 basic kernels -> instrumentation -> R1..R4 ->
  // tracing off + full revalidation. Produces the engine report.
  report::EngineReport run_pipeline(bool reuse_storage = false);

  EvalOutcome evaluate_candidate(const Candidate& c);

  // The four tools. All calls are appended to the tool-call log.
  void tool_patch(const Patch& p);
  void tool_compile(const std::string& template_id);  // throws CompileErrors
  struct BenchmarkResult {
    bool correct = true;
    std::string first_mismatch;
    runtime::Measurement measurement;
  };
  BenchmarkResult tool_benchmark(const std::string& template_id, bool timed = true);
  std::string tool_inspect(const std::string& path);

  std::string snapshot_commit();
  void rollback(const std::string& id);

  const AcceptedBaseline& baseline() const { return baseline_; }
  const ToolCallLog& log() const { return log_; }
  const std::vector<SessionBranch>& branches() const { return branches_; }
  const Config& config() const { return config_; }
  runtime::EngineHost& host() { return host_; }
  Workspace& workspace() { return workspace_; }

  // Re-validates every template against the oracle on every factor.
  bool validate_all(std::string* first_failure = nullptr);

  // Stage S0/S1 entry points, reusable by resynthesis.
  void stage_plan_storage(bool reuse_existing_plan = false);
  void stage_basic_kernels();
  std::vector<SessionBranch> branch_sessions(const std::vector<std::string>& templates);

  double current_metric(const std::string& template_id);

 private:
  runtime::EngineHost& host_;
  Workspace& workspace_;
  Config config_;
  ToolCallLog log_;
  AcceptedBaseline baseline_;
  std::vector<SessionBranch> branches_;
  report::EngineReport report_;

  // Expected oracle results per (template, factor), for the fixed validation
  // bindings; computed once and reused across candidates.
  std::map<std::string, std::vector<contract::ParamBinding>> validation_bindings_;
  std::map<std::string, std::vector<contract::ParamBinding>> bench_bindings_;
  std::map<std::pair<std::string, double>, std::vector<oracle::ResultSet>> expected_;

  const std::vector<contract::ParamBinding>& validation_set(const std::string& template_id);
  const std::vector<contract::ParamBinding>& bench_set(const std::string& template_id);
  const std::vector<oracle::ResultSet>& expected_results(const std::string& template_id, double factor);

  void install_current(const std::string& template_id, bool traced_twin = true);
  void install_all();
  void write_kernel_file(const std::string& template_id,
                         const std::vector<std::pair<kernelgen::RegionPredicate, kernelgen::KernelSpec>>& regions);
  double metric_of(const runtime::Measurement& m) const;

  void record_stage(const std::string& stage);

  // Optimization rounds (per template branch).
  void round_join_order(SessionBranch& branch);
  void round_trace_guided(SessionBranch& branch);
  void round_catalog(SessionBranch& branch);
  void round_holistic(SessionBranch& branch);
  std::vector<std::vector<int>> ranked_orders_;  // per template cache from R1
  std::map<std::string, std::vector<std::vector<int>>> r1_orders_;
};

// Replays the accepted-snapshot chain of a previous run onto a fresh
// workspace; returns the digest of the restored final state.
std::string replay_accept_chain(Workspace& workspace, const std::vector<std::string>& accept_chain);

}  // namespace bespoke::governor
