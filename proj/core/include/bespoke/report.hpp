#pragma once

#include <map>
#include <string>
#include <vector>

namespace bespoke::report {

struct TemplateReport {
  std::string id;
  double oracle_metric = 0;
  double final_metric = 0;
  double speedup_vs_oracle = 0;
  std::map<std::string, double> stage_metric;  // stage name -> accepted metric at stage end
  std::vector<double> accepted_history;
  std::vector<std::string> strategies;  // strategy names in the final spec
};

// Mirrors the shape of the paper-style summary tables: per-template runtimes,
// strategy usage shares, tool-call accounting.
struct EngineReport {
  std::vector<TemplateReport> templates;
  std::vector<std::string> stage_order;
  std::map<std::string, double> stage_total;       // workload metric at stage end
  std::map<std::string, double> strategy_usage;    // strategy -> % of templates
  std::map<std::string, size_t> tool_calls;
  double avg_patch_lines = 0;
  double patches_per_benchmark = 0;
  std::string final_snapshot_id;
  std::string measure_unit = "seconds";

  double geomean_speedup() const;
  std::string render_text() const;
  std::string runtimes_tsv() const;
  std::string strategy_usage_tsv() const;
  std::string tool_calls_tsv() const;
  std::string to_json() const;
  static EngineReport from_json(const std::string& text);
};

}  // namespace bespoke::report
