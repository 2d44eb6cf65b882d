#include "bespoke/report.hpp"

#include <json.hpp>
#include <cmath>
#include <sstream>

namespace bespoke::report {

using nlohmann::json;

double EngineReport::geomean_speedup() const {
  if (templates.empty()) return 0;
  double log_sum = 0;
  size_t n = 0;
  for (const auto& t : templates) {
    if (t.speedup_vs_oracle <= 0) continue;
    log_sum += std::log(t.speedup_vs_oracle);
    ++n;
  }
  return n ? std::exp(log_sum / double(n)) : 0;
}

std::string EngineReport::render_text() const {
  std::ostringstream out;
  out << "=== bespoke engine report ===\n\n";
  out << "per-template runtimes (" << measure_unit << ", min over bindings):\n";
  out << "  template        oracle        final      speedup";
  for (const auto& s : stage_order) out << "  " << s;
  out << "\n";
  char buf[256];
  for (const auto& t : templates) {
    std::snprintf(buf, sizeof buf, "  %-12s %12.6g %12.6g %9.2fx", t.id.c_str(), t.oracle_metric, t.final_metric,
                  t.speedup_vs_oracle);
    out << buf;
    for (const auto& s : stage_order) {
      auto it = t.stage_metric.find(s);
      std::snprintf(buf, sizeof buf, "  %.4g", it == t.stage_metric.end() ? 0.0 : it->second);
      out << buf;
    }
    out << "\n";
  }
  std::snprintf(buf, sizeof buf, "\ngeometric-mean speedup vs oracle: %.2fx\n", geomean_speedup());
  out << buf;

  out << "\nworkload total per stage (" << measure_unit << "):\n";
  for (const auto& s : stage_order) {
    auto it = stage_total.find(s);
    std::snprintf(buf, sizeof buf, "  %-6s %.6g\n", s.c_str(), it == stage_total.end() ? 0.0 : it->second);
    out << buf;
  }

  out << "\nstrategy usage:\n";
  for (const auto& [name, pct] : strategy_usage) {
    std::snprintf(buf, sizeof buf, "  %-36s %6.2f%%\n", name.c_str(), pct);
    out << buf;
  }

  out << "\ntool calls:\n";
  for (const auto& [tool, n] : tool_calls) out << "  " << tool << ": " << n << "\n";
  std::snprintf(buf, sizeof buf, "  avg changed lines per patch: %.1f\n  patches per benchmark: %.2f\n",
                avg_patch_lines, patches_per_benchmark);
  out << buf;
  out << "\nfinal snapshot: " << final_snapshot_id << "\n";
  return out.str();
}

std::string EngineReport::runtimes_tsv() const {
  std::ostringstream out;
  out << "template\toracle\tfinal\tspeedup";
  for (const auto& s : stage_order) out << "\t" << s;
  out << "\n";
  for (const auto& t : templates) {
    out << t.id << "\t" << t.oracle_metric << "\t" << t.final_metric << "\t" << t.speedup_vs_oracle;
    for (const auto& s : stage_order) {
      auto it = t.stage_metric.find(s);
      out << "\t" << (it == t.stage_metric.end() ? 0.0 : it->second);
    }
    out << "\n";
  }
  return out.str();
}

std::string EngineReport::strategy_usage_tsv() const {
  std::ostringstream out;
  out << "strategy\tused_pct\n";
  for (const auto& [name, pct] : strategy_usage) out << name << "\t" << pct << "\n";
  return out.str();
}

std::string EngineReport::tool_calls_tsv() const {
  std::ostringstream out;
  out << "tool\tcalls\n";
  for (const auto& [tool, n] : tool_calls) out << tool << "\t" << n << "\n";
  out << "avg_patch_lines\t" << avg_patch_lines << "\n";
  out << "patches_per_benchmark\t" << patches_per_benchmark << "\n";
  return out.str();
}

std::string EngineReport::to_json() const {
  json j;
  json ts = json::array();
  for (const auto& t : templates) {
    ts.push_back({{"id", t.id},
                  {"oracle_metric", t.oracle_metric},
                  {"final_metric", t.final_metric},
                  {"speedup", t.speedup_vs_oracle},
                  {"stage_metric", t.stage_metric},
                  {"accepted_history", t.accepted_history},
                  {"strategies", t.strategies}});
  }
  j["templates"] = ts;
  j["stage_order"] = stage_order;
  j["stage_total"] = stage_total;
  j["strategy_usage"] = strategy_usage;
  j["tool_calls"] = tool_calls;
  j["avg_patch_lines"] = avg_patch_lines;
  j["patches_per_benchmark"] = patches_per_benchmark;
  j["final_snapshot"] = final_snapshot_id;
  j["measure_unit"] = measure_unit;
  return j.dump(2);
}

EngineReport EngineReport::from_json(const std::string& text) {
  json j = json::parse(text);
  EngineReport r;
  for (const auto& t : j.at("templates")) {
    TemplateReport tr;
    tr.id = t.at("id").get<std::string>();
    tr.oracle_metric = t.at("oracle_metric").get<double>();
    tr.final_metric = t.at("final_metric").get<double>();
    tr.speedup_vs_oracle = t.at("speedup").get<double>();
    tr.stage_metric = t.at("stage_metric").get<std::map<std::string, double>>();
    tr.accepted_history = t.at("accepted_history").get<std::vector<double>>();
    tr.strategies = t.at("strategies").get<std::vector<std::string>>();
    r.templates.push_back(std::move(tr));
  }
  r.stage_order = j.at("stage_order").get<std::vector<std::string>>();
  r.stage_total = j.at("stage_total").get<std::map<std::string, double>>();
  r.strategy_usage = j.at("strategy_usage").get<std::map<std::string, double>>();
  r.tool_calls = j.at("tool_calls").get<std::map<std::string, size_t>>();
  r.avg_patch_lines = j.at("avg_patch_lines").get<double>();
  r.patches_per_benchmark = j.at("patches_per_benchmark").get<double>();
  r.final_snapshot_id = j.at("final_snapshot").get<std::string>();
  r.measure_unit = j.value("measure_unit", "seconds");
  return r;
}

}  // namespace bespoke::report
