#include <CLI11.hpp>
#include <json.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bespoke/datastore.hpp"
#include "bespoke/errors.hpp"
#include "bespoke/governor.hpp"
#include "bespoke/micro_tpch.hpp"
#include "bespoke/oracle.hpp"

namespace fs = std::filesystem;
using namespace bespoke;

namespace {

struct CliConfig {
  std::string contract_path;
  std::string workspace = "workspace";
  governor::Config gov;
  std::string backend = "interpreted";
  std::string measure = "walltime";
};

contract::Contract load_contract(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FatalSetupError("cannot open contract file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return contract::parse_contract(buf.str());
}

// Dataset paths in the contract are relative to the contract file.
std::string resolve_dataset(const std::string& contract_path, const std::string& dataset_path) {
  fs::path p(dataset_path);
  if (p.is_absolute()) return dataset_path;
  return (fs::path(contract_path).parent_path() / p).string();
}

governor::Config finalize_config(CliConfig& cli, const contract::Contract& c) {
  governor::Config g = cli.gov;
  if (g.seed == 0) g.seed = c.seed;
  g.emitted_backend = cli.backend == "emitted";
  g.measure = cli.measure == "workunits" ? runtime::MeasureMode::WorkUnits : runtime::MeasureMode::WallTime;
  return g;
}

// Builds a host with data loaded and (when the workspace has a plan) the
// store resident and kernels installed.
struct Session {
  contract::Contract contract;
  std::unique_ptr<runtime::EngineHost> host;
  std::unique_ptr<governor::Workspace> workspace;
  std::unique_ptr<governor::Governor> gov;
};

Session open_session(CliConfig& cli, bool need_kernels) {
  Session s;
  std::string contract_path = cli.contract_path;
  governor::Workspace probe(cli.workspace);
  if (contract_path.empty() && probe.exists("contract.bdl")) {
    contract_path = (fs::path(cli.workspace) / "contract.bdl").string();
  }
  if (contract_path.empty()) throw FatalSetupError("no --contract given and no contract.bdl in the workspace");
  s.contract = load_contract(contract_path);
  governor::Config g = finalize_config(cli, s.contract);
  s.host = std::make_unique<runtime::EngineHost>(s.contract, g.factors, g.seed);
  s.host->ingest(resolve_dataset(contract_path, s.contract.dataset_path));
  s.workspace = std::make_unique<governor::Workspace>(cli.workspace);
  // Keep a copy of the contract next to the synthesized artifacts, with the
  // dataset path made absolute so it resolves from any directory.
  {
    contract::Contract copy = s.contract;
    copy.dataset_path = fs::absolute(resolve_dataset(contract_path, s.contract.dataset_path)).string();
    s.workspace->write("contract.bdl", contract::print_contract(copy));
  }
  s.gov = std::make_unique<governor::Governor>(*s.host, *s.workspace, g);
  if (need_kernels) {
    if (!s.workspace->exists(s.workspace->plan_file()))
      throw FatalSetupError("workspace has no synthesized engine; run `bespoke synthesize` first");
    s.host->apply_plan(planner::StoragePlan::from_text(s.workspace->read(s.workspace->plan_file())));
    for (const auto& tmpl : s.contract.templates) {
      if (s.workspace->exists(s.workspace->kernel_file(tmpl.id))) s.gov->tool_compile(tmpl.id);
    }
  }
  return s;
}

int cmd_synthesize(CliConfig& cli, bool reuse_storage) {
  Session s = open_session(cli, false);
  if (reuse_storage && !s.workspace->exists(s.workspace->plan_file()))
    throw FatalSetupError("--reuse-storage requires an existing synthesized workspace");
  auto report = s.gov->run_pipeline(reuse_storage);
  std::cout << report.render_text();
  std::cout << "workspace: " << cli.workspace << "\n";
  return 0;
}

contract::ParamBinding parse_binding_json(const contract::QueryTemplate& tmpl, const std::string& text) {
  auto j = nlohmann::json::parse(text);
  contract::ParamBinding b;
  for (const auto& dom : tmpl.params) {
    if (!j.contains(dom.name)) throw MissingParam(dom.name);
    const auto& v = j.at(dom.name);
    switch (dom.kind) {
      case contract::ParamDomain::Kind::IntRange:
        b[dom.name] = Value::from_int(v.get<int64_t>());
        break;
      case contract::ParamDomain::Kind::DateRange: {
        auto d = parse_date(v.get<std::string>());
        if (!d) throw bespoke::Error("bad date for :" + dom.name);
        b[dom.name] = Value::from_date(*d);
        break;
      }
      case contract::ParamDomain::Kind::DecimalRange: {
        auto dec = parse_decimal(v.is_string() ? v.get<std::string>() : v.dump(), dom.scale);
        if (!dec) throw bespoke::Error("bad decimal for :" + dom.name);
        b[dom.name] = Value::from_decimal(*dec, dom.scale);
        break;
      }
      case contract::ParamDomain::Kind::Choice: {
        if (v.is_string()) {
          std::string sv = v.get<std::string>();
          if (auto d = parse_date(sv); d && dom.choices[0].tag == Value::Tag::Date)
            b[dom.name] = Value::from_date(*d);
          else
            b[dom.name] = Value::from_string(sv);
        } else {
          b[dom.name] = Value::from_int(v.get<int64_t>());
        }
        break;
      }
    }
    if (!dom.contains(b[dom.name])) throw bespoke::Error("value for :" + dom.name + " is outside its domain");
  }
  return b;
}

int cmd_serve(CliConfig& cli) {
  Session s = open_session(cli, true);
  std::cout << "serve: engine resident (ingest_count=" << s.host->ingest_count() << "); commands: run <template> "
               "<binding-json> | adhoc <sql> | swap <template> | resynth [reuse] | stats | quit\n";
  std::string line;
  while (std::getline(std::cin, line)) {
    std::istringstream in(line);
    std::string cmd;
    in >> cmd;
    try {
      if (cmd == "quit" || cmd == "exit") break;
      if (cmd == "stats") {
        std::cout << "ingest_count=" << s.host->ingest_count() << " store_builds=" << s.host->store_build_count()
                  << " retained_kernels=" << s.host->dispatch().retained_count() << "\n";
      } else if (cmd == "run") {
        std::string tid;
        in >> tid;
        std::string rest;
        std::getline(in, rest);
        const auto* tmpl = s.contract.find_template(tid);
        if (!tmpl) throw UnknownPath(tid);
        auto binding = parse_binding_json(*tmpl, rest);
        auto rs = s.host->run(tid, binding);
        std::cout << oracle::to_tsv(oracle::canonicalize(std::move(rs), s.host->ast(tid).order_by));
      } else if (cmd == "adhoc") {
        std::string rest;
        std::getline(in, rest);
        auto ast = sql::parse_query(rest, s.contract);
        std::cout << oracle::to_tsv(oracle::canonicalize(s.host->run_adhoc(rest), ast.order_by));
      } else if (cmd == "swap") {
        std::string tid;
        in >> tid;
        s.gov->tool_compile(tid);
        std::cout << "swapped " << tid << " version=" << s.host->dispatch().version(tid)
                  << " ingest_count=" << s.host->ingest_count() << "\n";
      } else if (cmd == "resynth") {
        std::string flag;
        in >> flag;
        bool reuse = flag == "reuse";
        governor::Governor fresh(*s.host, *s.workspace, s.gov->config());
        auto report = fresh.run_pipeline(reuse);
        std::cout << "resynthesized; ingest_count=" << s.host->ingest_count()
                  << " store_builds=" << s.host->store_build_count() << " snapshot=" << report.final_snapshot_id
                  << "\n";
      } else if (!cmd.empty()) {
        std::cout << "error: unknown command " << cmd << "\n";
      }
    } catch (const std::exception& e) {
      std::cout << "error: " << e.what() << "\n";
    }
    std::cout.flush();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bespoke: workload-specialized query engine synthesizer"};
  app.require_subcommand(1);

  CliConfig cli;
  app.add_option("--contract", cli.contract_path, "contract document path");
  app.add_option("--workspace", cli.workspace, "synthesis workspace directory");
  app.add_option("--k", cli.gov.validation_bindings, "validation bindings per template");
  app.add_option("--factors", cli.gov.factors, "validation downscale factors");
  app.add_option("--warmup", cli.gov.warmup, "benchmark warmup runs");
  app.add_option("--reps", cli.gov.reps, "benchmark timed repetitions");
  app.add_option("--bench-bindings", cli.gov.bench_bindings, "benchmark bindings per template");
  app.add_option("--epsilon", cli.gov.epsilon, "acceptance threshold (fractional improvement)");
  app.add_option("--beam", cli.gov.beam, "join orders kept by the search");
  int core = -1;
  app.add_option("--core", core, "pin benchmarks to this CPU core");
  app.add_option("--backend", cli.backend, "kernel backend: interpreted|emitted")
      ->check(CLI::IsMember({"interpreted", "emitted"}));
  app.add_option("--measure", cli.measure, "measurement mode: walltime|workunits")
      ->check(CLI::IsMember({"walltime", "workunits"}));
  app.add_option("--seed", cli.gov.seed, "sampling seed override");

  // datagen
  auto* datagen = app.add_subcommand("datagen", "write the bundled micro workload (contract + CSV data)");
  std::string out_dir = "workloads/micro_tpch";
  double scale = 1.0;
  uint64_t gen_seed = 42;
  datagen->add_option("--out", out_dir, "output directory");
  datagen->add_option("--scale", scale, "size multiplier (1.0 = ~60k lineitem rows)");
  datagen->add_option("--seed", gen_seed, "generator seed");

  auto* ingest = app.add_subcommand("ingest", "load the dataset and print exact statistics");
  auto* plan = app.add_subcommand("plan", "compute and print the storage plan");
  auto* synthesize = app.add_subcommand("synthesize", "run the full synthesis pipeline");
  auto* validate = app.add_subcommand("validate", "revalidate every kernel against the oracle");
  auto* bench = app.add_subcommand("bench", "benchmark the synthesized kernels");
  auto* report_cmd = app.add_subcommand("report", "print the last synthesis report");
  auto* adhoc = app.add_subcommand("adhoc", "run an ad-hoc query through the generic fallback");
  std::string adhoc_sql;
  adhoc->add_option("sql", adhoc_sql, "query text")->required();
  auto* resynthesize = app.add_subcommand("resynthesize", "re-run synthesis for a changed workload");
  bool reuse_storage = false;
  std::string new_contract;
  resynthesize->add_flag("--reuse-storage", reuse_storage, "keep the existing storage layer (schema must match)");
  resynthesize->add_option("--new-contract", new_contract, "replacement contract document");
  auto* serve = app.add_subcommand("serve", "hold the engine resident and accept commands on stdin");

  CLI11_PARSE(app, argc, argv);
  if (core >= 0) cli.gov.core = core;

  try {
    if (datagen->parsed()) {
      workloads::write_micro_tpch(out_dir, scale, gen_seed);
      std::cout << "wrote " << out_dir << "/contract.bdl and " << out_dir << "/data/*.csv\n";
      return 0;
    }
    if (ingest->parsed()) {
      Session s = open_session(cli, false);
      for (const auto& [name, ts] : s.host->stats().tables) {
        std::cout << name << ": " << ts.row_count << " rows\n";
        for (const auto& c : ts.columns) {
          std::cout << "  " << c.column << " distinct=" << c.distinct_count << " nulls=" << c.null_count;
          if (c.has_minmax) std::cout << " min=" << c.min.to_text() << " max=" << c.max.to_text();
          std::cout << "\n";
        }
      }
      return 0;
    }
    if (plan->parsed()) {
      Session s = open_session(cli, false);
      std::cout << planner::plan_storage(s.contract, s.host->stats()).to_text();
      return 0;
    }
    if (synthesize->parsed()) return cmd_synthesize(cli, false);
    if (validate->parsed()) {
      Session s = open_session(cli, true);
      std::string failure;
      if (!s.gov->validate_all(&failure)) {
        std::cerr << "validation failed: " << failure << "\n";
        return 1;
      }
      std::cout << "all templates validate against the oracle\n";
      return 0;
    }
    if (bench->parsed()) {
      Session s = open_session(cli, true);
      std::cout << "template\tmetric\n";
      for (const auto& tmpl : s.contract.templates) {
        auto r = s.gov->tool_benchmark(tmpl.id);
        if (!r.correct) {
          std::cerr << tmpl.id << " failed validation: " << r.first_mismatch << "\n";
          return 1;
        }
        std::cout << tmpl.id << "\t" << r.measurement.total_min() << "\n";
      }
      return 0;
    }
    if (report_cmd->parsed()) {
      governor::Workspace ws(cli.workspace);
      if (!ws.exists("reports/report.txt")) {
        std::cerr << "no report in workspace; run `bespoke synthesize` first\n";
        return 1;
      }
      std::cout << ws.read("reports/report.txt");
      return 0;
    }
    if (adhoc->parsed()) {
      Session s = open_session(cli, true);
      auto ast = sql::parse_query(adhoc_sql, s.contract);
      std::cout << oracle::to_tsv(oracle::canonicalize(s.host->run_adhoc(adhoc_sql), ast.order_by));
      return 0;
    }
    if (resynthesize->parsed()) {
      if (!new_contract.empty()) cli.contract_path = new_contract;
      if (reuse_storage) {
        // Schema must match the workspace's previous contract.
        governor::Workspace ws(cli.workspace);
        if (!ws.exists("contract.bdl")) throw FatalSetupError("no prior workspace contract");
        auto prev = contract::parse_contract(ws.read("contract.bdl"));
        auto next = load_contract(!cli.contract_path.empty()
                                      ? cli.contract_path
                                      : (fs::path(cli.workspace) / "contract.bdl").string());
        runtime::EngineHost probe(prev, {}, 1);
        probe.reset_contract(next, true);  // throws SchemaChanged on mismatch
      }
      return cmd_synthesize(cli, reuse_storage);
    }
    if (serve->parsed()) return cmd_serve(cli);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
