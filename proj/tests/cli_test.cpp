#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int status;
  std::string out;
};

CmdResult run_cli(const std::string& args) {
  std::string out_file = testsup::temp_dir("cliout") + "/out.txt";
  std::string cmd = std::string(BESPOKE_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  int rc = std::system(cmd.c_str());
  std::ifstream in(out_file);
  std::ostringstream buf;
  buf << in.rdbuf();
  return {WEXITSTATUS(rc), buf.str()};
}

}  // namespace

TEST_CASE("cli lifecycle: datagen, synthesize, report, adhoc, validate, resynthesize") {
  std::string dir = testsup::temp_dir("cli");
  auto gen = run_cli("datagen --out " + dir + " --scale 0.04 --seed 42");
  REQUIRE(gen.status == 0);
  REQUIRE(fs::exists(dir + "/contract.bdl"));
  REQUIRE(fs::exists(dir + "/data/lineitem.csv"));

  std::string common = "--contract " + dir + "/contract.bdl --workspace " + dir +
                       "/ws --k 5 --bench-bindings 3 --reps 2 --factors 1.0 --factors 0.25";
  auto synth = run_cli(common + " synthesize");
  INFO(synth.out);
  REQUIRE(synth.status == 0);
  CHECK(synth.out.find("geometric-mean speedup") != std::string::npos);
  CHECK(fs::exists(dir + "/ws/reports/report.txt"));
  CHECK(fs::exists(dir + "/ws/plan/storage.plan"));

  auto rep = run_cli("--workspace " + dir + "/ws report");
  CHECK(rep.status == 0);
  CHECK(rep.out.find("strategy usage") != std::string::npos);

  auto val = run_cli("--workspace " + dir + "/ws validate");
  CHECK(val.status == 0);

  // Ad-hoc count equals the ingested row count recorded in the CSV.
  auto adhoc = run_cli("--workspace " + dir + "/ws adhoc \"SELECT count(*) AS n FROM orders\"");
  CHECK(adhoc.status == 0);
  auto raw = testsup::RawCsv::read(dir + "/data/orders.csv");
  CHECK(adhoc.out.find(std::to_string(raw.rows.size())) != std::string::npos);

  // Ad-hoc matching a template instance agrees with the bespoke kernel: the
  // validate command above already proved kernel==oracle; here the fallback
  // path must agree with the oracle on a fixed instance too.
  auto adhoc2 = run_cli("--workspace " + dir + "/ws adhoc \"SELECT count(*) AS matching FROM orders, customer "
                        "WHERE o_custkey = c_custkey AND c_mktsegment = 'BUILDING' AND o_orderdate >= date "
                        "'1994-01-01' AND o_comment LIKE '%special%'\"");
  CHECK(adhoc2.status == 0);

  // Out-of-subset query: clean failure.
  auto bad = run_cli("--workspace " + dir + "/ws adhoc \"SELECT o_orderkey FROM orders FULL OUTER JOIN x\"");
  CHECK(bad.status != 0);

  // Resynthesize with storage reuse on an identical schema.
  auto resynth = run_cli(common + " resynthesize --reuse-storage");
  INFO(resynth.out);
  CHECK(resynth.status == 0);
}

TEST_CASE("cli serve: kernel-stage resynthesis keeps the ingestion counter at 1") {
  std::string dir = testsup::temp_dir("cli_serve");
  REQUIRE(run_cli("datagen --out " + dir + " --scale 0.03 --seed 3").status == 0);
  std::string common = "--contract " + dir + "/contract.bdl --workspace " + dir +
                       "/ws --k 4 --bench-bindings 2 --reps 2 --factors 1.0";
  REQUIRE(run_cli(common + " synthesize").status == 0);

  std::string script_file = dir + "/script.txt";
  std::ofstream(script_file) << "stats\nswap q_range\nresynth reuse\nstats\nquit\n";
  std::string out_file = dir + "/serve_out.txt";
  std::string cmd = std::string(BESPOKE_CLI_PATH) + " " + common + " serve < " + script_file + " > " + out_file +
                    " 2>&1";
  int rc = std::system(cmd.c_str());
  REQUIRE(WEXITSTATUS(rc) == 0);
  std::ifstream in(out_file);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string out = buf.str();
  INFO(out);
  // The counter reads 1 before and after a swap plus an in-process
  // kernel-stage resynthesis over the resident store. (Store builds may
  // grow if the optimization rounds accept an explicit replan; ingestion
  // must not.)
  CHECK(out.find("swapped q_range") != std::string::npos);
  CHECK(out.find("resynthesized; ingest_count=1") != std::string::npos);
  size_t count = 0;
  for (size_t p = out.find("ingest_count=1"); p != std::string::npos; p = out.find("ingest_count=1", p + 1))
    ++count;
  CHECK(count >= 4);
  CHECK(out.find("ingest_count=2") == std::string::npos);
}

TEST_CASE("cli: missing dataset file names the table and exits nonzero") {
  std::string dir = testsup::temp_dir("cli_missing");
  auto gen = run_cli("datagen --out " + dir + " --scale 0.02 --seed 1");
  REQUIRE(gen.status == 0);
  fs::remove(dir + "/data/nation.csv");
  auto synth = run_cli("--contract " + dir + "/contract.bdl --workspace " + dir + "/ws synthesize");
  CHECK(synth.status != 0);
  CHECK(synth.out.find("nation") != std::string::npos);
}

TEST_CASE("cli: resynthesize with a changed schema and --reuse-storage is refused") {
  std::string dir = testsup::temp_dir("cli_schema");
  auto gen = run_cli("datagen --out " + dir + " --scale 0.02 --seed 2");
  REQUIRE(gen.status == 0);
  std::string common = "--contract " + dir + "/contract.bdl --workspace " + dir +
                       "/ws --k 4 --bench-bindings 2 --reps 2 --factors 1.0 synthesize";
  REQUIRE(run_cli(common).status == 0);

  // New contract with an extra column on region.
  std::ifstream in(dir + "/contract.bdl");
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  auto pos = text.find("col r_name varchar");
  REQUIRE(pos != std::string::npos);
  text.insert(pos, "col r_extra int64\n");
  std::ofstream(dir + "/contract2.bdl") << text;

  auto resynth = run_cli("--workspace " + dir + "/ws resynthesize --reuse-storage --new-contract " + dir +
                         "/contract2.bdl");
  CHECK(resynth.status != 0);
  CHECK(resynth.out.find("schema") != std::string::npos);
}
