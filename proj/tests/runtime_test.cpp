#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "bespoke/errors.hpp"
#include "bespoke/micro_tpch.hpp"
#include "bespoke/runtime.hpp"
#include "strategy_harness.hpp"
#include "test_support.hpp"

using namespace bespoke;
using namespace bespoke::runtime;
namespace fs = std::filesystem;

namespace {

std::unique_ptr<EngineHost> micro_host(double scale, std::vector<double> factors = {1.0}) {
  auto c = workloads::micro_tpch_contract("data");
  auto host = std::make_unique<EngineHost>(c, factors, 42);
  host->ingest_relations(workloads::generate_micro_tpch(scale, 42));
  host->apply_plan(planner::plan_storage(host->contract(), host->stats()));
  return host;
}

std::shared_ptr<const InstalledKernel> interp_kernel(EngineHost& host, const std::string& tid,
                                                     const kernelgen::KernelSpec& spec) {
  auto art = kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::Interpreted, false, host.ast(tid),
                                    host.store(), host.contract());
  return host.install(art, "/tmp/unused");
}

}  // namespace

TEST_CASE("compile_unit: valid source exports the entry; errors carry line numbers") {
  if (!toolchain_available()) return;  // core suite must run without a compiler too
  auto dir = testsup::temp_dir("compile");

  auto host = micro_host(0.02);
  const std::string tid = "q_range";
  auto spec = kernelgen::basic_spec(host->ast(tid), tid);
  auto art = kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::EmittedSource, false,
                                    host->ast(tid), host->store(), host->contract());
  std::string obj = compile_unit(art.source, dir, "q_range_v1");
  auto unit = load_unit(obj, art.entry_symbol, art.manifest_json, host->store());
  CHECK(unit->entry != nullptr);

  // Injected undeclared identifier: diagnostics name its line.
  std::string broken = art.source;
  size_t pos = broken.find("try {");
  REQUIRE(pos != std::string::npos);
  broken.insert(pos + 5, "\n  wibble_undeclared += 1;\n");
  size_t line_of_injection = 1 + std::count(broken.begin(), broken.begin() + long(pos) + 6, '\n');
  try {
    compile_unit(broken, dir, "q_range_broken");
    FAIL("expected CompileErrors");
  } catch (const CompileErrors& e) {
    REQUIRE(!e.diagnostics.empty());
    bool near = false;
    for (const auto& d : e.diagnostics) near |= std::abs(d.line - int(line_of_injection)) <= 2;
    CHECK(near);
    CHECK(e.diagnostics.front().message.find("wibble_undeclared") != std::string::npos);
  }
}

TEST_CASE("abi mismatch and missing symbol are detected at load") {
  if (!toolchain_available()) return;
  auto dir = testsup::temp_dir("abi");
  auto host = micro_host(0.02);
  const std::string tid = "q_range";
  auto spec = kernelgen::basic_spec(host->ast(tid), tid);
  auto art = kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::EmittedSource, false,
                                    host->ast(tid), host->store(), host->contract());
  std::string obj = compile_unit(art.source, dir, "abi_v1");

  // Tampered manifest hash -> AbiMismatch before any dlopen.
  std::string tampered = art.manifest_json;
  auto hpos = tampered.find("\"abi\":");
  REQUIRE(hpos != std::string::npos);
  tampered.replace(hpos, 7, "\"abi\": 1, \"_\":");
  CHECK_THROWS_AS(load_unit(obj, art.entry_symbol, tampered, host->store()), AbiMismatch);

  CHECK_THROWS_AS(load_unit(obj, "bespoke_q_nope", art.manifest_json, host->store()), SymbolMissing);
}

TEST_CASE("recompiling one kernel leaves other units' objects untouched") {
  if (!toolchain_available()) return;
  auto dir = testsup::temp_dir("units");
  auto host = micro_host(0.02);
  auto emit = [&](const std::string& tid) {
    auto spec = kernelgen::basic_spec(host->ast(tid), tid);
    return kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::EmittedSource, false, host->ast(tid),
                                  host->store(), host->contract());
  };
  auto a = emit("q_range");
  auto b = emit("q_group");
  std::string obj_a = compile_unit(a.source, dir, "q_range_v1");
  std::string obj_b = compile_unit(b.source, dir, "q_group_v1");
  auto stamp = fs::last_write_time(obj_b);

  // Recompile only template a into a new version.
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  compile_unit(a.source, dir, "q_range_v2");
  CHECK(fs::last_write_time(obj_b) == stamp);
}

TEST_CASE("dispatch: swap changes the observed version; old kernels are retained") {
  auto host = micro_host(0.03);
  const std::string tid = "q_range";
  auto spec = kernelgen::basic_spec(host->ast(tid), tid);
  auto k1 = interp_kernel(*host, tid, spec);
  uint64_t v1 = host->dispatch().swap(tid, {{kernelgen::RegionPredicate{}, k1}});
  // Stronger strategies, same results; version strictly increases.
  auto best = kernelgen::select_strategies(host->ast(tid), host->plan(), host->stats(), host->contract(),
                                           spec.join_order, tid);
  auto k2 = interp_kernel(*host, tid, best);
  uint64_t v2 = host->dispatch().swap(tid, {{kernelgen::RegionPredicate{}, k2}});
  CHECK(v2 > v1);
  CHECK(host->dispatch().retained_count() == 1);

  auto bindings = contract::sample_bindings(*host->contract().find_template(tid), 3, 5);
  auto rs = host->run(tid, bindings[0]);
  CHECK(rs.rows.size() == 1);
  // Binding outside every region: NoKernel.
  host->dispatch().swap(tid, {{kernelgen::RegionPredicate{"qty", 0, 1}, k2}});
  CHECK_THROWS_AS(host->run(tid, bindings[0]), NoKernel);
}

TEST_CASE("ingestion counter stays at 1 across ten swaps") {
  auto host = micro_host(0.03);
  const std::string tid = "q_range";
  auto spec = kernelgen::basic_spec(host->ast(tid), tid);
  CHECK(host->ingest_count() == 1);
  uint64_t builds = host->store_build_count();
  for (int i = 0; i < 10; ++i) {
    auto k = interp_kernel(*host, tid, spec);
    host->dispatch().swap(tid, {{kernelgen::RegionPredicate{}, k}});
  }
  CHECK(host->ingest_count() == 1);
  CHECK(host->store_build_count() == builds);
}

TEST_CASE("swap atomicity: a reader never observes a torn version") {
  // Probe kernels return a version tag; dispatches under concurrent swaps
  // must observe whole versions only.
  auto host = micro_host(0.02);
  const std::string tid = "q_range";
  auto spec = kernelgen::basic_spec(host->ast(tid), tid);

  // Two kernels whose observable outputs are tied to their version.
  struct ProbeKernel final : kernelgen::InterpretedKernel {
    kernelgen::KernelSpec s;
    int64_t tag;
    explicit ProbeKernel(kernelgen::KernelSpec sp, int64_t t) : s(std::move(sp)), tag(t) {}
    oracle::ResultSet run(const contract::ParamBinding&, kernelgen::TraceReport*) const override {
      oracle::ResultSet rs;
      rs.names = {"tag", "tag2"};
      rs.types = {ColumnType::int64(), ColumnType::int64()};
      rs.rows = {{Value::from_int(tag), Value::from_int(tag)}};
      return rs;
    }
    const kernelgen::KernelSpec& spec() const override { return s; }
    bool tracing() const override { return false; }
  };

  auto mk_probe = [&](int64_t tag) {
    auto k = std::make_shared<InstalledKernel>();
    k->spec = spec;
    k->interp = std::make_shared<ProbeKernel>(spec, tag);
    return std::shared_ptr<const InstalledKernel>(k);
  };
  host->dispatch().swap(tid, {{kernelgen::RegionPredicate{}, mk_probe(0)}});

  std::atomic<bool> stop{false};
  std::atomic<int> torn{0};
  contract::ParamBinding binding = contract::sample_bindings(*host->contract().find_template(tid), 1, 1)[0];
  std::thread reader([&] {
    while (!stop.load(std::memory_order_relaxed)) {
      auto rs = host->run(tid, binding);
      if (rs.rows[0][0].i != rs.rows[0][1].i) torn.fetch_add(1);
    }
  });
  for (int64_t v = 1; v <= 2000; ++v) host->dispatch().swap(tid, {{kernelgen::RegionPredicate{}, mk_probe(v)}});
  stop = true;
  reader.join();
  CHECK(torn.load() == 0);
  CHECK(host->dispatch().retained_count() == 2000);
}

TEST_CASE("a faulting kernel yields KernelPanic and the process keeps serving") {
  auto host = micro_host(0.02);
  struct FaultyKernel final : kernelgen::InterpretedKernel {
    kernelgen::KernelSpec s;
    oracle::ResultSet run(const contract::ParamBinding&, kernelgen::TraceReport*) const override {
      throw std::out_of_range("deliberate fault");
    }
    const kernelgen::KernelSpec& spec() const override { return s; }
    bool tracing() const override { return false; }
  };
  auto faulty = std::make_shared<InstalledKernel>();
  faulty->spec = kernelgen::basic_spec(host->ast("q_range"), "q_range");
  faulty->interp = std::make_shared<FaultyKernel>();
  host->dispatch().swap("q_range", {{kernelgen::RegionPredicate{}, faulty}});

  auto good = kernelgen::basic_spec(host->ast("q_group"), "q_group");
  host->dispatch().swap("q_group", {{kernelgen::RegionPredicate{}, interp_kernel(*host, "q_group", good)}});

  auto bindings = contract::sample_bindings(*host->contract().find_template("q_range"), 1, 3);
  CHECK_THROWS_AS(host->run("q_range", bindings[0]), KernelPanic);
  // Other templates keep working.
  auto b2 = contract::sample_bindings(*host->contract().find_template("q_group"), 1, 3);
  CHECK(host->run("q_group", b2[0]).rows.size() > 0);
}

TEST_CASE("benchmark: reps recorded, min <= median, warmup excluded") {
  auto host = micro_host(0.02);
  const std::string tid = "q_range";
  auto k = interp_kernel(*host, tid, kernelgen::basic_spec(host->ast(tid), tid));
  auto bindings = contract::sample_bindings(*host->contract().find_template(tid), 3, 9);
  auto m = benchmark_kernel(*k, bindings, 2, 5, std::nullopt);
  CHECK(m.reps == 5);
  CHECK(m.warmup == 2);
  REQUIRE(m.times.size() == 3);
  for (const auto& t : m.times) CHECK(t.size() == 5);  // exactly reps timestamps per binding
  CHECK(m.total_min() <= m.median_min() * 3 + 1e-12);
  for (size_t i = 0; i < m.per_binding_min.size(); ++i) {
    double mn = *std::min_element(m.times[i].begin(), m.times[i].end());
    CHECK(m.per_binding_min[i] == doctest::Approx(mn));
  }

  // Work-unit mode requires an instrumented kernel and is deterministic.
  CHECK_THROWS_AS(benchmark_kernel(*k, bindings, 0, 1, std::nullopt, MeasureMode::WorkUnits), Error);
  auto traced_kernel = [&]() {
    auto art = kernelgen::emit_kernel(kernelgen::basic_spec(host->ast(tid), tid),
                                      kernelgen::KernelArtifact::Backend::Interpreted, true, host->ast(tid),
                                      host->store(), host->contract());
    return host->install(art, "/tmp/unused");
  };
  auto w1 = benchmark_kernel(*traced_kernel(), bindings, 0, 2, std::nullopt, MeasureMode::WorkUnits);
  auto w2 = benchmark_kernel(*traced_kernel(), bindings, 0, 2, std::nullopt, MeasureMode::WorkUnits);
  CHECK(w1.per_binding_min == w2.per_binding_min);
  CHECK(w1.per_binding_min[0] > 0);
}

TEST_CASE("tracing-off artifacts run at never-instrumented speed") {
  // A spec whose traced twin exists still benchmarks with tracing off; the
  // tracing-off artifact must be indistinguishable from one that was never
  // instrumented. Identical construction, so min-of-15 medians sit within
  // the 10% noise band.
  auto host = micro_host(0.1);
  const std::string tid = "q_group";
  auto spec = kernelgen::basic_spec(host->ast(tid), tid);
  // Build (and exercise) a traced twin first.
  auto traced = kernelgen::InterpretedKernel::build(spec, host->ast(tid), host->store(), host->contract(), true);
  auto bindings = contract::sample_bindings(*host->contract().find_template(tid), 1, 4);
  kernelgen::TraceReport tr;
  traced->run(bindings[0], &tr);
  CHECK(tr.total_iterations() > 0);

  auto off_after_instrumentation = interp_kernel(*host, tid, spec);
  auto never_instrumented = interp_kernel(*host, tid, spec);
  auto m1 = benchmark_kernel(*off_after_instrumentation, bindings, 3, 15, std::nullopt);
  auto m2 = benchmark_kernel(*never_instrumented, bindings, 3, 15, std::nullopt);
  double a = m1.per_binding_min[0], b = m2.per_binding_min[0];
  CHECK(std::max(a, b) / std::min(a, b) <= 1.10);
}

TEST_CASE("emitted and interpreted backends agree on the bundled workload") {
  if (!toolchain_available()) return;
  auto dir = testsup::temp_dir("backend_eq");
  auto host = micro_host(0.03);
  for (const auto& tmpl : host->contract().templates) {
    auto profile = oracle::profile_cardinalities(
        sql::instantiate(host->ast(tmpl.id), contract::sample_bindings(tmpl, 1, 3)[0]), host->relations());
    auto orders = kernelgen::enumerate_join_orders(host->ast(tmpl.id), profile, 2);
    auto spec = kernelgen::select_strategies(host->ast(tmpl.id), host->plan(), host->stats(), host->contract(),
                                             orders.empty() ? std::vector<int>{0} : orders[0], tmpl.id);
    auto interp_art = kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::Interpreted, false,
                                             host->ast(tmpl.id), host->store(), host->contract());
    auto emitted_art = kernelgen::emit_kernel(spec, kernelgen::KernelArtifact::Backend::EmittedSource, false,
                                              host->ast(tmpl.id), host->store(), host->contract());
    auto ki = host->install(interp_art, dir);
    auto ke = host->install(emitted_art, dir, int(std::hash<std::string>{}(tmpl.id) % 100000));
    for (const auto& b : contract::sample_bindings(tmpl, 50, 77)) {
      auto ri = oracle::canonicalize(ki->run(b), host->ast(tmpl.id).order_by);
      auto re = oracle::canonicalize(ke->run(b), host->ast(tmpl.id).order_by);
      auto mm = oracle::compare(ri, re);
      if (mm) FAIL(tmpl.id, ": ", mm->to_string());
    }
  }
}
