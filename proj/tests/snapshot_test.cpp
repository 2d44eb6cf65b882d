#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bespoke/errors.hpp"
#include "bespoke/snapshot.hpp"
#include "bespoke/workspace.hpp"
#include "test_support.hpp"

using namespace bespoke;
using namespace bespoke::snapshot;
using namespace bespoke::governor;

TEST_CASE("content addressing: identical content, identical id; commit is idempotent") {
  auto dir = testsup::temp_dir("snap");
  SnapshotStore store(dir);
  Payload p{{"plan/storage.plan", "sort a\n"}, {"kernels/q_x.json", "{}"}};
  std::string id1 = store.commit(p);
  std::string id2 = store.commit(p);
  CHECK(id1 == id2);
  CHECK(id1.size() == 64);
  CHECK(store.contains(id1));

  Payload q = p;
  q["kernels/q_x.json"] = "{\"v\":2}";
  CHECK(store.commit(q) != id1);
}

TEST_CASE("restore returns byte-identical payloads; unknown ids are reported") {
  auto dir = testsup::temp_dir("snap2");
  SnapshotStore store(dir);
  Payload p{{"a.txt", std::string("bytes\0with\0nuls", 15)}, {"b/c.txt", "text\n"}};
  std::string id = store.commit(p);
  Payload back = store.restore(id);
  CHECK(back == p);
  CHECK_THROWS_AS(store.restore(std::string(64, 'f')), UnknownSnapshot);
}

TEST_CASE("parent chain walks back to the root") {
  auto dir = testsup::temp_dir("snap3");
  SnapshotStore store(dir);
  std::string a = store.commit({{"f", "1"}});
  std::string b = store.commit({{"f", "2"}}, a);
  std::string c = store.commit({{"f", "3"}}, b);
  auto chain = store.chain(c);
  REQUIRE(chain.size() == 3);
  CHECK(chain[0] == c);
  CHECK(chain[1] == b);
  CHECK(chain[2] == a);
  CHECK(!store.parent_of(a).has_value());
}

TEST_CASE("workspace state digest: mutate then restore gives the original bytes") {
  auto dir = testsup::temp_dir("ws");
  Workspace ws(dir);
  ws.write("plan/storage.plan", "[table t]\nencode a plain\n");
  ws.write("kernels/q_a.json", "{\"k\":1}");
  ws.write("config.json", "{}");
  auto payload = ws.capture_state();
  std::string digest = ws.state_digest();
  std::string id = ws.snapshots().commit(payload);

  ws.write("kernels/q_a.json", "{\"k\":2}");
  ws.write("kernels/q_b.json", "{}");
  CHECK(ws.state_digest() != digest);

  ws.restore_state(ws.snapshots().restore(id));
  CHECK(ws.state_digest() == digest);
  CHECK(!ws.exists("kernels/q_b.json"));
  CHECK(ws.read("kernels/q_a.json") == "{\"k\":1}");
}

TEST_CASE("patch: mechanical apply and stale-context rejection") {
  std::string original = "line1\nline2\nline3\nline4\n";
  Patch p = make_patch("f.txt", original, "line1\nline2 changed\nline3\nline4\n");
  CHECK(p.changed_lines() == 2);
  CHECK(apply_patch_text(original, p) == "line1\nline2 changed\nline3\nline4\n");

  // Same patch against drifted content: rejected, not misapplied.
  std::string drifted = "line1\nline2 already different\nline3\nline4\n";
  CHECK_THROWS_AS(apply_patch_text(drifted, p), PatchRejected);

  // JSON round trip preserves behavior.
  Patch back = Patch::from_json(p.to_json());
  CHECK(apply_patch_text(original, back) == apply_patch_text(original, p));

  // Creation patch for a fresh file.
  Patch create = make_patch("new.txt", "", "a\nb\n");
  CHECK(create.create);
  CHECK(apply_patch_text("", create) == "a\nb\n");
}

TEST_CASE("workspace apply: unknown paths rejected") {
  auto dir = testsup::temp_dir("wsap");
  Workspace ws(dir);
  Patch p = make_patch("kernels/q_zzz.json", "old\n", "new\n");
  p.create = false;
  CHECK_THROWS_AS(ws.apply(p), UnknownPath);
}

TEST_CASE("kernel file round trip with regions") {
  KernelFile f;
  f.template_id = "q";
  f.backend = "interpreted";
  kernelgen::KernelSpec s;
  s.template_id = "q";
  s.join_order = {1, 0};
  s.join_ops = {kernelgen::JoinOp::IndexNestedLoop};
  s.agg = kernelgen::AggStrategy::DenseKeyArray;
  s.fused = true;
  s.filter_paths[2] = kernelgen::AccessPath::SortedRangeScan;
  kernelgen::RegionPredicate low{"x", std::nullopt, 50};
  kernelgen::RegionPredicate high{"x", 51, std::nullopt};
  f.regions = {{low, s}, {high, s}};
  KernelFile back = KernelFile::from_json(f.to_json());
  CHECK(back.template_id == "q");
  REQUIRE(back.regions.size() == 2);
  CHECK(back.regions[0].first == low);
  CHECK(back.regions[1].first == high);
  CHECK(back.regions[0].second == s);
  CHECK(back.to_json() == f.to_json());
}

TEST_CASE("tool call log accounting") {
  ToolCallLog log;
  log.add("patch", "kernels/q_a.json", true, 40);
  log.add("patch", "plan/storage.plan", true, 30);
  log.add("benchmark", "q_a", true);
  log.add("compile", "q_a", true);
  CHECK(log.count("patch") == 2);
  CHECK(log.count("benchmark") == 1);
  CHECK(log.total_changed_lines() == 70);
  CHECK(log.to_json().find("kernels/q_a.json") != std::string::npos);
}
