#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bespoke/kernel_spec.hpp"
#include "bespoke/snapshot.hpp"

namespace bespoke::governor {

// Structured diff applied to workspace files. Context lines must match the
// current content exactly or the patch is rejected.
struct PatchHunk {
  size_t start_line = 1;  // 1-based line of the first context/removed line
  std::vector<std::string> context_before;
  std::vector<std::string> removed;
  std::vector<std::string> added;
  std::vector<std::string> context_after;
};

struct Patch {
  std::string path;  // workspace-relative
  bool create = false;
  std::vector<PatchHunk> hunks;

  size_t changed_lines() const;
  std::string to_json() const;
  static Patch from_json(const std::string& text);
};

// Whole-file replacement diff: one hunk spanning the differing region.
Patch make_patch(const std::string& path, const std::string& old_text, const std::string& new_text);

std::string apply_patch_text(const std::string& old_text, const Patch& patch);  // throws PatchRejected

// Fixed synthesis workspace layout: plan/, kernels/, snapshots/, reports/,
// traces/. Snapshots capture plan/ + kernels/ + config.json.
class Workspace {
 public:
  explicit Workspace(std::string root);

  const std::string& root() const { return root_; }
  std::string plan_file() const;
  std::string kernels_dir() const;
  std::string build_dir() const;
  std::string reports_dir() const;
  std::string traces_dir() const;
  std::string config_file() const;
  std::string kernel_file(const std::string& template_id) const;
  std::string kernel_source_file(const std::string& template_id, uint64_t version) const;

  bool exists(const std::string& rel) const;
  std::string read(const std::string& rel) const;  // throws UnknownPath
  void write(const std::string& rel, const std::string& content);
  void apply(const Patch& patch);  // throws PatchRejected / UnknownPath

  // State under version control: plan/ + kernels/ + config.json.
  snapshot::Payload capture_state() const;
  void restore_state(const snapshot::Payload& payload);
  std::string state_digest() const;

  snapshot::SnapshotStore& snapshots() { return snapshots_; }
  const snapshot::SnapshotStore& snapshots() const { return snapshots_; }

 private:
  std::string root_;
  snapshot::SnapshotStore snapshots_;
};

// Per-template kernel state file: regions with their specs, the active
// backend and the installed version.
struct KernelFile {
  std::string template_id;
  std::string backend = "interpreted";
  std::vector<std::pair<kernelgen::RegionPredicate, kernelgen::KernelSpec>> regions;

  std::string to_json() const;
  static KernelFile from_json(const std::string& text);
};

struct ToolCallLog {
  struct Call {
    std::string tool;  // compile | benchmark | inspect | patch
    std::string detail;
    bool ok = true;
    size_t changed_lines = 0;
  };
  std::vector<Call> calls;  // append-only

  void add(const std::string& tool, const std::string& detail, bool ok = true, size_t changed_lines = 0);
  size_t count(const std::string& tool) const;
  size_t total_changed_lines() const;
  std::string to_json() const;
};

}  // namespace bespoke::governor
