#include "bespoke/workspace.hpp"

#include <json.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bespoke/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bespoke::governor {

namespace {

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

}  // namespace

size_t Patch::changed_lines() const {
  size_t n = 0;
  for (const auto& h : hunks) n += h.removed.size() + h.added.size();
  return n;
}

std::string Patch::to_json() const {
  json j;
  j["path"] = path;
  j["create"] = create;
  json hs = json::array();
  for (const auto& h : hunks) {
    hs.push_back({{"start_line", h.start_line},
                  {"context_before", h.context_before},
                  {"removed", h.removed},
                  {"added", h.added},
                  {"context_after", h.context_after}});
  }
  j["hunks"] = hs;
  return j.dump(2);
}

Patch Patch::from_json(const std::string& text) {
  json j = json::parse(text);
  Patch p;
  p.path = j.at("path").get<std::string>();
  p.create = j.value("create", false);
  for (const auto& h : j.at("hunks")) {
    PatchHunk hunk;
    hunk.start_line = h.at("start_line").get<size_t>();
    hunk.context_before = h.at("context_before").get<std::vector<std::string>>();
    hunk.removed = h.at("removed").get<std::vector<std::string>>();
    hunk.added = h.at("added").get<std::vector<std::string>>();
    hunk.context_after = h.at("context_after").get<std::vector<std::string>>();
    p.hunks.push_back(std::move(hunk));
  }
  return p;
}

Patch make_patch(const std::string& path, const std::string& old_text, const std::string& new_text) {
  Patch p;
  p.path = path;
  if (old_text == new_text) return p;
  p.create = old_text.empty();

  auto a = split_lines(old_text);
  auto b = split_lines(new_text);
  size_t prefix = 0;
  while (prefix < a.size() && prefix < b.size() && a[prefix] == b[prefix]) ++prefix;
  size_t suffix = 0;
  while (suffix < a.size() - prefix && suffix < b.size() - prefix &&
         a[a.size() - 1 - suffix] == b[b.size() - 1 - suffix])
    ++suffix;

  PatchHunk h;
  h.start_line = prefix + 1;
  size_t ctx = std::min<size_t>(prefix, 2);
  h.context_before.assign(a.begin() + long(prefix - ctx), a.begin() + long(prefix));
  h.start_line = prefix - ctx + 1;
  h.removed.assign(a.begin() + long(prefix), a.end() - long(suffix));
  h.added.assign(b.begin() + long(prefix), b.end() - long(suffix));
  size_t ctx_after = std::min<size_t>(suffix, 2);
  h.context_after.assign(a.end() - long(suffix), a.end() - long(suffix) + long(ctx_after));
  p.hunks.push_back(std::move(h));
  return p;
}

std::string apply_patch_text(const std::string& old_text, const Patch& patch) {
  auto lines = split_lines(old_text);
  // Hunks apply in order; offsets shift as hunks change line counts.
  long offset = 0;
  for (const auto& h : patch.hunks) {
    long at = long(h.start_line) - 1 + offset;
    if (at < 0 || size_t(at) > lines.size()) throw PatchRejected("hunk start beyond end of file");
    size_t pos = size_t(at);
    for (size_t i = 0; i < h.context_before.size(); ++i) {
      if (pos + i >= lines.size() || lines[pos + i] != h.context_before[i])
        throw PatchRejected("context mismatch before hunk at line " + std::to_string(h.start_line));
    }
    pos += h.context_before.size();
    for (size_t i = 0; i < h.removed.size(); ++i) {
      if (pos + i >= lines.size() || lines[pos + i] != h.removed[i])
        throw PatchRejected("stale removed lines at line " + std::to_string(pos + i + 1));
    }
    for (size_t i = 0; i < h.context_after.size(); ++i) {
      size_t idx = pos + h.removed.size() + i;
      if (idx >= lines.size() || lines[idx] != h.context_after[i])
        throw PatchRejected("context mismatch after hunk");
    }
    lines.erase(lines.begin() + long(pos), lines.begin() + long(pos + h.removed.size()));
    lines.insert(lines.begin() + long(pos), h.added.begin(), h.added.end());
    offset += long(h.added.size()) - long(h.removed.size());
  }
  return join_lines(lines);
}

Workspace::Workspace(std::string root) : root_(std::move(root)), snapshots_((fs::path(root_) / "snapshots").string()) {
  for (const char* d : {"plan", "kernels", "kernels/build", "reports", "traces"})
    fs::create_directories(fs::path(root_) / d);
}

std::string Workspace::plan_file() const { return "plan/storage.plan"; }
std::string Workspace::kernels_dir() const { return (fs::path(root_) / "kernels").string(); }
std::string Workspace::build_dir() const { return (fs::path(root_) / "kernels" / "build").string(); }
std::string Workspace::reports_dir() const { return (fs::path(root_) / "reports").string(); }
std::string Workspace::traces_dir() const { return (fs::path(root_) / "traces").string(); }
std::string Workspace::config_file() const { return "config.json"; }
std::string Workspace::kernel_file(const std::string& template_id) const {
  return "kernels/q_" + template_id + ".json";
}
std::string Workspace::kernel_source_file(const std::string& template_id, uint64_t version) const {
  return "kernels/q_" + template_id + "_v" + std::to_string(version) + ".cc";
}

bool Workspace::exists(const std::string& rel) const { return fs::exists(fs::path(root_) / rel); }

std::string Workspace::read(const std::string& rel) const {
  std::ifstream in(fs::path(root_) / rel, std::ios::binary);
  if (!in) throw UnknownPath(rel);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void Workspace::write(const std::string& rel, const std::string& content) {
  fs::path p = fs::path(root_) / rel;
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << content;
}

void Workspace::apply(const Patch& patch) {
  std::string old_text;
  if (exists(patch.path)) {
    old_text = read(patch.path);
  } else if (!patch.create) {
    throw UnknownPath(patch.path);
  }
  write(patch.path, apply_patch_text(old_text, patch));
}

snapshot::Payload Workspace::capture_state() const {
  snapshot::Payload payload;
  auto add_tree = [&](const std::string& sub) {
    fs::path dir = fs::path(root_) / sub;
    if (!fs::exists(dir)) return;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      // Compiled objects are reproducible from sources; exclude them.
      std::string rel = fs::relative(entry.path(), root_).generic_string();
      if (rel.rfind("kernels/build/", 0) == 0) continue;
      std::ifstream in(entry.path(), std::ios::binary);
      std::ostringstream buf;
      buf << in.rdbuf();
      payload[rel] = buf.str();
    }
  };
  add_tree("plan");
  add_tree("kernels");
  if (exists("config.json")) payload["config.json"] = read("config.json");
  return payload;
}

void Workspace::restore_state(const snapshot::Payload& payload) {
  // Remove current state files, then write the payload back.
  for (const char* sub : {"plan", "kernels"}) {
    fs::path dir = fs::path(root_) / sub;
    if (!fs::exists(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      std::string rel = fs::relative(entry.path(), root_).generic_string();
      if (rel.rfind("kernels/build/", 0) == 0) continue;
      files.push_back(entry.path());
    }
    for (const auto& f : files) fs::remove(f);
  }
  if (exists("config.json")) fs::remove(fs::path(root_) / "config.json");
  for (const auto& [rel, data] : payload) write(rel, data);
}

std::string Workspace::state_digest() const { return snapshot::payload_digest(capture_state()); }

std::string KernelFile::to_json() const {
  json j;
  j["template"] = template_id;
  j["backend"] = backend;
  json rs = json::array();
  for (const auto& [region, spec] : regions) {
    json r;
    r["spec"] = json::parse(spec.to_json());
    r["param"] = region.param;
    if (region.lo) r["lo"] = *region.lo;
    if (region.hi) r["hi"] = *region.hi;
    rs.push_back(std::move(r));
  }
  j["regions"] = rs;
  return j.dump(2);
}

KernelFile KernelFile::from_json(const std::string& text) {
  json j = json::parse(text);
  KernelFile f;
  f.template_id = j.at("template").get<std::string>();
  f.backend = j.value("backend", "interpreted");
  for (const auto& r : j.at("regions")) {
    kernelgen::RegionPredicate pred;
    pred.param = r.value("param", "");
    if (r.contains("lo")) pred.lo = r.at("lo").get<int64_t>();
    if (r.contains("hi")) pred.hi = r.at("hi").get<int64_t>();
    f.regions.push_back({pred, kernelgen::KernelSpec::from_json(r.at("spec").dump())});
  }
  return f;
}

void ToolCallLog::add(const std::string& tool, const std::string& detail, bool ok, size_t changed_lines) {
  calls.push_back({tool, detail, ok, changed_lines});
}

size_t ToolCallLog::count(const std::string& tool) const {
  size_t n = 0;
  for (const auto& c : calls)
    if (c.tool == tool) ++n;
  return n;
}

size_t ToolCallLog::total_changed_lines() const {
  size_t n = 0;
  for (const auto& c : calls) n += c.changed_lines;
  return n;
}

std::string ToolCallLog::to_json() const {
  json j = json::array();
  for (const auto& c : calls)
    j.push_back({{"tool", c.tool}, {"detail", c.detail}, {"ok", c.ok}, {"changed_lines", c.changed_lines}});
  return j.dump(2);
}

}  // namespace bespoke::governor
