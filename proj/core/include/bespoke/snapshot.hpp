#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bespoke::snapshot {

// A snapshot payload: repo-relative paths to file contents.
using Payload = std::map<std::string, std::string>;

std::string sha256_hex(const std::string& bytes);

// Content digest over the payload's canonical serialization; identical
// content always yields the identical id.
std::string payload_digest(const Payload& payload);

// Content-addressed store on disk: objects/<digest> plus a parent-link index.
// Commits are idempotent; rollback returns byte-identical payloads.
class SnapshotStore {
 public:
  explicit SnapshotStore(std::string dir);

  std::string commit(const Payload& payload, const std::string& parent_id = "");
  Payload restore(const std::string& id) const;  // throws UnknownSnapshot
  bool contains(const std::string& id) const;
  std::optional<std::string> parent_of(const std::string& id) const;
  std::vector<std::string> chain(const std::string& id) const;  // id, parent, ... root

  const std::string& dir() const { return dir_; }

 private:
  std::string dir_;
  std::string object_path(const std::string& id) const;
};

// Snapshot a directory tree (regular files only) as a payload, and write one
// back. Paths are stored relative to root with '/' separators.
Payload capture_tree(const std::string& root);
void restore_tree(const std::string& root, const Payload& payload);

}  // namespace bespoke::snapshot
