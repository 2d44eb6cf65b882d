#include "bespoke/snapshot.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bespoke/errors.hpp"

namespace fs = std::filesystem;

namespace bespoke::snapshot {

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

namespace {

// Canonical serialization: sorted paths (map order), length-prefixed fields.
std::string serialize(const Payload& payload) {
  std::ostringstream out;
  out << "bespoke-snapshot-v1\n" << payload.size() << "\n";
  for (const auto& [path, data] : payload)
    out << path.size() << " " << path << " " << data.size() << "\n" << data;
  return out.str();
}

Payload deserialize(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::getline(in, magic);
  if (magic != "bespoke-snapshot-v1") throw CorruptStore("bad snapshot object header");
  size_t count = 0;
  in >> count;
  in.get();  // newline
  Payload out;
  for (size_t i = 0; i < count; ++i) {
    size_t plen = 0;
    in >> plen;
    in.get();  // space
    std::string path(plen, 0);
    in.read(path.data(), std::streamsize(plen));
    size_t dlen = 0;
    in >> dlen;
    in.get();  // newline
    std::string data(dlen, 0);
    in.read(data.data(), std::streamsize(dlen));
    out[path] = std::move(data);
  }
  return out;
}

}  // namespace

std::string payload_digest(const Payload& payload) { return sha256_hex(serialize(payload)); }

SnapshotStore::SnapshotStore(std::string dir) : dir_(std::move(dir)) {
  fs::create_directories(fs::path(dir_) / "objects");
}

std::string SnapshotStore::object_path(const std::string& id) const {
  return (fs::path(dir_) / "objects" / id).string();
}

std::string SnapshotStore::commit(const Payload& payload, const std::string& parent_id) {
  std::string bytes = serialize(payload);
  std::string id = sha256_hex(bytes);
  std::string path = object_path(id);
  bool fresh = !fs::exists(path);
  if (fresh) {
    std::ofstream out(path, std::ios::binary);
    out << bytes;
  }
  // The first recorded parent is the lineage. Re-commits of identical
  // content keep it, which also keeps chains acyclic: a parent always
  // predates its children.
  if (fresh) {
    std::ofstream index(fs::path(dir_) / "parents", std::ios::app);
    index << id << " " << (parent_id.empty() || parent_id == id ? "-" : parent_id) << "\n";
  }
  return id;
}

Payload SnapshotStore::restore(const std::string& id) const {
  std::ifstream in(object_path(id), std::ios::binary);
  if (!in) throw UnknownSnapshot(id);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

bool SnapshotStore::contains(const std::string& id) const { return fs::exists(object_path(id)); }

std::optional<std::string> SnapshotStore::parent_of(const std::string& id) const {
  std::ifstream in(fs::path(dir_) / "parents");
  std::string line, found;
  while (std::getline(in, line)) {
    auto sp = line.find(' ');
    if (sp == std::string::npos) continue;
    if (line.substr(0, sp) == id) found = line.substr(sp + 1);  // last link wins
  }
  if (found.empty() || found == "-") return std::nullopt;
  return found;
}

std::vector<std::string> SnapshotStore::chain(const std::string& id) const {
  std::vector<std::string> out;
  std::string cur = id;
  while (!cur.empty()) {
    out.push_back(cur);
    auto p = parent_of(cur);
    if (!p) break;
    cur = *p;
    if (out.size() > 100000) throw CorruptStore("snapshot parent cycle");
  }
  return out;
}

Payload capture_tree(const std::string& root) {
  Payload out;
  if (!fs::exists(root)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::string rel = fs::relative(entry.path(), root).generic_string();
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    out[rel] = buf.str();
  }
  return out;
}

void restore_tree(const std::string& root, const Payload& payload) {
  // Byte-identical restore: clear and rewrite.
  if (fs::exists(root)) fs::remove_all(root);
  fs::create_directories(root);
  for (const auto& [rel, data] : payload) {
    fs::path p = fs::path(root) / rel;
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << data;
  }
}

}  // namespace bespoke::snapshot
