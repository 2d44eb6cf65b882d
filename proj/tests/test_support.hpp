#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bespoke/contract.hpp"
#include "bespoke/relation.hpp"

namespace testsup {

// Unique scratch directory under the build tree.
inline std::string temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("bespoke_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

// Minimal CSV scanner independent of the engine's loader: splits records on
// newlines outside quotes, fields on commas outside quotes. Used as the
// independent oracle for statistics and revenue checks.
struct RawCsv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  static RawCsv read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    RawCsv out;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false;
    bool first = true;
    auto flush_rec = [&]() {
      rec.push_back(field);
      field.clear();
      if (first) {
        out.header = rec;
        first = false;
      } else {
        out.rows.push_back(rec);
      }
      rec.clear();
    };
    for (size_t i = 0; i < text.size(); ++i) {
      char c = text[i];
      if (quoted) {
        if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          field += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        rec.push_back(field);
        field.clear();
      } else if (c == '\n') {
        flush_rec();
      } else if (c != '\r') {
        field += c;
      }
    }
    if (!field.empty() || !rec.empty()) flush_rec();
    return out;
  }

  int col(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  }
};

// Random flat relation generator for round-trip and equivalence properties.
struct RelationGen {
  std::mt19937_64 rng;
  explicit RelationGen(uint64_t seed) : rng(seed) {}

  int64_t uniform(int64_t lo, int64_t hi) { return lo + int64_t(rng() % uint64_t(hi - lo + 1)); }

  std::string rand_string(size_t max_len) {
    static const char* alphabet = "abcdefghijklmnopqrstuvwxyz ,._%";
    size_t len = size_t(uniform(0, int64_t(max_len)));
    std::string s;
    for (size_t i = 0; i < len; ++i) s += alphabet[uniform(0, 30)];
    return s;
  }

  bespoke::Relation random_relation(const std::string& name, size_t rows, bool with_nulls = true) {
    using namespace bespoke;
    Relation r;
    r.name = name;
    r.schema = {{"k", ColumnType::int64(), false},
                {"small", ColumnType::int64(), false},
                {"dec", ColumnType::decimal(2), with_nulls},
                {"d", ColumnType::date(), false},
                {"s", ColumnType::varchar(), with_nulls},
                {"tag", ColumnType::varchar(), false}};
    for (const auto& cs : r.schema) {
      ColumnData c;
      c.type = cs.type;
      r.columns.push_back(c);
    }
    static const char* tags[] = {"AA", "BB", "CC", "DD"};
    for (size_t i = 0; i < rows; ++i) {
      r.columns[0].push(Value::from_int(int64_t(i) + 1));
      r.columns[1].push(Value::from_int(uniform(0, 40)));
      if (with_nulls && uniform(0, 9) == 0)
        r.columns[2].push_null();
      else
        r.columns[2].push(Value::from_decimal(uniform(-10000, 10000), 2));
      r.columns[3].push(Value::from_date(int32_t(uniform(8000, 11000))));
      if (with_nulls && uniform(0, 9) == 0)
        r.columns[4].push_null();
      else
        r.columns[4].push(Value::from_string(rand_string(12)));
      r.columns[5].push(Value::from_string(tags[uniform(0, 3)]));
    }
    return r;
  }
};

inline bool rows_multiset_equal(const bespoke::Relation& a, const bespoke::Relation& b) {
  if (a.row_count() != b.row_count() || a.columns.size() != b.columns.size()) return false;
  auto dump = [](const bespoke::Relation& r) {
    std::vector<std::string> rows;
    for (size_t i = 0; i < r.row_count(); ++i) {
      std::string s;
      for (const auto& v : r.row(i)) s += v.to_text() + "\x1f";
      rows.push_back(std::move(s));
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  return dump(a) == dump(b);
}

}  // namespace testsup
