#include "bespoke/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "bespoke/errors.hpp"

namespace fs = std::filesystem;

namespace bespoke {

Value ColumnData::get(size_t row) const {
  if (!valid[row]) return Value::null();
  switch (type.kind) {
    case TypeKind::Int64:
      return Value::from_int(ints[row]);
    case TypeKind::Decimal:
      return Value::from_decimal(ints[row], type.scale);
    case TypeKind::Date:
      return Value::from_date(int32_t(ints[row]));
    case TypeKind::Varchar:
      return Value::from_string(strs[row]);
    case TypeKind::Float64:
      return Value::from_float(double(ints[row]));
  }
  return Value::null();
}

void ColumnData::push(const Value& v) {
  if (v.is_null()) {
    push_null();
    return;
  }
  valid.push_back(1);
  if (is_string())
    strs.push_back(v.s);
  else
    ints.push_back(v.i);
}

void ColumnData::push_null() {
  valid.push_back(0);
  if (is_string())
    strs.emplace_back();
  else
    ints.push_back(0);
}

int Relation::column_index(const std::string& n) const {
  for (size_t i = 0; i < schema.size(); ++i)
    if (schema[i].name == n) return int(i);
  return -1;
}

std::vector<Value> Relation::row(size_t r) const {
  std::vector<Value> out;
  out.reserve(columns.size());
  for (const auto& c : columns) out.push_back(c.get(r));
  return out;
}

const ColumnStats* TableStats::find(const std::string& column) const {
  for (const auto& c : columns)
    if (c.column == column) return &c;
  return nullptr;
}

}  // namespace bespoke

namespace bespoke::datastore {

namespace {

// RFC-4180: fields may be quoted with "" escapes; records end at a newline
// outside quotes.
std::vector<std::string> parse_csv_record(std::istream& in, bool& eof) {
  std::vector<std::string> fields;
  std::string field;
  bool in_quotes = false;
  bool any = false;
  int c;
  while ((c = in.get()) != EOF) {
    any = true;
    char ch = char(c);
    if (in_quotes) {
      if (ch == '"') {
        if (in.peek() == '"') {
          field += '"';
          in.get();
        } else {
          in_quotes = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      in_quotes = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      break;
    } else if (ch == '\r') {
      // swallow; \r\n handled by the \n branch
    } else {
      field += ch;
    }
  }
  eof = !any && c == EOF;
  if (!eof) fields.push_back(std::move(field));
  return fields;
}

class CsvReader final : public DatasetReader {
 public:
  bool has_table(const std::string& dir, const std::string& table) const override {
    return fs::exists(fs::path(dir) / (table + ".csv"));
  }

  Relation read_table(const std::string& dir, const contract::TableSchema& schema) const override {
    fs::path file = fs::path(dir) / (schema.name + ".csv");
    std::ifstream in(file, std::ios::binary);
    if (!in) throw MissingFile(schema.name);

    bool eof = false;
    auto header = parse_csv_record(in, eof);
    if (eof) throw TypeError(schema.name, "", 0, "empty file (missing header row)");

    // Map file columns by header name; every schema column must be present.
    std::vector<int> file_col(schema.columns.size(), -1);
    for (size_t i = 0; i < schema.columns.size(); ++i) {
      for (size_t j = 0; j < header.size(); ++j)
        if (header[j] == schema.columns[i].name) file_col[i] = int(j);
      if (file_col[i] < 0) throw TypeError(schema.name, schema.columns[i].name, 0, "column missing from CSV header");
    }

    Relation rel;
    rel.name = schema.name;
    rel.schema = schema.columns;
    rel.columns.resize(schema.columns.size());
    for (size_t i = 0; i < schema.columns.size(); ++i) rel.columns[i].type = schema.columns[i].type;

    int64_t row = 0;
    while (true) {
      auto rec = parse_csv_record(in, eof);
      if (eof) break;
      if (rec.size() == 1 && rec[0].empty()) continue;  // trailing newline
      ++row;
      if (rec.size() != header.size())
        throw TypeError(schema.name, "", row, "field count does not match header");
      for (size_t i = 0; i < schema.columns.size(); ++i) {
        const auto& col = schema.columns[i];
        const std::string& text = rec[size_t(file_col[i])];
        if (text.empty()) {
          if (!col.nullable) throw TypeError(schema.name, col.name, row, "null in non-nullable column");
          rel.columns[i].push_null();
          continue;
        }
        switch (col.type.kind) {
          case TypeKind::Int64: {
            try {
              size_t pos = 0;
              int64_t v = std::stoll(text, &pos);
              if (pos != text.size()) throw std::invalid_argument("");
              rel.columns[i].ints.push_back(v);
              rel.columns[i].valid.push_back(1);
            } catch (...) {
              throw TypeError(schema.name, col.name, row, "not an int64: '" + text + "'");
            }
            break;
          }
          case TypeKind::Decimal: {
            auto v = parse_decimal(text, col.type.scale);
            if (!v) throw TypeError(schema.name, col.name, row, "not a decimal: '" + text + "'");
            rel.columns[i].ints.push_back(*v);
            rel.columns[i].valid.push_back(1);
            break;
          }
          case TypeKind::Date: {
            auto v = parse_date(text);
            if (!v) throw TypeError(schema.name, col.name, row, "not a date: '" + text + "'");
            rel.columns[i].ints.push_back(*v);
            rel.columns[i].valid.push_back(1);
            break;
          }
          case TypeKind::Varchar:
            rel.columns[i].strs.push_back(text);
            rel.columns[i].valid.push_back(1);
            break;
          case TypeKind::Float64:
            throw TypeError(schema.name, col.name, row, "float64 columns cannot be ingested");
        }
      }
    }
    return rel;
  }
};

void check_foreign_keys(const RelationMap& rels, const std::vector<contract::TableSchema>& tables) {
  for (const auto& t : tables) {
    auto it = rels.find(t.name);
    if (it == rels.end()) continue;
    for (const auto& fk : t.foreign_keys) {
      const auto& parent = rels.at(fk.parent_table);
      int pcol = parent.column_index(fk.parent_column);
      int ccol = it->second.column_index(fk.column);
      std::unordered_set<int64_t> keys;
      keys.reserve(parent.row_count());
      for (size_t r = 0; r < parent.row_count(); ++r)
        if (parent.columns[pcol].valid[r]) keys.insert(parent.columns[pcol].ints[r]);
      const auto& child = it->second.columns[ccol];
      for (size_t r = 0; r < it->second.row_count(); ++r)
        if (child.valid[r] && !keys.count(child.ints[r]))
          throw ForeignKeyViolation(t.name, fk.column, int64_t(r) + 1);
    }
  }
}

}  // namespace

const DatasetReader& csv_reader() {
  static CsvReader r;
  return r;
}

LoadResult load_dataset(const std::string& path, const std::vector<contract::TableSchema>& tables, bool strict_fk,
                        const DatasetReader& reader) {
  LoadResult out;
  for (const auto& t : tables) {
    if (!reader.has_table(path, t.name)) throw MissingFile(t.name);
    out.relations[t.name] = reader.read_table(path, t);
  }
  if (strict_fk) check_foreign_keys(out.relations, tables);
  out.header = compute_header(out.relations);
  return out;
}

TableStats compute_stats(const Relation& rel) {
  TableStats ts;
  ts.table = rel.name;
  ts.row_count = rel.row_count();
  for (size_t c = 0; c < rel.columns.size(); ++c) {
    const auto& col = rel.columns[c];
    ColumnStats cs;
    cs.column = rel.schema[c].name;
    if (col.is_string()) {
      std::unordered_set<std::string_view> distinct;
      const std::string* minv = nullptr;
      const std::string* maxv = nullptr;
      for (size_t r = 0; r < col.size(); ++r) {
        if (!col.valid[r]) {
          ++cs.null_count;
          continue;
        }
        distinct.insert(col.strs[r]);
        if (!minv || col.strs[r] < *minv) minv = &col.strs[r];
        if (!maxv || col.strs[r] > *maxv) maxv = &col.strs[r];
      }
      cs.distinct_count = distinct.size();
      if (minv) {
        cs.has_minmax = true;
        cs.min = Value::from_string(*minv);
        cs.max = Value::from_string(*maxv);
      }
    } else {
      std::unordered_set<int64_t> distinct;
      int64_t minv = 0, maxv = 0;
      bool any = false;
      for (size_t r = 0; r < col.size(); ++r) {
        if (!col.valid[r]) {
          ++cs.null_count;
          continue;
        }
        int64_t v = col.ints[r];
        distinct.insert(v);
        if (!any || v < minv) minv = v;
        if (!any || v > maxv) maxv = v;
        any = true;
      }
      cs.distinct_count = distinct.size();
      if (any) {
        cs.has_minmax = true;
        ColumnType t = col.type;
        auto mk = [&](int64_t v) {
          switch (t.kind) {
            case TypeKind::Decimal:
              return Value::from_decimal(v, t.scale);
            case TypeKind::Date:
              return Value::from_date(int32_t(v));
            default:
              return Value::from_int(v);
          }
        };
        cs.min = mk(minv);
        cs.max = mk(maxv);
      }
    }
    ts.columns.push_back(std::move(cs));
  }
  return ts;
}

DatasetHeader compute_header(const RelationMap& relations) {
  DatasetHeader h;
  for (const auto& [name, rel] : relations) h.tables[name] = compute_stats(rel);
  return h;
}

namespace {

uint64_t mix64(uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ull;
  x ^= x >> 33;
  return x;
}

Relation take_rows(const Relation& rel, const std::vector<size_t>& rows) {
  Relation out;
  out.name = rel.name;
  out.schema = rel.schema;
  out.columns.resize(rel.columns.size());
  for (size_t c = 0; c < rel.columns.size(); ++c) {
    out.columns[c].type = rel.columns[c].type;
    for (size_t r : rows) {
      if (rel.columns[c].valid[r]) {
        out.columns[c].valid.push_back(1);
        if (rel.columns[c].is_string())
          out.columns[c].strs.push_back(rel.columns[c].strs[r]);
        else
          out.columns[c].ints.push_back(rel.columns[c].ints[r]);
      } else {
        out.columns[c].push_null();
      }
    }
  }
  return out;
}

}  // namespace

RelationMap downscale(const RelationMap& relations, const std::vector<contract::TableSchema>& tables, double factor,
                      uint64_t seed) {
  // Inbound FK counts decide roots; closure then walks child -> parent.
  std::set<std::string> referenced;
  for (const auto& t : tables)
    for (const auto& fk : t.foreign_keys) referenced.insert(fk.parent_table);

  // Per-table nested sample: a seed-determined shuffle, truncated at
  // ceil(factor * rows). Bigger factors strictly extend smaller ones.
  std::map<std::string, std::vector<char>> keep;
  for (const auto& t : tables) {
    const auto& rel = relations.at(t.name);
    size_t n = rel.row_count();
    std::vector<size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(mix64(seed ^ std::hash<std::string>{}(t.name)));
    for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
    size_t take = size_t(std::ceil(factor * double(n)));
    take = std::min(take, n);
    std::vector<char> k(n, 0);
    for (size_t i = 0; i < take; ++i) k[perm[i]] = 1;
    keep[t.name] = std::move(k);
  }

  // Parent key -> row index maps for closure resolution.
  std::map<std::string, std::unordered_map<int64_t, size_t>> pk_index;
  for (const auto& t : tables) {
    if (!referenced.count(t.name)) continue;
    const auto& rel = relations.at(t.name);
    int pcol = rel.column_index(t.primary_key);
    if (pcol < 0) throw DanglingReference(t.name + " is referenced but has no primary key");
    auto& idx = pk_index[t.name];
    idx.reserve(rel.row_count());
    for (size_t r = 0; r < rel.row_count(); ++r)
      if (rel.columns[pcol].valid[r]) idx[rel.columns[pcol].ints[r]] = r;
  }

  // Propagate: kept child rows force their parents. Iterate to fixpoint;
  // the FK graph is acyclic in practice and this loop is cheap.
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& t : tables) {
      const auto& rel = relations.at(t.name);
      auto& krows = keep[t.name];
      for (const auto& fk : t.foreign_keys) {
        int ccol = rel.column_index(fk.column);
        auto& pkeep = keep[fk.parent_table];
        const auto& pidx = pk_index.at(fk.parent_table);
        for (size_t r = 0; r < rel.row_count(); ++r) {
          if (!krows[r] || !rel.columns[ccol].valid[r]) continue;
          auto it = pidx.find(rel.columns[ccol].ints[r]);
          if (it == pidx.end())
            throw DanglingReference(t.name + "." + fk.column + " row " + std::to_string(r + 1));
          if (!pkeep[it->second]) {
            pkeep[it->second] = 1;
            changed = true;
          }
        }
      }
    }
  }

  RelationMap out;
  for (const auto& t : tables) {
    const auto& rel = relations.at(t.name);
    std::vector<size_t> rows;
    const auto& k = keep[t.name];
    for (size_t r = 0; r < rel.row_count(); ++r)
      if (k[r]) rows.push_back(r);
    out[t.name] = take_rows(rel, rows);
  }
  return out;
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    out += c;
    if (c == '"') out += '"';
  }
  out += '"';
  return out;
}

}  // namespace

void write_csv(const Relation& rel, const std::string& file_path) {
  std::ofstream out(file_path, std::ios::binary);
  for (size_t c = 0; c < rel.schema.size(); ++c) out << (c ? "," : "") << rel.schema[c].name;
  out << "\n";
  for (size_t r = 0; r < rel.row_count(); ++r) {
    for (size_t c = 0; c < rel.columns.size(); ++c) {
      if (c) out << ",";
      const auto& col = rel.columns[c];
      if (!col.valid[r]) continue;  // empty field = null
      if (col.is_string())
        out << csv_escape(col.strs[r]);
      else
        out << col.get(r).to_text();
    }
    out << "\n";
  }
}

void write_dataset_csv(const RelationMap& relations, const std::string& dir) {
  fs::create_directories(dir);
  for (const auto& [name, rel] : relations) write_csv(rel, (fs::path(dir) / (name + ".csv")).string());
}

}  // namespace bespoke::datastore
