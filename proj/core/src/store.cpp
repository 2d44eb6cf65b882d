#include "bespoke/store.hpp"

#include <algorithm>
#include <memory>
#include <numeric>
#include <unordered_map>

#include "bespoke/errors.hpp"
#include "bespoke/sql.hpp"

namespace bespoke::planner {

int64_t EncodedColumn::value_i64(size_t row) const {
  switch (enc) {
    case Encoding::Plain:
    case Encoding::ScaledInteger:
      return i64[row];
    case Encoding::CompactDate:
      return epoch + int64_t(u16[row]);
    case Encoding::Dictionary:
      return dict_i64[codes[row]];
    case Encoding::StringArena:
      throw CorruptStore("string column read as integer");
  }
  return 0;
}

std::string_view EncodedColumn::value_str(size_t row) const {
  if (enc == Encoding::Dictionary) return dict_str[codes[row]];
  if (enc == Encoding::StringArena)
    return std::string_view(bytes).substr(offsets[row], offsets[row + 1] - offsets[row]);
  throw CorruptStore("integer column read as string");
}

Value EncodedColumn::value(size_t row) const {
  if (!is_valid(row)) return Value::null();
  switch (logical_type.kind) {
    case TypeKind::Int64:
      return Value::from_int(value_i64(row));
    case TypeKind::Decimal:
      return Value::from_decimal(value_i64(row), logical_type.scale);
    case TypeKind::Date:
      return Value::from_date(int32_t(value_i64(row)));
    case TypeKind::Varchar:
      return Value::from_string(std::string(value_str(row)));
    case TypeKind::Float64:
      return Value::from_float(double(value_i64(row)));
  }
  return Value::null();
}

int64_t EncodedColumn::dict_code_of(const Value& v) const {
  if (logical_type.kind == TypeKind::Varchar) {
    auto it = std::lower_bound(dict_str.begin(), dict_str.end(), v.s);
    if (it == dict_str.end() || *it != v.s) return -1;
    return it - dict_str.begin();
  }
  auto it = std::lower_bound(dict_i64.begin(), dict_i64.end(), v.i);
  if (it == dict_i64.end() || *it != v.i) return -1;
  return it - dict_i64.begin();
}

int64_t EncodedColumn::dict_lower_bound(const Value& v) const {
  if (logical_type.kind == TypeKind::Varchar)
    return std::lower_bound(dict_str.begin(), dict_str.end(), v.s) - dict_str.begin();
  return std::lower_bound(dict_i64.begin(), dict_i64.end(), v.i) - dict_i64.begin();
}

HashIndexData::Iter HashIndexData::probe(int64_t key) const {
  uint64_t h = uint64_t(key) * 0x9e3779b97f4a7c15ull;
  uint64_t b = h & mask;
  while (head[b] >= 0) {
    if (keys[b] == key) return {this, head[b]};
    b = (b + 1) & mask;
  }
  return {this, -1};
}

uint64_t char_mask_of(std::string_view s, bool bigram) {
  uint64_t m = 0;
  if (!bigram) {
    for (char c : s)
      if (c >= 'a' && c <= 'z') m |= 1ull << (c - 'a');
  } else {
    for (size_t i = 0; i + 1 < s.size(); ++i)
      m |= 1ull << ((uint8_t(s[i]) * 31u + uint8_t(s[i + 1])) & 63u);
  }
  return m;
}

std::vector<uint64_t> build_char_masks(const EncodedColumn& col, bool bigram) {
  std::vector<uint64_t> out(col.size(), 0);
  for (size_t r = 0; r < col.size(); ++r)
    if (col.is_valid(r)) out[r] = char_mask_of(col.value_str(r), bigram);
  return out;
}

int StoreTable::column_index(const std::string& n) const {
  for (size_t i = 0; i < schema.size(); ++i)
    if (schema[i].name == n) return int(i);
  return -1;
}

int StoreTable::derived_index(const std::string& expression_text) const {
  for (size_t i = 0; i < derived_meta.size(); ++i)
    if (derived_meta[i].expression == expression_text || derived_meta[i].name == expression_text) return int(i);
  return -1;
}

const HashIndexData* StoreTable::hash_index(const std::string& column) const {
  for (const auto& h : hash_indexes)
    if (h.column == column) return &h;
  return nullptr;
}

const RangeDirectoryData* StoreTable::directory_from(const std::string& parent) const {
  for (const auto& d : directories)
    if (d.parent_table == parent) return &d;
  return nullptr;
}

const ZoneMapData* StoreTable::zone_map(const std::string& column) const {
  for (const auto& z : zone_maps)
    if (z.column == column) return &z;
  return nullptr;
}

const CharMaskData* StoreTable::char_mask(const std::string& column, bool bigram) const {
  for (const auto& m : char_masks)
    if (m.column == column && m.bigram == bigram) return &m;
  return nullptr;
}

void StoreTable::ensure_dict_arena(size_t column) const {
  if (dict_arenas.count(column)) return;
  const EncodedColumn& c = columns.at(column);
  DictArena a;
  a.offsets.reserve(c.dict_str.size() + 1);
  for (const auto& s : c.dict_str) {
    a.offsets.push_back(a.bytes.size());
    a.bytes += s;
  }
  a.offsets.push_back(a.bytes.size());
  dict_arenas[column] = std::move(a);
}

namespace {

EncodedColumn encode_column(const ColumnData& src, Encoding enc, const std::vector<uint32_t>& perm,
                            const std::string& table, const std::string& column) {
  EncodedColumn out;
  out.enc = enc;
  out.logical_type = src.type;
  size_t n = src.size();
  out.valid.resize(n);
  for (size_t p = 0; p < n; ++p) out.valid[p] = src.valid[perm[p]];
  out.nullable = std::any_of(out.valid.begin(), out.valid.end(), [](uint8_t v) { return v == 0; });

  switch (enc) {
    case Encoding::Plain:
    case Encoding::ScaledInteger: {
      out.i64.resize(n);
      for (size_t p = 0; p < n; ++p) out.i64[p] = src.valid[perm[p]] ? src.ints[perm[p]] : 0;
      break;
    }
    case Encoding::CompactDate: {
      int64_t mn = 0;
      bool any = false;
      for (size_t r = 0; r < n; ++r)
        if (src.valid[r] && (!any || src.ints[r] < mn)) {
          mn = src.ints[r];
          any = true;
        }
      out.epoch = mn;
      out.u16.resize(n);
      for (size_t p = 0; p < n; ++p) {
        if (!src.valid[perm[p]]) {
          out.u16[p] = 0;
          continue;
        }
        int64_t off = src.ints[perm[p]] - mn;
        if (off < 0 || off > 65535)
          throw EncodingOverflow(table + "." + column + ": date span exceeds 16-bit offsets");
        out.u16[p] = uint16_t(off);
      }
      break;
    }
    case Encoding::Dictionary: {
      if (src.is_string()) {
        std::vector<std::string> dict;
        for (size_t r = 0; r < n; ++r)
          if (src.valid[r]) dict.push_back(src.strs[r]);
        std::sort(dict.begin(), dict.end());
        dict.erase(std::unique(dict.begin(), dict.end()), dict.end());
        if (dict.size() > 65536) throw EncodingOverflow(table + "." + column + ": dictionary exceeds 65536 entries");
        std::unordered_map<std::string_view, uint32_t> code;
        for (size_t i = 0; i < dict.size(); ++i) code[dict[i]] = uint32_t(i);
        out.codes.resize(n);
        for (size_t p = 0; p < n; ++p)
          out.codes[p] = src.valid[perm[p]] ? code.at(src.strs[perm[p]]) : 0;
        out.dict_str = std::move(dict);
      } else {
        std::vector<int64_t> dict;
        for (size_t r = 0; r < n; ++r)
          if (src.valid[r]) dict.push_back(src.ints[r]);
        std::sort(dict.begin(), dict.end());
        dict.erase(std::unique(dict.begin(), dict.end()), dict.end());
        if (dict.size() > 65536) throw EncodingOverflow(table + "." + column + ": dictionary exceeds 65536 entries");
        std::unordered_map<int64_t, uint32_t> code;
        for (size_t i = 0; i < dict.size(); ++i) code[dict[i]] = uint32_t(i);
        out.codes.resize(n);
        for (size_t p = 0; p < n; ++p)
          out.codes[p] = src.valid[perm[p]] ? code.at(src.ints[perm[p]]) : 0;
        out.dict_i64 = std::move(dict);
      }
      break;
    }
    case Encoding::StringArena: {
      out.offsets.resize(n + 1, 0);
      size_t total = 0;
      for (size_t p = 0; p < n; ++p)
        if (src.valid[perm[p]]) total += src.strs[perm[p]].size();
      out.bytes.reserve(total);
      for (size_t p = 0; p < n; ++p) {
        out.offsets[p] = out.bytes.size();
        if (src.valid[perm[p]]) out.bytes += src.strs[perm[p]];
      }
      out.offsets[n] = out.bytes.size();
      break;
    }
  }
  return out;
}

// Evaluates a derived expression for one ingestion row, resolving parent
// refs (table_idx > 0) through the FK to that parent.
struct DerivedEval {
  const Relation* own;
  std::vector<const Relation*> parents;                       // aligned with scope positions
  std::vector<const std::unordered_map<int64_t, size_t>*> parent_pk;  // key -> parent row
  std::vector<int> fk_cols;                                   // own column holding the key

  Value eval(const sql::Expr& e, size_t row) const {
    switch (e.kind) {
      case sql::Expr::Kind::Literal:
        return e.lit;
      case sql::Expr::Kind::ColumnRef: {
        if (e.table_idx == 0) return own->columns[size_t(e.col_idx)].get(row);
        const auto& fkcol = own->columns[size_t(fk_cols[size_t(e.table_idx)])];
        if (!fkcol.valid[row]) return Value::null();
        auto it = parent_pk[size_t(e.table_idx)]->find(fkcol.ints[row]);
        if (it == parent_pk[size_t(e.table_idx)]->end()) return Value::null();
        return parents[size_t(e.table_idx)]->columns[size_t(e.col_idx)].get(it->second);
      }
      case sql::Expr::Kind::Arith:
        return value_arith(e.op, eval(*e.args[0], row), eval(*e.args[1], row));
      default:
        throw CorruptStore("unsupported node in derived expression");
    }
  }
};

}  // namespace

BespokeStore build_store(const StoragePlan& plan, const RelationMap& relations,
                         const contract::Contract& contract) {
  BespokeStore store;
  store.plan = plan;
  store.build_count = 1;

  for (const auto& tp : plan.tables) {
    const Relation& rel = relations.at(tp.table);
    const contract::TableSchema* schema = contract.find_table(tp.table);
    StoreTable st;
    st.name = tp.table;
    st.rows = rel.row_count();
    st.schema = rel.schema;

    // Sort permutation (stable, nulls first on the sort column).
    st.logical_of.resize(st.rows);
    std::iota(st.logical_of.begin(), st.logical_of.end(), 0);
    if (!tp.sort_order.empty()) {
      int sc = rel.column_index(tp.sort_order.front());
      if (sc < 0) throw SemanticError(tp.table + "." + tp.sort_order.front(), "sort column does not exist");
      const auto& col = rel.columns[size_t(sc)];
      std::stable_sort(st.logical_of.begin(), st.logical_of.end(), [&](uint32_t a, uint32_t b) {
        if (!col.valid[a] || !col.valid[b]) return col.valid[a] < col.valid[b];
        if (col.is_string()) return col.strs[a] < col.strs[b];
        return col.ints[a] < col.ints[b];
      });
    }

    for (size_t ci = 0; ci < rel.columns.size(); ++ci)
      st.columns.push_back(
          encode_column(rel.columns[ci], tp.encoding_of(rel.schema[ci].name), st.logical_of, tp.table,
                        rel.schema[ci].name));

    // Derived columns.
    for (const auto& d : plan.derived) {
      if (d.table != tp.table) continue;
      sql::ExprPtr expr = sql::parse_table_expr(d.expression, contract, d.table);
      DerivedEval ev;
      ev.own = &rel;
      size_t max_scope = 1;
      std::vector<const sql::Expr*> cols;
      expr->collect_columns(cols);
      for (const auto* c : cols) max_scope = std::max(max_scope, size_t(c->table_idx) + 1);
      ev.parents.resize(max_scope, nullptr);
      ev.parent_pk.resize(max_scope, nullptr);
      ev.fk_cols.resize(max_scope, -1);
      // Scope positions beyond 0 are FK parents in declaration order (the
      // same order parse_table_expr builds them).
      std::vector<std::pair<std::string, int>> parent_order;  // parent table -> own fk col
      for (const auto& fk : schema->foreign_keys) {
        bool seen = std::any_of(parent_order.begin(), parent_order.end(),
                                [&](const auto& p) { return p.first == fk.parent_table; });
        if (!seen) parent_order.push_back({fk.parent_table, rel.column_index(fk.column)});
      }
      std::vector<std::unique_ptr<std::unordered_map<int64_t, size_t>>> pk_maps;
      for (size_t i = 1; i < max_scope; ++i) {
        const std::string& pname = parent_order.at(i - 1).first;
        const Relation& parent = relations.at(pname);
        ev.parents[i] = &parent;
        ev.fk_cols[i] = parent_order[i - 1].second;
        auto idx = std::make_unique<std::unordered_map<int64_t, size_t>>();
        int pk_col = parent.column_index(contract.find_table(pname)->primary_key);
        for (size_t r = 0; r < parent.row_count(); ++r)
          if (parent.columns[size_t(pk_col)].valid[r]) (*idx)[parent.columns[size_t(pk_col)].ints[r]] = r;
        ev.parent_pk[i] = idx.get();
        pk_maps.push_back(std::move(idx));
      }

      ColumnData data;
      data.type = expr->type;
      for (size_t p = 0; p < st.rows; ++p) data.push(ev.eval(*expr, st.logical_of[p]));
      EncodedColumn enc;
      enc.enc = Encoding::Plain;
      enc.logical_type = expr->type;
      enc.valid = data.valid;
      enc.nullable = std::any_of(enc.valid.begin(), enc.valid.end(), [](uint8_t v) { return v == 0; });
      enc.i64 = std::move(data.ints);
      st.derived_meta.push_back(d);
      st.derived.push_back(std::move(enc));
    }

    store.tables[tp.table] = std::move(st);
  }

  // Support structures read the encoded tables.
  for (const auto& s : plan.supports) {
    StoreTable& st = store.tables.at(s.table);
    int ci = st.column_index(s.column);
    if (ci < 0) throw SemanticError(s.table + "." + s.column, "support column does not exist");
    const EncodedColumn& col = st.columns[size_t(ci)];

    switch (s.kind) {
      case SupportStructure::Kind::HashIndex: {
        HashIndexData h;
        h.column = s.column;
        size_t buckets = 16;
        while (buckets < st.rows * 2) buckets <<= 1;
        h.keys.assign(buckets, 0);
        h.head.assign(buckets, -1);
        h.next.assign(st.rows, -1);
        h.mask = buckets - 1;
        for (size_t r = 0; r < st.rows; ++r) {
          if (!col.is_valid(r)) continue;
          int64_t key = col.value_i64(r);
          uint64_t b = (uint64_t(key) * 0x9e3779b97f4a7c15ull) & h.mask;
          while (h.head[b] >= 0 && h.keys[b] != key) b = (b + 1) & h.mask;
          h.keys[b] = key;
          h.next[r] = h.head[b];
          h.head[b] = int32_t(r);
        }
        st.hash_indexes.push_back(std::move(h));
        break;
      }
      case SupportStructure::Kind::RangeDirectory: {
        const StoreTable& parent = store.tables.at(s.parent_table);
        const contract::TableSchema* pschema = contract.find_table(s.parent_table);
        int pk = parent.column_index(pschema->primary_key);
        RangeDirectoryData d;
        d.parent_table = s.parent_table;
        d.key_column = s.column;
        d.start.resize(parent.rows);
        d.end.resize(parent.rows);
        // Child is sorted by the key column: binary search per parent key.
        auto key_at = [&](size_t r) { return col.value_i64(r); };
        for (size_t pr = 0; pr < parent.rows; ++pr) {
          if (!parent.columns[size_t(pk)].is_valid(pr)) {
            d.start[pr] = d.end[pr] = 0;
            continue;
          }
          int64_t key = parent.columns[size_t(pk)].value_i64(pr);
          size_t lo = 0, hi = st.rows;
          while (lo < hi) {
            size_t mid = (lo + hi) / 2;
            if (!col.is_valid(mid) || key_at(mid) < key)
              lo = mid + 1;
            else
              hi = mid;
          }
          size_t begin = lo;
          hi = st.rows;
          while (lo < hi) {
            size_t mid = (lo + hi) / 2;
            if (col.is_valid(mid) && key_at(mid) <= key)
              lo = mid + 1;
            else
              hi = mid;
          }
          d.start[pr] = uint32_t(begin);
          d.end[pr] = uint32_t(lo);
        }
        st.directories.push_back(std::move(d));
        break;
      }
      case SupportStructure::Kind::ZoneMap: {
        ZoneMapData z;
        z.column = s.column;
        z.shard_size = std::max<uint32_t>(s.shard_size, 1);
        size_t shards = (st.rows + z.shard_size - 1) / z.shard_size;
        z.mins.resize(shards, std::numeric_limits<int64_t>::max());
        z.maxs.resize(shards, std::numeric_limits<int64_t>::min());
        for (size_t r = 0; r < st.rows; ++r) {
          if (!col.is_valid(r)) continue;
          size_t sh = r / z.shard_size;
          int64_t v = col.value_i64(r);
          z.mins[sh] = std::min(z.mins[sh], v);
          z.maxs[sh] = std::max(z.maxs[sh], v);
        }
        st.zone_maps.push_back(std::move(z));
        break;
      }
      case SupportStructure::Kind::CharMaskAlpha:
      case SupportStructure::Kind::CharMaskBigram: {
        CharMaskData m;
        m.column = s.column;
        m.bigram = s.kind == SupportStructure::Kind::CharMaskBigram;
        m.masks = build_char_masks(col, m.bigram);
        st.char_masks.push_back(std::move(m));
        break;
      }
    }
  }
  return store;
}

RelationMap materialize_flat(const BespokeStore& store) {
  RelationMap out;
  for (const auto& [name, st] : store.tables) {
    Relation rel;
    rel.name = name;
    rel.schema = st.schema;
    rel.columns.resize(st.schema.size());
    // Invert the sort permutation to restore ingestion order.
    std::vector<uint32_t> phys_of(st.rows);
    for (uint32_t p = 0; p < st.rows; ++p) phys_of[st.logical_of[p]] = p;
    for (size_t ci = 0; ci < st.columns.size(); ++ci) {
      ColumnData& col = rel.columns[ci];
      col.type = st.schema[ci].type;
      col.valid.reserve(st.rows);
      for (size_t lr = 0; lr < st.rows; ++lr) {
        size_t p = phys_of[lr];
        if (!st.columns[ci].is_valid(p)) {
          col.push_null();
          continue;
        }
        if (col.is_string()) {
          col.strs.emplace_back(st.columns[ci].value_str(p));
          col.valid.push_back(1);
        } else {
          col.ints.push_back(st.columns[ci].value_i64(p));
          col.valid.push_back(1);
        }
      }
      if (col.size() != st.rows) throw CorruptStore(name + ": decoded row count mismatch");
    }
    out[name] = std::move(rel);
  }
  return out;
}

}  // namespace bespoke::planner
