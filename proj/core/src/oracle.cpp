#include "bespoke/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include "bespoke/errors.hpp"

namespace bespoke::oracle {

namespace {

using sql::AggKind;
using sql::CmpOp;
using sql::Expr;
using sql::FilterPred;
using sql::QueryAst;

struct TupleCtx {
  const RelationMap* rels;
  const std::vector<const Relation*>* tables;  // per FROM position
  const uint32_t* rowids;
};

Value eval_expr(const Expr& e, const TupleCtx& ctx) {
  switch (e.kind) {
    case Expr::Kind::Literal:
      return e.lit;
    case Expr::Kind::ColumnRef:
      return (*ctx.tables)[size_t(e.table_idx)]->columns[size_t(e.col_idx)].get(ctx.rowids[e.table_idx]);
    case Expr::Kind::Arith:
      return value_arith(e.op, eval_expr(*e.args[0], ctx), eval_expr(*e.args[1], ctx));
    case Expr::Kind::Param:
      throw MissingParam(e.param);
    case Expr::Kind::Agg:
      throw UnsupportedFeature("aggregate in row context");
  }
  return Value::null();
}

bool cmp_holds(CmpOp op, const Value& l, const Value& r) {
  if (l.is_null() || r.is_null()) return false;
  int c = l.compare(r);
  switch (op) {
    case CmpOp::Eq:
      return c == 0;
    case CmpOp::Lt:
      return c < 0;
    case CmpOp::Le:
      return c <= 0;
    case CmpOp::Gt:
      return c > 0;
    case CmpOp::Ge:
      return c >= 0;
  }
  return false;
}

std::string like_needle(const Value& pattern) {
  if (pattern.is_null()) throw UnsupportedFeature("null LIKE pattern");
  const std::string& p = pattern.s;
  if (p.size() < 2 || p.front() != '%' || p.back() != '%' ||
      p.find('%', 1) != p.size() - 1 || p.find('_') != std::string::npos)
    throw UnsupportedFeature("LIKE pattern must be %infix%");
  return p.substr(1, p.size() - 2);
}

bool filter_holds(const FilterPred& f, const TupleCtx& ctx) {
  switch (f.kind) {
    case FilterPred::Kind::Compare:
      return cmp_holds(f.op, eval_expr(*f.lhs, ctx), eval_expr(*f.lo, ctx));
    case FilterPred::Kind::Between: {
      Value v = eval_expr(*f.lhs, ctx);
      return cmp_holds(CmpOp::Ge, v, eval_expr(*f.lo, ctx)) && cmp_holds(CmpOp::Le, v, eval_expr(*f.hi, ctx));
    }
    case FilterPred::Kind::InList: {
      Value v = eval_expr(*f.lhs, ctx);
      if (v.is_null()) return false;
      for (const auto& item : f.list)
        if (cmp_holds(CmpOp::Eq, v, eval_expr(*item, ctx))) return true;
      return false;
    }
    case FilterPred::Kind::Like: {
      Value v = eval_expr(*f.lhs, ctx);
      if (v.is_null()) return false;
      std::string needle = like_needle(eval_expr(*f.pattern, ctx));
      return needle.empty() || v.s.find(needle) != std::string::npos;
    }
  }
  return false;
}

// Single-table filter evaluation against a base relation row. The context
// maps every position up to table_idx onto this relation; the filters only
// ever dereference their own table.
bool row_passes(const std::vector<const FilterPred*>& filters, const Relation& rel, uint32_t row,
                const RelationMap& rels, int table_idx) {
  std::vector<const Relation*> tables(size_t(table_idx) + 1, &rel);
  std::vector<uint32_t> ids(size_t(table_idx) + 1, row);
  TupleCtx ctx{&rels, &tables, ids.data()};
  for (const auto* f : filters)
    if (!filter_holds(*f, ctx)) return false;
  return true;
}

struct VecValueHash {
  size_t operator()(const std::vector<Value>& v) const {
    size_t h = 1469598103934665603ull;
    for (const auto& x : v) h = (h ^ x.hash()) * 1099511628211ull;
    return h;
  }
};

struct Grouper {
  std::unordered_map<std::vector<Value>, size_t, VecValueHash> index;
  std::vector<std::vector<Value>> keys;

  size_t group_of(std::vector<Value> key) {
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    size_t id = keys.size();
    index.emplace(key, id);
    keys.push_back(std::move(key));
    return id;
  }
};

struct AggState {
  bool seen = false;
  int64_t count = 0;
  Value acc;           // sum/min/max
  double fsum = 0.0;   // avg and float sums
  __int128 isum = 0;   // exact integer/decimal sums
  uint8_t scale = 0;

  void update(AggKind kind, const Value& v) {
    if (kind == AggKind::Count) {
      if (!v.is_null()) ++count;
      return;
    }
    if (v.is_null()) return;
    switch (kind) {
      case AggKind::Sum:
        if (v.tag == Value::Tag::Flt) {
          fsum += v.f;
        } else {
          isum += v.i;
          scale = v.tag == Value::Tag::Dec ? v.scale : 0;
        }
        seen = true;
        break;
      case AggKind::Avg:
        // Integer-typed inputs accumulate exactly; the divide happens once at
        // result time so every execution order yields the same double.
        if (v.tag == Value::Tag::Flt) {
          fsum += v.f;
        } else {
          isum += v.i;
          scale = v.tag == Value::Tag::Dec ? v.scale : 0;
        }
        ++count;
        seen = true;
        break;
      case AggKind::Min:
        if (!seen || v < acc) acc = v;
        seen = true;
        break;
      case AggKind::Max:
        if (!seen || acc < v) acc = v;
        seen = true;
        break;
      case AggKind::Count:
        break;
    }
  }

  Value result(AggKind kind, ColumnType type) const {
    switch (kind) {
      case AggKind::Count:
        return Value::from_int(count);
      case AggKind::Avg: {
        if (!seen) return Value::null();
        double total = fsum + double(isum) / double(pow10_i64(scale));
        return Value::from_float(total / double(count));
      }
      case AggKind::Sum: {
        if (!seen) return Value::null();
        if (type.kind == TypeKind::Float64) return Value::from_float(fsum);
        if (isum > std::numeric_limits<int64_t>::max() || isum < std::numeric_limits<int64_t>::min())
          throw ArithmeticError("sum overflow");
        int64_t v = int64_t(isum);
        return type.kind == TypeKind::Decimal ? Value::from_decimal(v, type.scale) : Value::from_int(v);
      }
      case AggKind::Min:
      case AggKind::Max:
        return seen ? acc : Value::null();
    }
    return Value::null();
  }
};

// Evaluates a select expression in group context: Agg nodes read their
// accumulated state, plain column refs read the group key tuple.
Value eval_group_expr(const Expr& e, const std::vector<const Expr*>& agg_nodes,
                      const std::vector<AggState>& states, const QueryAst& ast,
                      const std::vector<Value>& group_key) {
  if (e.kind == Expr::Kind::Agg) {
    for (size_t i = 0; i < agg_nodes.size(); ++i)
      if (agg_nodes[i] == &e) return states[i].result(e.agg, e.type);
    throw Error("unregistered aggregate node");
  }
  if (e.kind == Expr::Kind::ColumnRef) {
    for (size_t g = 0; g < ast.group_by.size(); ++g)
      if (ast.group_by[g]->table_idx == e.table_idx && ast.group_by[g]->col_idx == e.col_idx) return group_key[g];
    throw SemanticError(e.column, "column not in GROUP BY");
  }
  if (e.kind == Expr::Kind::Arith)
    return value_arith(e.op,
                      eval_group_expr(*e.args[0], agg_nodes, states, ast, group_key),
                      eval_group_expr(*e.args[1], agg_nodes, states, ast, group_key));
  if (e.kind == Expr::Kind::Literal) return e.lit;
  throw UnsupportedFeature("expression in group context");
}

void collect_agg_nodes(const Expr& e, std::vector<const Expr*>& out) {
  if (e.kind == Expr::Kind::Agg) {
    out.push_back(&e);
    return;
  }
  for (const auto& a : e.args) collect_agg_nodes(*a, out);
}

struct JoinedTuples {
  std::vector<std::vector<uint32_t>> tuples;  // rowid per FROM position
  std::vector<JoinStep> steps;                // profiling info
  std::vector<size_t> filtered_rows;
  std::vector<size_t> base_rows;
};

// Materializes the join result with hash joins, choosing the next table by
// connectivity in textual order. Also records the per-step cardinalities the
// profiler reports.
JoinedTuples join_tables(const QueryAst& ast, const RelationMap& rels,
                         const std::vector<const Relation*>& tables) {
  size_t n = ast.from.size();
  JoinedTuples out;
  out.base_rows.resize(n);
  out.filtered_rows.resize(n);

  // Per-table passing rows (local filters + semi-joins anchored there).
  std::vector<std::vector<const FilterPred*>> local(n);
  for (const auto& f : ast.filters) {
    if (f.table_idx >= 0)
      local[size_t(f.table_idx)].push_back(&f);
    else {
      // Constant predicate: if false, the whole result is empty.
      std::vector<const Relation*> none;
      uint32_t dummy = 0;
      TupleCtx ctx{&rels, &none, &dummy};
      if (!filter_holds(f, ctx)) {
        for (size_t t = 0; t < n; ++t) out.base_rows[t] = tables[t]->row_count();
        return out;  // empty tuples
      }
    }
  }

  // Semi-join membership sets keyed by the outer expression's table.
  struct SemiSet {
    int table_idx;
    const sql::SemiJoin* semi;
    std::unordered_set<Value, ValueHash> members;
  };
  std::vector<SemiSet> semi_sets;
  for (const auto& s : ast.semis) {
    std::vector<const Expr*> cols;
    s.outer_key->collect_columns(cols);
    if (cols.empty()) throw UnsupportedFeature("uncorrelated semi-join");
    int t = cols[0]->table_idx;
    for (const auto* c : cols)
      if (c->table_idx != t) throw UnsupportedFeature("semi-join key spanning tables");
    SemiSet set;
    set.table_idx = t;
    set.semi = &s;
    const Relation& inner = rels.at(s.inner_table);
    std::vector<const FilterPred*> inner_filters;
    for (const auto& f : s.inner_filters) inner_filters.push_back(&f);
    for (uint32_t r = 0; r < inner.row_count(); ++r) {
      if (!row_passes(inner_filters, inner, r, rels, 0)) continue;
      Value key = inner.columns[size_t(s.inner_key_col)].get(r);
      if (!key.is_null()) set.members.insert(std::move(key));
    }
    semi_sets.push_back(std::move(set));
  }

  std::vector<std::vector<uint32_t>> passing(n);
  for (size_t t = 0; t < n; ++t) {
    const Relation& rel = *tables[t];
    out.base_rows[t] = rel.row_count();
    for (uint32_t r = 0; r < rel.row_count(); ++r) {
      if (!row_passes(local[t], rel, r, rels, int(t))) continue;
      bool ok = true;
      for (auto& set : semi_sets) {
        if (set.table_idx != int(t)) continue;
        std::vector<const Relation*> tl(t + 1, &rel);
        std::vector<uint32_t> ids(t + 1, r);
        TupleCtx ctx{&rels, &tl, ids.data()};
        Value key = eval_expr(*set.semi->outer_key, ctx);
        if (key.is_null() || !set.members.count(key)) {
          ok = false;
          break;
        }
      }
      if (ok) passing[t].push_back(r);
    }
    out.filtered_rows[t] = passing[t].size();
  }

  // Left-deep hash-join loop over connectivity order.
  std::vector<bool> joined(n, false);
  std::vector<int> order;
  order.push_back(0);
  joined[0] = true;
  while (order.size() < n) {
    int next = -1;
    for (size_t t = 0; t < n && next < 0; ++t) {
      if (joined[t]) continue;
      for (const auto& j : ast.joins) {
        bool touches = (j.left_table == int(t) && joined[size_t(j.right_table)]) ||
                       (j.right_table == int(t) && joined[size_t(j.left_table)]);
        if (touches) {
          next = int(t);
          break;
        }
      }
    }
    if (next < 0) {
      for (size_t t = 0; t < n; ++t)
        if (!joined[t]) {
          next = int(t);
          break;
        }
    }
    order.push_back(next);
    joined[size_t(next)] = true;
  }

  std::vector<std::vector<uint32_t>> tuples;
  for (uint32_t r : passing[size_t(order[0])]) {
    std::vector<uint32_t> t(n, 0);
    t[size_t(order[0])] = r;
    tuples.push_back(std::move(t));
  }

  std::vector<bool> in_prefix(n, false);
  in_prefix[size_t(order[0])] = true;
  std::vector<bool> edge_used(ast.joins.size(), false);

  for (size_t step = 1; step < order.size(); ++step) {
    int t = order[step];
    const Relation& rel = *tables[size_t(t)];
    JoinStep js;
    js.table_idx = t;
    js.left_rows = tuples.size();
    js.right_rows = passing[size_t(t)].size();

    std::vector<std::pair<std::pair<int, int>, int>> keys;  // (prefix table,col) , t col
    for (size_t e = 0; e < ast.joins.size(); ++e) {
      const auto& j = ast.joins[e];
      if (edge_used[e]) continue;
      if (j.left_table == t && in_prefix[size_t(j.right_table)]) {
        keys.push_back({{j.right_table, j.right_col}, j.left_col});
        js.edge_ids.push_back(int(e));
        edge_used[e] = true;
      } else if (j.right_table == t && in_prefix[size_t(j.left_table)]) {
        keys.push_back({{j.left_table, j.left_col}, j.right_col});
        js.edge_ids.push_back(int(e));
        edge_used[e] = true;
      }
    }

    std::unordered_map<std::vector<Value>, std::vector<uint32_t>, VecValueHash> ht;
    for (uint32_t r : passing[size_t(t)]) {
      std::vector<Value> key;
      key.reserve(keys.size());
      bool null_key = false;
      for (auto& [pc, tc] : keys) {
        Value v = rel.columns[size_t(tc)].get(r);
        if (v.is_null()) null_key = true;
        key.push_back(std::move(v));
      }
      if (!null_key) ht[std::move(key)].push_back(r);
    }

    std::vector<std::vector<uint32_t>> next;
    for (auto& tup : tuples) {
      std::vector<Value> key;
      key.reserve(keys.size());
      bool null_key = false;
      for (auto& [pc, tc] : keys) {
        Value v = tables[size_t(pc.first)]->columns[size_t(pc.second)].get(tup[size_t(pc.first)]);
        if (v.is_null()) null_key = true;
        key.push_back(std::move(v));
      }
      if (null_key) continue;
      auto it = ht.find(key);
      if (it == ht.end()) continue;
      for (uint32_t r : it->second) {
        auto copy = tup;
        copy[size_t(t)] = r;
        next.push_back(std::move(copy));
      }
    }
    tuples = std::move(next);
    js.out_rows = tuples.size();
    out.steps.push_back(std::move(js));
    in_prefix[size_t(t)] = true;
  }

  out.tuples = std::move(tuples);
  return out;
}

}  // namespace

ResultSet execute(const QueryAst& ast, const RelationMap& relations) {
  std::vector<const Relation*> tables;
  for (const auto& tr : ast.from) {
    auto it = relations.find(tr.table);
    if (it == relations.end()) throw UnknownPath(tr.table);
    tables.push_back(&it->second);
  }

  JoinedTuples joined = join_tables(ast, relations, tables);

  ResultSet rs;
  for (const auto& item : ast.select) {
    rs.names.push_back(item.alias);
    rs.types.push_back(item.expr->type);
  }

  bool has_agg = ast.has_aggregates();
  if (!has_agg && ast.group_by.empty()) {
    for (const auto& tup : joined.tuples) {
      TupleCtx ctx{&relations, &tables, tup.data()};
      std::vector<Value> row;
      row.reserve(ast.select.size());
      for (const auto& item : ast.select) row.push_back(eval_expr(*item.expr, ctx));
      rs.rows.push_back(std::move(row));
    }
  } else {
    std::vector<const Expr*> agg_nodes;
    for (const auto& item : ast.select) collect_agg_nodes(*item.expr, agg_nodes);

    Grouper grouper;
    std::vector<std::vector<AggState>> states;  // per group, per agg node
    for (const auto& tup : joined.tuples) {
      TupleCtx ctx{&relations, &tables, tup.data()};
      std::vector<Value> key;
      key.reserve(ast.group_by.size());
      for (const auto& g : ast.group_by) key.push_back(eval_expr(*g, ctx));
      size_t gid = grouper.group_of(std::move(key));
      if (gid >= states.size()) states.resize(gid + 1, std::vector<AggState>(agg_nodes.size()));
      for (size_t a = 0; a < agg_nodes.size(); ++a) {
        const Expr& node = *agg_nodes[a];
        Value v = node.star ? Value::from_int(1) : eval_expr(*node.args[0], ctx);
        states[gid][a].update(node.agg, v);
      }
    }
    if (grouper.keys.empty() && ast.group_by.empty()) {
      // Aggregates over an empty input still produce one row.
      grouper.keys.push_back({});
      states.emplace_back(agg_nodes.size());
    }
    for (size_t g = 0; g < grouper.keys.size(); ++g) {
      std::vector<Value> row;
      row.reserve(ast.select.size());
      for (const auto& item : ast.select)
        row.push_back(eval_group_expr(*item.expr, agg_nodes, states[g], ast, grouper.keys[g]));
      rs.rows.push_back(std::move(row));
    }
  }

  if (!ast.order_by.empty()) {
    std::stable_sort(rs.rows.begin(), rs.rows.end(), [&](const auto& a, const auto& b) {
      for (const auto& k : ast.order_by) {
        int c = a[size_t(k.select_idx)].compare(b[size_t(k.select_idx)]);
        if (c != 0) return k.desc ? c > 0 : c < 0;
      }
      return false;
    });
  }
  if (ast.limit && rs.rows.size() > size_t(*ast.limit)) rs.rows.resize(size_t(*ast.limit));
  return rs;
}

ResultSet canonicalize(ResultSet rs, const std::vector<sql::OrderKey>& order_by) {
  for (auto& row : rs.rows)
    for (auto& v : row)
      if (v.tag == Value::Tag::Flt) v.f = round_sig10(v.f);

  auto lex_all = [](const std::vector<Value>& a, const std::vector<Value>& b) {
    for (size_t i = 0; i < a.size(); ++i) {
      int c = a[i].compare(b[i]);
      if (c != 0) return c < 0;
    }
    return false;
  };

  if (order_by.empty()) {
    std::sort(rs.rows.begin(), rs.rows.end(), lex_all);
  } else {
    // Preserve the query order; break ties on the ORDER BY keys by the
    // remaining columns so comparison is deterministic.
    std::stable_sort(rs.rows.begin(), rs.rows.end(), [&](const auto& a, const auto& b) {
      for (const auto& k : order_by) {
        int c = a[size_t(k.select_idx)].compare(b[size_t(k.select_idx)]);
        if (c != 0) return k.desc ? c > 0 : c < 0;
      }
      return lex_all(a, b);
    });
  }
  return rs;
}

std::string Mismatch::to_string() const {
  if (column < 0) return "result shape differs at row " + std::to_string(row) + ": " + left + " vs " + right;
  return "row " + std::to_string(row) + " column " + std::to_string(column) + ": " + left + " vs " + right;
}

std::optional<Mismatch> compare(const ResultSet& a, const ResultSet& b) {
  if (a.names != b.names)
    return Mismatch{0, -1, "header[" + std::to_string(a.names.size()) + "]", "header[" + std::to_string(b.names.size()) + "]"};
  size_t n = std::min(a.rows.size(), b.rows.size());
  for (size_t r = 0; r < n; ++r) {
    for (size_t c = 0; c < a.names.size(); ++c) {
      if (!(a.rows[r][c] == b.rows[r][c]))
        return Mismatch{r, int(c), a.rows[r][c].to_text(), b.rows[r][c].to_text()};
    }
  }
  if (a.rows.size() != b.rows.size())
    return Mismatch{n, -1, std::to_string(a.rows.size()) + " rows", std::to_string(b.rows.size()) + " rows"};
  return std::nullopt;
}

std::string to_tsv(const ResultSet& rs) {
  std::string out;
  for (size_t i = 0; i < rs.names.size(); ++i) {
    if (i) out += '\t';
    out += rs.names[i];
  }
  out += '\n';
  for (const auto& row : rs.rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += '\t';
      out += row[i].to_text();
    }
    out += '\n';
  }
  return out;
}

CardinalityProfile profile_cardinalities(const sql::QueryAst& ast, const RelationMap& relations) {
  std::vector<const Relation*> tables;
  for (const auto& tr : ast.from) tables.push_back(&relations.at(tr.table));
  JoinedTuples joined = join_tables(ast, relations, tables);

  CardinalityProfile p;
  p.base_rows = joined.base_rows;
  p.filtered_rows = joined.filtered_rows;
  for (size_t t = 0; t < joined.base_rows.size(); ++t)
    p.filter_selectivity.push_back(joined.base_rows[t] == 0
                                       ? 0.0
                                       : double(joined.filtered_rows[t]) / double(joined.base_rows[t]));
  p.steps = joined.steps;

  // Per-edge selectivity from the measured decomposition; multi-edge steps
  // split their combined selectivity geometrically.
  p.edge_selectivity.assign(ast.joins.size(), 1.0);
  for (const auto& step : p.steps) {
    double denom = double(step.left_rows) * double(step.right_rows);
    double sel = denom > 0 ? double(step.out_rows) / denom : 0.0;
    if (step.edge_ids.empty()) continue;
    double share = std::pow(std::max(sel, 1e-12), 1.0 / double(step.edge_ids.size()));
    for (int e : step.edge_ids) p.edge_selectivity[size_t(e)] = sel == 0 ? 0.0 : share;
  }
  return p;
}

namespace {

class BuiltinReference final : public ReferenceEngine {
 public:
  ResultSet run(const sql::QueryAst& ast, const RelationMap& relations) override {
    return execute(ast, relations);
  }
};

}  // namespace

ReferenceEngine& builtin_reference() {
  static BuiltinReference engine;
  return engine;
}

}  // namespace bespoke::oracle
