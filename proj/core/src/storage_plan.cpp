#include "bespoke/storage_plan.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "bespoke/errors.hpp"
#include "bespoke/sql.hpp"

namespace bespoke::planner {

std::string encoding_name(Encoding e) {
  switch (e) {
    case Encoding::Plain:
      return "plain";
    case Encoding::Dictionary:
      return "dictionary";
    case Encoding::ScaledInteger:
      return "scaled_integer";
    case Encoding::CompactDate:
      return "compact_date";
    case Encoding::StringArena:
      return "string_arena";
  }
  return "?";
}

Encoding TablePlan::encoding_of(const std::string& column) const {
  for (const auto& c : encodings)
    if (c.column == column) return c.encoding;
  return Encoding::Plain;
}

bool TablePlan::sorted_by(const std::string& column) const {
  return !sort_order.empty() && sort_order.front() == column;
}

const TablePlan* StoragePlan::find_table(const std::string& name) const {
  for (const auto& t : tables)
    if (t.table == name) return &t;
  return nullptr;
}

bool StoragePlan::has_support(SupportStructure::Kind kind, const std::string& table,
                              const std::string& column) const {
  return std::any_of(supports.begin(), supports.end(), [&](const SupportStructure& s) {
    return s.kind == kind && s.table == table && s.column == column;
  });
}

const SupportStructure* StoragePlan::find_directory(const std::string& parent, const std::string& child) const {
  for (const auto& s : supports)
    if (s.kind == SupportStructure::Kind::RangeDirectory && s.parent_table == parent && s.table == child) return &s;
  return nullptr;
}

namespace {

struct ColumnUse {
  int range_uses = 0;      // < <= > >= BETWEEN
  int join_uses = 0;       // equi-join endpoint / semi correlation
  int equality_uses = 0;   // = or IN against literals
  int like_uses = 0;
  int other_uses = 0;      // select, group by, arithmetic
};

using UseMap = std::map<std::pair<std::string, std::string>, ColumnUse>;

void note_expr_uses(const sql::Expr& e, const std::vector<std::string>& table_names, UseMap& uses) {
  std::vector<const sql::Expr*> cols;
  e.collect_columns(cols);
  for (const auto* c : cols) ++uses[{table_names[size_t(c->table_idx)], c->column}].other_uses;
}

// Per-(table, column) usage counts across all templates; filter predicates
// count by operator class, everything else is "other".
UseMap collect_uses(const contract::Contract& c) {
  UseMap uses;
  for (const auto& tmpl : c.templates) {
    sql::QueryAst ast = sql::parse_query(tmpl.text, c);
    std::vector<std::string> table_names;
    for (const auto& tr : ast.from) table_names.push_back(tr.table);

    auto note_filter = [&](const sql::FilterPred& f, const std::string& table_name) {
      if (f.lhs->kind != sql::Expr::Kind::ColumnRef) {
        note_expr_uses(*f.lhs, table_names, uses);
        return;
      }
      auto& u = uses[{table_name, f.lhs->column}];
      switch (f.kind) {
        case sql::FilterPred::Kind::Compare:
          if (f.op == sql::CmpOp::Eq)
            ++u.equality_uses;
          else
            ++u.range_uses;
          break;
        case sql::FilterPred::Kind::Between:
          ++u.range_uses;
          break;
        case sql::FilterPred::Kind::InList:
          ++u.equality_uses;
          break;
        case sql::FilterPred::Kind::Like:
          ++u.like_uses;
          break;
      }
    };
    for (const auto& f : ast.filters) {
      if (f.table_idx < 0) continue;
      note_filter(f, table_names[size_t(f.table_idx)]);
    }
    auto col_name = [&](int t, int col) {
      return c.find_table(table_names[size_t(t)])->columns[size_t(col)].name;
    };
    for (const auto& j : ast.joins) {
      ++uses[{table_names[size_t(j.left_table)], col_name(j.left_table, j.left_col)}].join_uses;
      ++uses[{table_names[size_t(j.right_table)], col_name(j.right_table, j.right_col)}].join_uses;
    }
    for (const auto& s : ast.semis) {
      std::vector<const sql::Expr*> cols;
      s.outer_key->collect_columns(cols);
      for (const auto* col : cols) ++uses[{table_names[size_t(col->table_idx)], col->column}].join_uses;
      const auto* inner = c.find_table(s.inner_table);
      ++uses[{s.inner_table, inner->columns[size_t(s.inner_key_col)].name}].join_uses;
      for (const auto& f : s.inner_filters) {
        // Inner filters are scoped to the inner table.
        if (f.lhs->kind == sql::Expr::Kind::ColumnRef) {
          auto& u = uses[{s.inner_table, f.lhs->column}];
          if (f.kind == sql::FilterPred::Kind::Like)
            ++u.like_uses;
          else if (f.kind == sql::FilterPred::Kind::Between ||
                   (f.kind == sql::FilterPred::Kind::Compare && f.op != sql::CmpOp::Eq))
            ++u.range_uses;
          else
            ++u.equality_uses;
        }
        std::vector<const sql::Expr*> fcols;
        if (f.lo) f.lo->collect_columns(fcols);
        if (f.hi) f.hi->collect_columns(fcols);
        for (const auto* fc : fcols) ++uses[{s.inner_table, fc->column}].other_uses;
      }
    }
    for (const auto& item : ast.select) note_expr_uses(*item.expr, table_names, uses);
    for (const auto& g : ast.group_by) note_expr_uses(*g, table_names, uses);
  }
  return uses;
}

bool is_join_or_key_column(const contract::TableSchema& t, const std::string& col, const UseMap& uses) {
  if (t.primary_key == col) return true;
  for (const auto& fk : t.foreign_keys)
    if (fk.column == col) return true;
  auto it = uses.find({t.name, col});
  return it != uses.end() && it->second.join_uses > 0;
}

void collect_arith_subexprs(const sql::Expr& e, const std::vector<std::string>& table_names,
                            std::map<std::pair<std::string, std::string>, std::set<std::string>>& counts,
                            const std::string& tmpl_id) {
  if (e.kind == sql::Expr::Kind::Arith && !e.contains_param() && !e.contains_agg()) {
    std::vector<const sql::Expr*> cols;
    e.collect_columns(cols);
    if (!cols.empty()) {
      int t = cols[0]->table_idx;
      bool single = std::all_of(cols.begin(), cols.end(), [&](const sql::Expr* c) { return c->table_idx == t; });
      if (single) counts[{table_names[size_t(t)], sql::expr_to_text(e)}].insert(tmpl_id);
    }
  }
  for (const auto& a : e.args) collect_arith_subexprs(*a, table_names, counts, tmpl_id);
}

}  // namespace

StoragePlan plan_storage(const contract::Contract& c, const DatasetHeader& stats, const PlannerLimits& limits) {
  StoragePlan plan;
  UseMap uses = collect_uses(c);

  for (const auto& t : c.tables) {
    const TableStats& ts = stats.tables.at(t.name);
    TablePlan tp;
    tp.table = t.name;

    for (const auto& col : t.columns) {
      const ColumnStats* cs = ts.find(col.name);
      ColumnPlan cp;
      cp.column = col.name;
      size_t rows = std::max<size_t>(ts.row_count, 1);
      bool dict_ok = cs && cs->distinct_count > 0 && cs->distinct_count <= limits.dictionary_max_distinct &&
                     double(cs->distinct_count) <= limits.dictionary_max_ratio * double(rows) &&
                     !is_join_or_key_column(t, col.name, uses);
      switch (col.type.kind) {
        case TypeKind::Varchar:
          cp.encoding = dict_ok ? Encoding::Dictionary : Encoding::StringArena;
          break;
        case TypeKind::Decimal:
          cp.encoding = Encoding::ScaledInteger;
          break;
        case TypeKind::Date: {
          bool compact = cs && cs->has_minmax && (cs->max.i - cs->min.i) <= limits.compact_date_max_span;
          cp.encoding = compact ? Encoding::CompactDate : Encoding::Plain;
          break;
        }
        case TypeKind::Int64:
          cp.encoding = dict_ok ? Encoding::Dictionary : Encoding::Plain;
          break;
        case TypeKind::Float64:
          cp.encoding = Encoding::Plain;
          break;
      }
      tp.encodings.push_back(cp);
    }

    // Sort order: most frequent range/join key; ties resolved by column order.
    int best_count = 0;
    int best_idx = -1;
    for (size_t i = 0; i < t.columns.size(); ++i) {
      auto it = uses.find({t.name, t.columns[i].name});
      if (it == uses.end()) continue;
      int n = it->second.range_uses + it->second.join_uses;
      if (n > best_count) {
        best_count = n;
        best_idx = int(i);
      }
    }
    if (best_idx >= 0) tp.sort_order.push_back(t.columns[size_t(best_idx)].name);
    plan.tables.push_back(std::move(tp));
  }

  for (const auto& t : c.tables) {
    const TablePlan& tp = *plan.find_table(t.name);
    for (const auto& col : t.columns) {
      auto it = uses.find({t.name, col.name});
      const ColumnUse* u = it == uses.end() ? nullptr : &it->second;
      bool is_sort = tp.sorted_by(col.name);

      if (u && u->join_uses > 0 && !is_sort && col.type.kind != TypeKind::Varchar)
        plan.supports.push_back({SupportStructure::Kind::HashIndex, t.name, col.name, "", 0});

      if (u && u->range_uses > 0 && col.type.kind != TypeKind::Varchar)
        plan.supports.push_back({SupportStructure::Kind::ZoneMap, t.name, col.name, "", limits.zone_map_shard});

      bool like_only = u && u->like_uses > 0 && u->range_uses == 0 && u->equality_uses == 0 &&
                       u->join_uses == 0 && u->other_uses == 0;
      if (like_only) {
        plan.supports.push_back({SupportStructure::Kind::CharMaskAlpha, t.name, col.name, "", 0});
        plan.supports.push_back({SupportStructure::Kind::CharMaskBigram, t.name, col.name, "", 0});
      }
    }
    for (const auto& fk : t.foreign_keys) {
      if (tp.sorted_by(fk.column))
        plan.supports.push_back({SupportStructure::Kind::RangeDirectory, t.name, fk.column, fk.parent_table, 0});
    }
  }

  // Derived columns for arithmetic subexpressions shared by >= 2 templates.
  std::map<std::pair<std::string, std::string>, std::set<std::string>> counts;
  for (const auto& tmpl : c.templates) {
    sql::QueryAst ast = sql::parse_query(tmpl.text, c);
    std::vector<std::string> table_names;
    for (const auto& tr : ast.from) table_names.push_back(tr.table);
    for (const auto& item : ast.select) collect_arith_subexprs(*item.expr, table_names, counts, tmpl.id);
    for (const auto& f : ast.filters) {
      if (f.lhs) collect_arith_subexprs(*f.lhs, table_names, counts, tmpl.id);
      if (f.lo) collect_arith_subexprs(*f.lo, table_names, counts, tmpl.id);
      if (f.hi) collect_arith_subexprs(*f.hi, table_names, counts, tmpl.id);
    }
  }
  int n_derived = 0;
  for (const auto& [key, tmpl_ids] : counts) {
    if (tmpl_ids.size() < limits.derived_min_reuse) continue;
    DerivedColumn d;
    d.table = key.first;
    d.name = "dx_" + std::to_string(n_derived++);
    d.expression = key.second;
    plan.derived.push_back(std::move(d));
  }
  return plan;
}

std::string StoragePlan::to_text() const {
  std::ostringstream out;
  for (const auto& t : tables) {
    out << "[table " << t.table << "]\n";
    if (!t.sort_order.empty()) {
      out << "sort";
      for (const auto& s : t.sort_order) out << " " << s;
      out << "\n";
    }
    for (const auto& e : t.encodings) out << "encode " << e.column << " " << encoding_name(e.encoding) << "\n";
    for (const auto& s : supports) {
      if (s.table != t.table) continue;
      switch (s.kind) {
        case SupportStructure::Kind::HashIndex:
          out << "support hash_index " << s.column << "\n";
          break;
        case SupportStructure::Kind::RangeDirectory:
          out << "support range_directory " << s.column << " parent " << s.parent_table << "\n";
          break;
        case SupportStructure::Kind::ZoneMap:
          out << "support zone_map " << s.column << " shard " << s.shard_size << "\n";
          break;
        case SupportStructure::Kind::CharMaskAlpha:
          out << "support char_mask " << s.column << " alpha\n";
          break;
        case SupportStructure::Kind::CharMaskBigram:
          out << "support char_mask " << s.column << " bigram\n";
          break;
      }
    }
    for (const auto& d : derived) {
      if (d.table != t.table) continue;
      out << "derived " << d.name << " = " << d.expression << "\n";
    }
    out << "\n";
  }
  return out.str();
}

StoragePlan StoragePlan::from_text(const std::string& text) {
  StoragePlan plan;
  std::istringstream in(text);
  std::string line;
  TablePlan* tp = nullptr;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    size_t b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.rfind("[table ", 0) != 0 || line.back() != ']') throw SyntaxError(line_no, "bad plan section");
      plan.tables.push_back({});
      tp = &plan.tables.back();
      tp->table = line.substr(7, line.size() - 8);
      continue;
    }
    if (!tp) throw SyntaxError(line_no, "plan content before table section");
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "sort") {
      std::string col;
      while (ls >> col) tp->sort_order.push_back(col);
    } else if (kw == "encode") {
      std::string col, enc;
      ls >> col >> enc;
      ColumnPlan cp;
      cp.column = col;
      if (enc == "plain")
        cp.encoding = Encoding::Plain;
      else if (enc == "dictionary")
        cp.encoding = Encoding::Dictionary;
      else if (enc == "scaled_integer")
        cp.encoding = Encoding::ScaledInteger;
      else if (enc == "compact_date")
        cp.encoding = Encoding::CompactDate;
      else if (enc == "string_arena")
        cp.encoding = Encoding::StringArena;
      else
        throw SyntaxError(line_no, "unknown encoding: " + enc);
      tp->encodings.push_back(cp);
    } else if (kw == "support") {
      std::string kind, col;
      ls >> kind >> col;
      SupportStructure s;
      s.table = tp->table;
      s.column = col;
      if (kind == "hash_index") {
        s.kind = SupportStructure::Kind::HashIndex;
      } else if (kind == "range_directory") {
        std::string parent_kw;
        ls >> parent_kw >> s.parent_table;
        s.kind = SupportStructure::Kind::RangeDirectory;
      } else if (kind == "zone_map") {
        std::string shard_kw;
        ls >> shard_kw >> s.shard_size;
        s.kind = SupportStructure::Kind::ZoneMap;
      } else if (kind == "char_mask") {
        std::string mk;
        ls >> mk;
        s.kind = mk == "alpha" ? SupportStructure::Kind::CharMaskAlpha : SupportStructure::Kind::CharMaskBigram;
      } else {
        throw SyntaxError(line_no, "unknown support kind: " + kind);
      }
      plan.supports.push_back(std::move(s));
    } else if (kw == "derived") {
      DerivedColumn d;
      d.table = tp->table;
      ls >> d.name;
      std::string eq;
      ls >> eq;
      std::getline(ls, d.expression);
      size_t s0 = d.expression.find_first_not_of(" \t");
      d.expression = s0 == std::string::npos ? "" : d.expression.substr(s0);
      plan.derived.push_back(std::move(d));
    } else {
      throw SyntaxError(line_no, "unknown plan directive: " + kw);
    }
  }
  return plan;
}

}  // namespace bespoke::planner
