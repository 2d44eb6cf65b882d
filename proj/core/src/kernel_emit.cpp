#include "bespoke/kernel_emit.hpp"

#include <json.hpp>
#include <algorithm>
#include <set>
#include <sstream>

#include "bespoke/errors.hpp"

namespace bespoke::kernelgen {

using nlohmann::json;
using planner::Encoding;
using planner::EncodedColumn;
using planner::StoreTable;
using sql::CmpOp;
using sql::Expr;
using sql::FilterPred;

namespace {

const char* kAbiDecl =
    "struct bq_binding { const long long* ints; const char* const* strs; };"
    "struct bq_sink { void* ctx; void (*begin_row)(void*); void (*cell_i64)(void*, long long);"
    " void (*cell_f64)(void*, double); void (*cell_str)(void*, const char*, unsigned long long);"
    " void (*cell_null)(void*); void (*error)(void*, const char*); }; v1";

}  // namespace

uint64_t abi_signature_hash() {
  uint64_t h = 1469598103934665603ull;
  for (const char* p = kAbiDecl; *p; ++p) h = (h ^ uint8_t(*p)) * 1099511628211ull;
  return h;
}

namespace {

std::string type_name(ColumnType t) { return t.to_string(); }

ColumnType type_from_name(const std::string& s) { return parse_column_type(s); }

// ---------------------------------------------------------------------------
// Emitter
// ---------------------------------------------------------------------------

class Emitter {
 public:
  Emitter(const KernelSpec& spec, const sql::QueryAst& ast, const planner::BespokeStore& store,
          const contract::Contract& contract, bool tracing)
      : spec_(spec), ast_(ast), store_(store), contract_(contract), tracing_(tracing) {
    for (const auto& tr : ast_.from) tables_.push_back(&store_.tables.at(tr.table));
  }

 private:
  const KernelSpec& spec_;
  const sql::QueryAst& ast_;
  const planner::BespokeStore& store_;
  const contract::Contract& contract_;
  bool tracing_;
  std::vector<const StoreTable*> tables_;

  std::ostringstream body_;
  std::ostringstream prologue_;
  int indent_ = 1;
  json slots_ = json::array();
  std::map<std::string, std::string> slot_vars_;  // slot name -> C variable
  std::vector<std::string> int_params_;
  std::vector<std::string> str_params_;
  std::vector<std::string> counters_;
  int tmp_ = 0;

  std::string tmp(const std::string& base) { return base + std::to_string(tmp_++); }

  void line(const std::string& s) {
    for (int i = 0; i < indent_; ++i) body_ << "  ";
    body_ << s << "\n";
  }
  void open(const std::string& s) {
    line(s);
    ++indent_;
  }
  void close() {
    --indent_;
    line("}");
  }

  int counter(const std::string& name) {
    if (!tracing_) return -1;
    counters_.push_back(name);
    return int(counters_.size()) - 1;
  }
  void count(int slot, const std::string& delta = "1") {
    if (slot >= 0) line("BQ_TRACE(trace_buf[" + std::to_string(slot) + "] += " + delta + ";)");
  }

  // --- slot management ---

  std::string slot(const std::string& name, const std::string& kind, const std::string& ctype) {
    auto it = slot_vars_.find(name);
    if (it != slot_vars_.end()) return it->second;
    std::string var = "s" + std::to_string(slots_.size());
    slots_.push_back({{"name", name}, {"kind", kind}});
    slot_vars_[name] = var;
    prologue_ << "  const " << ctype << "* " << var << " = (const " << ctype << "*)slots["
              << slots_.size() - 1 << "];\n";
    return var;
  }
  std::string scalar_slot(const std::string& name) {
    std::string var = slot(name, "scalar", "unsigned long long");
    return "(*" + var + ")";
  }

  const EncodedColumn* col(int pos, int c) const { return &tables_[size_t(pos)]->columns[size_t(c)]; }
  std::string tbl_name(int pos) const { return tables_[size_t(pos)]->name; }
  std::string col_name(int pos, int c) const { return tables_[size_t(pos)]->schema[size_t(c)].name; }
  std::string rid(int pos) const { return "r" + std::to_string(pos); }

  std::string valid_var(int pos, int c) {
    return slot(tbl_name(pos) + "." + col_name(pos, c) + ".valid", "u8", "unsigned char");
  }

  // Value expression (int64 at the column's own scale) for one column.
  std::string col_i64(int pos, int c) {
    const EncodedColumn* ec = col(pos, c);
    std::string base = tbl_name(pos) + "." + col_name(pos, c);
    switch (ec->enc) {
      case Encoding::Plain:
      case Encoding::ScaledInteger:
        return slot(base + ".i64", "i64", "long long") + "[" + rid(pos) + "]";
      case Encoding::CompactDate:
        return "(" + scalar_slot(base + ".epoch") + " + (long long)" +
               slot(base + ".u16", "u16", "unsigned short") + "[" + rid(pos) + "])";
      case Encoding::Dictionary:
        return slot(base + ".dict_i64", "i64", "long long") + "[" +
               slot(base + ".codes", "u32", "unsigned") + "[" + rid(pos) + "]]";
      case Encoding::StringArena:
        throw EmissionError("string column in integer context");
    }
    return {};
  }

  std::string col_codes(int pos, int c) {
    std::string base = tbl_name(pos) + "." + col_name(pos, c);
    return slot(base + ".codes", "u32", "unsigned");
  }

  // string_view expression for a string column.
  std::string col_str(int pos, int c) {
    const EncodedColumn* ec = col(pos, c);
    std::string base = tbl_name(pos) + "." + col_name(pos, c);
    if (ec->enc == Encoding::StringArena) {
      std::string off = slot(base + ".off", "u64", "unsigned long long");
      std::string bytes = slot(base + ".bytes", "bytes", "char");
      std::string r = rid(pos);
      return "std::string_view(" + bytes + " + " + off + "[" + r + "], " + off + "[" + r + " + 1] - " + off +
             "[" + r + "])";
    }
    if (ec->enc == Encoding::Dictionary) {
      std::string doff = slot(base + ".dict_str_off", "u64", "unsigned long long");
      std::string dbytes = slot(base + ".dict_str_bytes", "bytes", "char");
      std::string code = col_codes(pos, c) + "[" + rid(pos) + "]";
      return "std::string_view(" + dbytes + " + " + doff + "[" + code + "], " + doff + "[" + code + " + 1] - " +
             doff + "[" + code + "])";
    }
    throw EmissionError("integer column in string context");
  }

  // Dictionary handles for runtime lookups.
  struct DictRef {
    std::string n;      // entry count expr
    std::string i64;    // sorted values var (or empty)
    std::string s_off;  // string offsets var
    std::string s_bytes;
    bool is_str = false;
  };
  DictRef dict_ref(int pos, int c) {
    const EncodedColumn* ec = col(pos, c);
    std::string base = tbl_name(pos) + "." + col_name(pos, c);
    DictRef d;
    d.n = scalar_slot(base + ".dict_n");
    d.is_str = ec->logical_type.kind == TypeKind::Varchar;
    if (d.is_str) {
      d.s_off = slot(base + ".dict_str_off", "u64", "unsigned long long");
      d.s_bytes = slot(base + ".dict_str_bytes", "bytes", "char");
    } else {
      d.i64 = slot(base + ".dict_i64", "i64", "long long");
    }
    return d;
  }

  // --- parameters ---

  std::string int_param(const std::string& name) {
    auto it = std::find(int_params_.begin(), int_params_.end(), name);
    size_t idx = it == int_params_.end() ? int_params_.size() : size_t(it - int_params_.begin());
    if (it == int_params_.end()) int_params_.push_back(name);
    return "binding->ints[" + std::to_string(idx) + "]";
  }
  std::string str_param(const std::string& name) {
    auto it = std::find(str_params_.begin(), str_params_.end(), name);
    size_t idx = it == str_params_.end() ? str_params_.size() : size_t(it - str_params_.begin());
    if (it == str_params_.end()) str_params_.push_back(name);
    return "std::string(binding->strs[" + std::to_string(idx) + "])";
  }

  // --- scalar expression emission ---

  struct EmittedExpr {
    enum class Kind : uint8_t { I64, Dbl, Str } kind = Kind::I64;
    std::string code;
    uint8_t scale = 0;
    std::vector<std::string> guards;  // null guards; all must hold
    ColumnType type;
  };

  EmittedExpr emit_expr(const Expr& e) {
    switch (e.kind) {
      case Expr::Kind::Literal: {
        EmittedExpr out;
        if (e.lit.tag == Value::Tag::Str) {
          out.kind = EmittedExpr::Kind::Str;
          out.code = "std::string_view(\"" + escape(e.lit.s) + "\", " + std::to_string(e.lit.s.size()) + ")";
        } else if (e.lit.tag == Value::Tag::Flt) {
          out.kind = EmittedExpr::Kind::Dbl;
          out.code = "double(" + std::to_string(e.lit.f) + ")";
        } else if (e.lit.is_null()) {
          out.code = "0LL";
          out.guards.push_back("false");
        } else {
          out.code = std::to_string(e.lit.i) + "LL";
          out.scale = e.lit.tag == Value::Tag::Dec ? e.lit.scale : 0;
        }
        out.type = e.type;
        return out;
      }
      case Expr::Kind::Param: {
        EmittedExpr out;
        out.type = e.type;
        if (e.type.kind == TypeKind::Varchar) {
          out.kind = EmittedExpr::Kind::Str;
          out.code = str_param(e.param);
          return out;
        }
        out.code = int_param(e.param);
        out.scale = e.type.kind == TypeKind::Decimal ? e.type.scale : 0;
        return out;
      }
      case Expr::Kind::ColumnRef: {
        EmittedExpr out;
        out.type = e.type;
        const EncodedColumn* ec = col(e.table_idx, e.col_idx);
        if (ec->nullable) out.guards.push_back(valid_var(e.table_idx, e.col_idx) + "[" + rid(e.table_idx) + "]");
        if (e.type.kind == TypeKind::Varchar) {
          out.kind = EmittedExpr::Kind::Str;
          out.code = col_str(e.table_idx, e.col_idx);
          return out;
        }
        out.code = col_i64(e.table_idx, e.col_idx);
        out.scale = e.type.kind == TypeKind::Decimal ? e.type.scale : 0;
        return out;
      }
      case Expr::Kind::Arith: {
        // Derived-column substitution, matching the interpreted backend.
        if (spec_.use_derived) {
          std::vector<const Expr*> cols;
          e.collect_columns(cols);
          if (!cols.empty()) {
            int pos = cols[0]->table_idx;
            bool single =
                std::all_of(cols.begin(), cols.end(), [&](const Expr* c) { return c->table_idx == pos; });
            if (single) {
              int didx = tables_[size_t(pos)]->derived_index(sql::expr_to_text(e));
              if (didx >= 0) {
                const EncodedColumn* dc = &tables_[size_t(pos)]->derived[size_t(didx)];
                std::string base = tbl_name(pos) + ".derived." + tables_[size_t(pos)]->derived_meta[size_t(didx)].name;
                EmittedExpr out;
                out.type = dc->logical_type;
                out.scale = dc->logical_type.kind == TypeKind::Decimal ? dc->logical_type.scale : 0;
                out.code = slot(base + ".i64", "i64", "long long") + "[" + rid(pos) + "]";
                if (dc->nullable)
                  out.guards.push_back(slot(base + ".valid", "u8", "unsigned char") + "[" + rid(pos) + "]");
                return out;
              }
            }
          }
        }
        EmittedExpr l = emit_expr(*e.args[0]);
        EmittedExpr r = emit_expr(*e.args[1]);
        EmittedExpr out;
        out.type = e.type;
        out.guards = l.guards;
        out.guards.insert(out.guards.end(), r.guards.begin(), r.guards.end());
        if (e.op == '/' || l.kind == EmittedExpr::Kind::Dbl || r.kind == EmittedExpr::Kind::Dbl) {
          out.kind = EmittedExpr::Kind::Dbl;
          std::string lc = to_dbl(l), rc = to_dbl(r);
          if (e.op == '/') {
            // Division by zero yields null: fold the zero test into guards.
            std::string dv = tmp("dv");
            prologue_deferred_.push_back("double " + dv + " = 0;");
            out.guards.push_back("((" + dv + " = " + rc + ") != 0.0)");
            out.code = "(" + lc + " / " + dv + ")";
          } else {
            out.code = "(" + lc + " " + e.op + " " + rc + ")";
          }
          return out;
        }
        if (e.op == '*') {
          out.scale = uint8_t(l.scale + r.scale);
          out.code = "(" + l.code + " * " + r.code + ")";
          return out;
        }
        uint8_t s = std::max(l.scale, r.scale);
        out.scale = s;
        std::string lc = scale_up(l.code, s - l.scale);
        std::string rc = scale_up(r.code, s - r.scale);
        out.code = "(" + lc + " " + e.op + " " + rc + ")";
        return out;
      }
      case Expr::Kind::Agg:
        throw EmissionError("aggregate in row context");
    }
    throw EmissionError("bad expression");
  }

  // Deferred declarations hoisted just before the driver loop.
  std::vector<std::string> prologue_deferred_;

  static std::string scale_up(const std::string& code, unsigned by) {
    if (by == 0) return code;
    return "(" + code + " * " + std::to_string(pow10_i64(by)) + "LL)";
  }
  std::string to_dbl(const EmittedExpr& e) {
    if (e.kind == EmittedExpr::Kind::Dbl) return e.code;
    if (e.kind == EmittedExpr::Kind::Str) throw EmissionError("string in numeric context");
    if (e.scale == 0) return "double(" + e.code + ")";
    return "(double(" + e.code + ") / " + std::to_string(pow10_i64(e.scale)) + ".0)";
  }

  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '"' || c == '\\') out += '\\';
      if (c == '\n') {
        out += "\\n";
        continue;
      }
      out += c;
    }
    return out;
  }

  static std::string guard_expr(const std::vector<std::string>& guards) {
    if (guards.empty()) return "true";
    std::string out;
    for (size_t i = 0; i < guards.size(); ++i) {
      if (i) out += " && ";
      out += guards[i];
    }
    return out;
  }

  // --- filters ---

  std::string cmp_op_text(CmpOp op) {
    switch (op) {
      case CmpOp::Eq:
        return "==";
      case CmpOp::Lt:
        return "<";
      case CmpOp::Le:
        return "<=";
      case CmpOp::Gt:
        return ">";
      case CmpOp::Ge:
        return ">=";
    }
    return "==";
  }

  // Precomputed threshold at the column scale; emitted into the prep section.
  std::string prep_threshold(const Expr& bound, uint8_t col_scale, CmpOp op, std::string* impossible_var) {
    EmittedExpr b = emit_expr(bound);
    if (b.kind != EmittedExpr::Kind::I64) throw EmissionError("non-integer threshold");
    std::string var = tmp("th");
    if (b.scale <= col_scale) {
      prep_ << "  const long long " << var << " = " << scale_up(b.code, unsigned(col_scale - b.scale)) << ";\n";
      return var;
    }
    long long f = pow10_i64(unsigned(b.scale - col_scale));
    std::string raw = tmp("raw");
    prep_ << "  const long long " << raw << " = " << b.code << ";\n";
    switch (op) {
      case CmpOp::Eq: {
        if (!impossible_var) throw EmissionError("equality at finer scale needs a flag");
        *impossible_var = tmp("imp");
        prep_ << "  const bool " << *impossible_var << " = (" << raw << " % " << f << "LL) != 0;\n";
        prep_ << "  const long long " << var << " = " << raw << " / " << f << "LL;\n";
        break;
      }
      case CmpOp::Ge:
        prep_ << "  const long long " << var << " = bq_ceil_div(" << raw << ", " << f << "LL);\n";
        break;
      case CmpOp::Gt:
      case CmpOp::Le:
        prep_ << "  const long long " << var << " = bq_floor_div(" << raw << ", " << f << "LL);\n";
        break;
      case CmpOp::Lt:
        prep_ << "  const long long " << var << " = bq_ceil_div(" << raw << ", " << f << "LL);\n";
        break;
    }
    return var;
  }

  std::ostringstream prep_;

  // C boolean expression for one filter at its table's loop level.
  std::string filter_cond(const FilterPred& f, AccessPath path) {
    switch (f.kind) {
      case FilterPred::Kind::Compare:
      case FilterPred::Kind::Between: {
        if (path == AccessPath::DictionaryRewrite && f.lhs->kind == Expr::Kind::ColumnRef &&
            col(f.lhs->table_idx, f.lhs->col_idx)->enc == Encoding::Dictionary)
          return dict_window_cond(f);
        auto one = [&](const Expr& bound, CmpOp op) {
          EmittedExpr l = emit_expr(*f.lhs);
          EmittedExpr r = emit_expr(bound);
          if (l.kind == EmittedExpr::Kind::Str || r.kind == EmittedExpr::Kind::Str) {
            if (l.kind != r.kind) throw EmissionError("string compared with number");
            std::string g = guard_expr(l.guards) + " && " + guard_expr(r.guards);
            return "(" + g + " && (" + l.code + ").compare(" + r.code + ") " + cmp_op_text(op) + " 0)";
          }
          if (l.kind == EmittedExpr::Kind::Dbl || r.kind == EmittedExpr::Kind::Dbl) {
            std::string g = guard_expr(l.guards) + " && " + guard_expr(r.guards);
            return "(" + g + " && " + to_dbl(l) + " " + cmp_op_text(op) + " " + to_dbl(r) + ")";
          }
          uint8_t s = std::max(l.scale, r.scale);
          std::string g = guard_expr(l.guards) + " && " + guard_expr(r.guards);
          return "(" + g + " && " + scale_up(l.code, s - l.scale) + " " + cmp_op_text(op) + " " +
                 scale_up(r.code, s - r.scale) + ")";
        };
        if (f.kind == FilterPred::Kind::Compare) return one(*f.lo, f.op);
        return "(" + one(*f.lo, CmpOp::Ge) + " && " + one(*f.hi, CmpOp::Le) + ")";
      }
      case FilterPred::Kind::InList: {
        if (path == AccessPath::DictionaryRewrite && f.lhs->kind == Expr::Kind::ColumnRef &&
            col(f.lhs->table_idx, f.lhs->col_idx)->enc == Encoding::Dictionary)
          return dict_in_cond(f);
        std::string cond = "(";
        for (size_t i = 0; i < f.list.size(); ++i) {
          if (i) cond += " || ";
          FilterPred eq;
          eq.kind = FilterPred::Kind::Compare;
          eq.op = CmpOp::Eq;
          cond += filter_cond_eq(*f.lhs, *f.list[i]);
        }
        return cond + ")";
      }
      case FilterPred::Kind::Like:
        return like_cond(f, path);
    }
    throw EmissionError("bad filter");
  }

  std::string filter_cond_eq(const Expr& l, const Expr& r) {
    EmittedExpr le = emit_expr(l);
    EmittedExpr re = emit_expr(r);
    if (le.kind == EmittedExpr::Kind::Str || re.kind == EmittedExpr::Kind::Str) {
      std::string g = guard_expr(le.guards) + " && " + guard_expr(re.guards);
      return "(" + g + " && (" + le.code + ") == (" + re.code + "))";
    }
    uint8_t s = std::max(le.scale, re.scale);
    std::string g = guard_expr(le.guards) + " && " + guard_expr(re.guards);
    return "(" + g + " && " + scale_up(le.code, s - le.scale) + " == " + scale_up(re.code, s - re.scale) + ")";
  }

  // Code-window rewrite for dictionary columns.
  std::string dict_window_cond(const FilterPred& f) {
    int pos = f.lhs->table_idx, c = f.lhs->col_idx;
    const EncodedColumn* ec = col(pos, c);
    DictRef d = dict_ref(pos, c);
    uint8_t cs = ec->logical_type.kind == TypeKind::Decimal ? ec->logical_type.scale : 0;

    auto window = [&](const Expr& bound, CmpOp op) {
      std::string lo = tmp("clo"), hi = tmp("chi");
      if (d.is_str) {
        if (op != CmpOp::Eq) throw IncompatibleStrategy("string range under dictionary rewrite");
        EmittedExpr b = emit_expr(bound);
        std::string eq = tmp("ceq");
        prep_ << "  const long long " << eq << " = bq_dict_find_str(" << d.s_bytes << ", " << d.s_off << ", "
              << d.n << ", " << b.code << ");\n";
        prep_ << "  const long long " << lo << " = " << eq << " < 0 ? 1 : " << eq << ";\n";
        prep_ << "  const long long " << hi << " = " << eq << " < 0 ? 0 : " << eq << " + 1;\n";
      } else {
        std::string imp;
        std::string th = prep_threshold(bound, cs, op, &imp);
        std::string lb = tmp("clb"), eq = tmp("ceq");
        prep_ << "  const long long " << lb << " = bq_dict_lb_i64(" << d.i64 << ", " << d.n << ", " << th
              << ");\n";
        prep_ << "  const long long " << eq << " = (" << lb << " < (long long)" << d.n << " && " << d.i64 << "["
              << lb << "] == " << th << ") ? " << lb << " : -1;\n";
        std::string lo_expr = "0", hi_expr = "(long long)" + d.n;
        switch (op) {
          case CmpOp::Eq:
            lo_expr = eq + " < 0 ? 1 : " + eq;
            hi_expr = eq + " < 0 ? 0 : " + eq + " + 1";
            break;
          case CmpOp::Lt:
            hi_expr = lb;
            break;
          case CmpOp::Le:
            hi_expr = eq + " >= 0 ? " + eq + " + 1 : " + lb;
            break;
          case CmpOp::Gt:
            lo_expr = eq + " >= 0 ? " + eq + " + 1 : " + lb;
            break;
          case CmpOp::Ge:
            lo_expr = lb;
            break;
        }
        prep_ << "  const long long " << lo << " = " << (imp.empty() ? lo_expr : imp + " ? 1 : (" + lo_expr + ")")
              << ";\n";
        prep_ << "  const long long " << hi << " = " << (imp.empty() ? hi_expr : imp + " ? 0 : (" + hi_expr + ")")
              << ";\n";
      }
      return std::pair<std::string, std::string>{lo, hi};
    };

    std::string code = col_codes(pos, c) + "[" + rid(pos) + "]";
    std::string guard = ec->nullable ? valid_var(pos, c) + "[" + rid(pos) + "] && " : "";
    if (f.kind == FilterPred::Kind::Compare) {
      auto [lo, hi] = window(*f.lo, f.op);
      return "(" + guard + "(long long)" + code + " >= " + lo + " && (long long)" + code + " < " + hi + ")";
    }
    auto [lo1, hi1] = window(*f.lo, CmpOp::Ge);
    auto [lo2, hi2] = window(*f.hi, CmpOp::Le);
    return "(" + guard + "(long long)" + code + " >= " + lo1 + " && (long long)" + code + " < " + hi1 +
           " && (long long)" + code + " >= " + lo2 + " && (long long)" + code + " < " + hi2 + ")";
  }

  std::string dict_in_cond(const FilterPred& f) {
    int pos = f.lhs->table_idx, c = f.lhs->col_idx;
    const EncodedColumn* ec = col(pos, c);
    DictRef d = dict_ref(pos, c);
    std::string set = tmp("cset");
    prep_ << "  std::vector<long long> " << set << ";\n";
    for (const auto& item : f.list) {
      EmittedExpr b = emit_expr(*item);
      if (d.is_str) {
        prep_ << "  { long long cc = bq_dict_find_str(" << d.s_bytes << ", " << d.s_off << ", " << d.n << ", "
              << b.code << "); if (cc >= 0) " << set << ".push_back(cc); }\n";
      } else {
        prep_ << "  { long long cc = bq_dict_find_i64(" << d.i64 << ", " << d.n << ", "
              << scale_up(b.code, (ec->logical_type.kind == TypeKind::Decimal ? ec->logical_type.scale : 0) -
                                      b.scale)
              << "); if (cc >= 0) " << set << ".push_back(cc); }\n";
      }
    }
    prep_ << "  std::sort(" << set << ".begin(), " << set << ".end());\n";
    std::string guard = ec->nullable ? valid_var(pos, c) + "[" + rid(pos) + "] && " : "";
    return "(" + guard + "std::binary_search(" + set + ".begin(), " + set + ".end(), (long long)" +
           col_codes(pos, c) + "[" + rid(pos) + "]))";
  }

  std::string like_cond(const FilterPred& f, AccessPath path) {
    int pos = f.lhs->table_idx, c = f.lhs->col_idx;
    const EncodedColumn* ec = col(pos, c);
    std::string needle = tmp("needle");
    if (f.pattern->kind == Expr::Kind::Literal) {
      prep_ << "  const std::string " << needle << " = bq_needle(\"" << escape(f.pattern->lit.s) << "\");\n";
    } else {
      prep_ << "  const std::string " << needle << " = bq_needle(" << str_param(f.pattern->param) << ");\n";
    }
    std::string guard = ec->nullable ? valid_var(pos, c) + "[" + rid(pos) + "] && " : "";

    if (ec->enc == Encoding::Dictionary) {
      DictRef d = dict_ref(pos, c);
      std::string flags = tmp("lflags");
      prep_ << "  std::vector<unsigned char> " << flags << "(" << d.n << ");\n";
      prep_ << "  for (unsigned long long di = 0; di < " << d.n << "; ++di) " << flags
            << "[di] = bq_infix(std::string_view(" << d.s_bytes << " + " << d.s_off << "[di], " << d.s_off
            << "[di + 1] - " << d.s_off << "[di]), " << needle << ");\n";
      return "(" + guard + flags + "[" + col_codes(pos, c) + "[" + rid(pos) + "]])";
    }

    std::string row = col_str(pos, c);
    if (path == AccessPath::CharMaskPrefilter) {
      const auto* alpha = tables_[size_t(pos)]->char_mask(col_name(pos, c), false);
      const auto* bigram = tables_[size_t(pos)]->char_mask(col_name(pos, c), true);
      if (!alpha && !bigram) throw IncompatibleStrategy("char-mask prefilter without masks");
      std::string na = tmp("nm"), nb = tmp("nm");
      prep_ << "  const unsigned long long " << na << " = bq_mask_alpha(" << needle << ");\n";
      prep_ << "  const unsigned long long " << nb << " = bq_mask_bigram(" << needle << ");\n";
      std::string cond = "(" + guard + "true";
      if (alpha)
        cond += " && (" + na + " & ~" +
                slot(tbl_name(pos) + "." + col_name(pos, c) + ".mask_alpha", "u64", "unsigned long long") + "[" +
                rid(pos) + "]) == 0";
      if (bigram)
        cond += " && (" + nb + " & ~" +
                slot(tbl_name(pos) + "." + col_name(pos, c) + ".mask_bigram", "u64", "unsigned long long") + "[" +
                rid(pos) + "]) == 0";
      cond += " && bq_infix(" + row + ", " + needle + "))";
      return cond;
    }
    return "(" + guard + "bq_infix(" + row + ", " + needle + "))";
  }

  // --- aggregation ---

  struct AggDecl {
    const Expr* node;
    EmittedExpr arg;  // unused for COUNT(*)
    bool has_arg = false;
    std::string id;  // a0, a1, ...
  };
  std::vector<AggDecl> aggs_;

  void emit_agg_updates(const std::string& g) {
    for (auto& a : aggs_) {
      const Expr& node = *a.node;
      switch (node.agg) {
        case sql::AggKind::Count:
          if (node.star) {
            line(a.id + "_cnt[" + g + "] += 1;");
          } else {
            line("if (" + guard_expr(a.arg.guards) + ") " + a.id + "_cnt[" + g + "] += 1;");
          }
          break;
        case sql::AggKind::Sum:
        case sql::AggKind::Avg:
          if (a.arg.kind == EmittedExpr::Kind::Dbl) {
            open("if (" + guard_expr(a.arg.guards) + ") {");
            line(a.id + "_fsum[" + g + "] += " + a.arg.code + ";");
            line(a.id + "_cnt[" + g + "] += 1;");
            line(a.id + "_seen[" + g + "] = 1;");
            close();
          } else {
            open("if (" + guard_expr(a.arg.guards) + ") {");
            line(a.id + "_isum[" + g + "] += " + a.arg.code + ";");
            line(a.id + "_cnt[" + g + "] += 1;");
            line(a.id + "_seen[" + g + "] = 1;");
            close();
          }
          break;
        case sql::AggKind::Min:
        case sql::AggKind::Max: {
          std::string cmp = node.agg == sql::AggKind::Max ? ">" : "<";
          open("if (" + guard_expr(a.arg.guards) + ") {");
          if (a.arg.kind == EmittedExpr::Kind::Str) {
            line("std::string_view v = " + a.arg.code + ";");
            line("if (!" + a.id + "_seen[" + g + "] || v " + cmp + " std::string_view(" + a.id + "_mms[" + g +
                 "])) " + a.id + "_mms[" + g + "] = std::string(v);");
          } else if (a.arg.kind == EmittedExpr::Kind::Dbl) {
            line("double v = " + a.arg.code + ";");
            line("if (!" + a.id + "_seen[" + g + "] || v " + cmp + " " + a.id + "_fsum[" + g + "]) " + a.id +
                 "_fsum[" + g + "] = v;");
          } else {
            line("long long v = " + a.arg.code + ";");
            line("if (!" + a.id + "_seen[" + g + "] || v " + cmp + " " + a.id + "_mm[" + g + "]) " + a.id +
                 "_mm[" + g + "] = v;");
          }
          line(a.id + "_seen[" + g + "] = 1;");
          close();
          break;
        }
      }
    }
  }

  // Cell expression for one aggregate's result at group g.
  std::string agg_result_stmt(const AggDecl& a, const std::string& g, const std::string& cell) {
    const Expr& node = *a.node;
    std::ostringstream o;
    switch (node.agg) {
      case sql::AggKind::Count:
        return cell + " = Cell{1, " + a.id + "_cnt[" + g + "], 0, \"\", 0};";
      case sql::AggKind::Sum:
        if (a.arg.kind == EmittedExpr::Kind::Dbl)
          return "if (" + a.id + "_seen[" + g + "]) " + cell + " = Cell{2, 0, " + a.id + "_fsum[" + g +
                 "], \"\", 0};";
        o << "if (" << a.id << "_seen[" << g << "]) { __int128 v = " << a.id << "_isum[" << g << "];"
          << " if (v > (__int128)9223372036854775807LL || v < -(__int128)9223372036854775807LL - 1)"
          << " throw std::runtime_error(\"sum overflow\");"
          << " " << cell << " = Cell{1, (long long)v, 0, \"\", " << int(a.arg.scale) << "}; }";
        return o.str();
      case sql::AggKind::Avg:
        if (a.arg.kind == EmittedExpr::Kind::Dbl)
          return "if (" + a.id + "_seen[" + g + "]) " + cell + " = Cell{2, 0, " + a.id + "_fsum[" + g + "] / double(" +
                 a.id + "_cnt[" + g + "]), \"\", 0};";
        return "if (" + a.id + "_seen[" + g + "]) " + cell + " = Cell{2, 0, (double((long long)" + a.id + "_isum[" +
               g + "]) / " + std::to_string(pow10_i64(a.arg.scale)) + ".0) / double(" + a.id + "_cnt[" + g +
               "]), \"\", 0};";
      case sql::AggKind::Min:
      case sql::AggKind::Max:
        if (a.arg.kind == EmittedExpr::Kind::Str)
          return "if (" + a.id + "_seen[" + g + "]) " + cell + " = Cell{3, 0, 0, " + a.id + "_mms[" + g + "], 0};";
        if (a.arg.kind == EmittedExpr::Kind::Dbl)
          return "if (" + a.id + "_seen[" + g + "]) " + cell + " = Cell{2, 0, " + a.id + "_fsum[" + g +
                 "], \"\", 0};";
        return "if (" + a.id + "_seen[" + g + "]) " + cell + " = Cell{1, " + a.id + "_mm[" + g + "], 0, \"\", " +
               std::to_string(int(a.arg.scale)) + "};";
    }
    return "";
  }

  // Cell statements for a finalized select expression at group g. Key cells
  // are provided by the strategy-specific decode (key_cell callback).
  void emit_final_expr(const Expr& e, const std::string& g, const std::string& cell,
                       const std::function<std::string(size_t)>& key_cell) {
    switch (e.kind) {
      case Expr::Kind::Agg: {
        for (auto& a : aggs_)
          if (a.node == &e) {
            line(agg_result_stmt(a, g, cell));
            return;
          }
        throw EmissionError("unregistered aggregate");
      }
      case Expr::Kind::ColumnRef: {
        for (size_t k = 0; k < ast_.group_by.size(); ++k)
          if (ast_.group_by[k]->table_idx == e.table_idx && ast_.group_by[k]->col_idx == e.col_idx) {
            line(cell + " = " + key_cell(k) + ";");
            return;
          }
        throw EmissionError("select column not in GROUP BY");
      }
      case Expr::Kind::Literal: {
        if (e.lit.tag == Value::Tag::Str)
          line(cell + " = Cell{3, 0, 0, \"" + escape(e.lit.s) + "\", 0};");
        else if (e.lit.is_null())
          line(cell + " = Cell{};");
        else
          line(cell + " = Cell{1, " + std::to_string(e.lit.i) + "LL, 0, \"\", " +
               std::to_string(int(e.lit.tag == Value::Tag::Dec ? e.lit.scale : 0)) + "};");
        return;
      }
      case Expr::Kind::Arith: {
        std::string l = tmp("cl"), r = tmp("cr");
        line("Cell " + l + ", " + r + ";");
        emit_final_expr(*e.args[0], g, l, key_cell);
        emit_final_expr(*e.args[1], g, r, key_cell);
        line(cell + " = bq_cell_arith('" + std::string(1, e.op) + "', " + l + ", " + r + ");");
        return;
      }
      default:
        throw EmissionError("bad select expression");
    }
  }

  friend EmittedKernel do_emit(Emitter& em);
};

EmittedKernel do_emit(Emitter& em);

}  // namespace

EmittedKernel emit_kernel_source(const KernelSpec& spec, const sql::QueryAst& ast,
                                 const planner::BespokeStore& store, const contract::Contract& contract,
                                 bool tracing) {
  Emitter em(spec, ast, store, contract, tracing);
  return do_emit(em);
}

namespace {

std::string runtime_helpers() {
  return R"(namespace {
struct Cell { int tag = 0; long long i = 0; double f = 0; std::string s; unsigned char scale = 0; };
int bq_cell_cmp(const Cell& a, const Cell& b) {
  if (a.tag == 0 || b.tag == 0) return a.tag == b.tag ? 0 : (a.tag == 0 ? -1 : 1);
  if (a.tag == 3 || b.tag == 3) return a.s.compare(b.s) < 0 ? -1 : (a.s == b.s ? 0 : 1);
  if (a.tag == 2 || b.tag == 2) {
    double x = a.tag == 2 ? a.f : double(a.i), y = b.tag == 2 ? b.f : double(b.i);
    return x < y ? -1 : (x > y ? 1 : 0);
  }
  __int128 x = a.i, y = b.i;
  unsigned char s = a.scale > b.scale ? a.scale : b.scale;
  for (unsigned char k = a.scale; k < s; ++k) x *= 10;
  for (unsigned char k = b.scale; k < s; ++k) y *= 10;
  return x < y ? -1 : (x > y ? 1 : 0);
}
long long bq_floor_div(long long a, long long b) {
  long long q = a / b;
  return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}
long long bq_ceil_div(long long a, long long b) {
  long long q = a / b;
  return (a % b != 0 && (a < 0) == (b < 0)) ? q + 1 : q;
}
long long bq_dict_lb_i64(const long long* dict, unsigned long long n, long long v) {
  unsigned long long lo = 0, hi = n;
  while (lo < hi) { unsigned long long mid = (lo + hi) / 2; if (dict[mid] < v) lo = mid + 1; else hi = mid; }
  return (long long)lo;
}
long long bq_dict_find_i64(const long long* dict, unsigned long long n, long long v) {
  long long lb = bq_dict_lb_i64(dict, n, v);
  return (lb < (long long)n && dict[lb] == v) ? lb : -1;
}
long long bq_dict_lb_str(const char* bytes, const unsigned long long* off, unsigned long long n, std::string_view v) {
  unsigned long long lo = 0, hi = n;
  while (lo < hi) {
    unsigned long long mid = (lo + hi) / 2;
    std::string_view e(bytes + off[mid], off[mid + 1] - off[mid]);
    if (e < v) lo = mid + 1; else hi = mid;
  }
  return (long long)lo;
}
long long bq_dict_find_str(const char* bytes, const unsigned long long* off, unsigned long long n, std::string_view v) {
  long long lb = bq_dict_lb_str(bytes, off, n, v);
  if (lb < (long long)n) {
    std::string_view e(bytes + off[lb], off[lb + 1] - off[lb]);
    if (e == v) return lb;
  }
  return -1;
}
bool bq_infix(std::string_view hay, const std::string& needle) {
  return needle.empty() || hay.find(needle) != std::string_view::npos;
}
std::string bq_needle(const std::string& pat) {
  if (pat.size() < 2 || pat.front() != '%' || pat.back() != '%' || pat.find('%', 1) != pat.size() - 1 ||
      pat.find('_') != std::string::npos)
    throw std::runtime_error("LIKE pattern must be %infix%");
  return pat.substr(1, pat.size() - 2);
}
unsigned long long bq_mask_alpha(const std::string& s) {
  unsigned long long m = 0;
  for (char c : s) if (c >= 'a' && c <= 'z') m |= 1ull << (c - 'a');
  return m;
}
unsigned long long bq_mask_bigram(const std::string& s) {
  unsigned long long m = 0;
  for (size_t i = 0; i + 1 < s.size(); ++i)
    m |= 1ull << (((unsigned char)s[i] * 31u + (unsigned char)s[i + 1]) & 63u);
  return m;
}
long long bq_p10(unsigned char e) { long long r = 1; while (e--) r *= 10; return r; }
Cell bq_cell_arith(char op, const Cell& a, const Cell& b) {
  if (a.tag == 0 || b.tag == 0) return Cell{};
  if (op == '/' || a.tag == 2 || b.tag == 2) {
    double x = a.tag == 2 ? a.f : double(a.i) / double(bq_p10(a.scale));
    double y = b.tag == 2 ? b.f : double(b.i) / double(bq_p10(b.scale));
    switch (op) {
      case '+': return Cell{2, 0, x + y, "", 0};
      case '-': return Cell{2, 0, x - y, "", 0};
      case '*': return Cell{2, 0, x * y, "", 0};
      case '/': return y == 0.0 ? Cell{} : Cell{2, 0, x / y, "", 0};
    }
  }
  if (op == '*') return Cell{1, a.i * b.i, 0, "", (unsigned char)(a.scale + b.scale)};
  unsigned char s = a.scale > b.scale ? a.scale : b.scale;
  long long x = a.i * bq_p10((unsigned char)(s - a.scale));
  long long y = b.i * bq_p10((unsigned char)(s - b.scale));
  return Cell{1, op == '+' ? x + y : x - y, 0, "", s};
}
}  // namespace
)";
}

// ---------------------------------------------------------------------------
// Kernel body assembly
// ---------------------------------------------------------------------------

EmittedKernel do_emit(Emitter& em) {
  const KernelSpec& spec = em.spec_;
  const sql::QueryAst& ast = em.ast_;
  size_t n = ast.from.size();

  if (spec.join_order.size() != n) throw IncompatibleStrategy("join order arity mismatch");
  if (spec.join_ops.size() != (n == 0 ? 0 : n - 1)) throw IncompatibleStrategy("join op count mismatch");
  if (spec.semi_ops.size() != ast.semis.size()) throw IncompatibleStrategy("semi op count mismatch");
  if (n > 8) throw EmissionError("more than 8 tables in FROM");

  int driver = spec.join_order.empty() ? 0 : spec.join_order[0];
  const StoreTable* driver_tbl = em.tables_[size_t(driver)];
  const planner::TablePlan* driver_plan = em.store_.plan.find_table(driver_tbl->name);
  std::string driver_sort =
      driver_plan && !driver_plan->sort_order.empty() ? driver_plan->sort_order.front() : "";

  // Row counts per table.
  std::vector<std::string> nrows(n);
  for (size_t t = 0; t < n; ++t) nrows[t] = em.scalar_slot(em.tbl_name(int(t)) + ".rows");

  // -- filters --
  std::vector<std::vector<std::string>> conds(n);
  std::vector<std::string> const_conds;
  struct Bound {
    std::string th;
    CmpOp op;
  };
  std::vector<Bound> sorted_bounds, zone_bounds;
  std::string zone_col;

  for (size_t fi = 0; fi < ast.filters.size(); ++fi) {
    const FilterPred& f = ast.filters[fi];
    AccessPath path = AccessPath::FullScan;
    auto pit = spec.filter_paths.find(int(fi));
    if (pit != spec.filter_paths.end()) path = pit->second;

    if (f.table_idx < 0) {
      const_conds.push_back(em.filter_cond(f, AccessPath::FullScan));
      continue;
    }
    if (path == AccessPath::SortedRangeScan) {
      if (f.table_idx != driver || f.lhs->kind != Expr::Kind::ColumnRef || f.lhs->column != driver_sort)
        throw IncompatibleStrategy("sorted range scan requires the driver's sort column");
      const EncodedColumn* c = em.col(driver, f.lhs->col_idx);
      if (c->enc == Encoding::StringArena || c->enc == Encoding::Dictionary)
        throw IncompatibleStrategy("sorted range scan on non-integer storage");
      uint8_t cs = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
      if (f.kind == FilterPred::Kind::Compare) {
        sorted_bounds.push_back({em.prep_threshold(*f.lo, cs, f.op, nullptr), f.op});
      } else if (f.kind == FilterPred::Kind::Between) {
        sorted_bounds.push_back({em.prep_threshold(*f.lo, cs, CmpOp::Ge, nullptr), CmpOp::Ge});
        sorted_bounds.push_back({em.prep_threshold(*f.hi, cs, CmpOp::Le, nullptr), CmpOp::Le});
      } else {
        throw IncompatibleStrategy("sorted range scan needs a range predicate");
      }
      continue;
    }
    if (path == AccessPath::ZoneSkipScan) {
      if (f.table_idx != driver || f.lhs->kind != Expr::Kind::ColumnRef)
        throw IncompatibleStrategy("zone-skip scan on a non-driver table");
      if (!driver_tbl->zone_map(f.lhs->column)) throw IncompatibleStrategy("no zone map on " + f.lhs->column);
      if (!zone_col.empty() && zone_col != f.lhs->column)
        throw IncompatibleStrategy("zone-skip scan supports one column per kernel");
      zone_col = f.lhs->column;
      const EncodedColumn* c = em.col(driver, f.lhs->col_idx);
      uint8_t cs = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
      if (f.kind == FilterPred::Kind::Compare) {
        zone_bounds.push_back({em.prep_threshold(*f.lo, cs, f.op, nullptr), f.op});
      } else if (f.kind == FilterPred::Kind::Between) {
        zone_bounds.push_back({em.prep_threshold(*f.lo, cs, CmpOp::Ge, nullptr), CmpOp::Ge});
        zone_bounds.push_back({em.prep_threshold(*f.hi, cs, CmpOp::Le, nullptr), CmpOp::Le});
      } else {
        throw IncompatibleStrategy("zone-skip scan needs a range predicate");
      }
      conds[size_t(f.table_idx)].push_back(em.filter_cond(f, AccessPath::FullScan));
      continue;
    }
    conds[size_t(f.table_idx)].push_back(em.filter_cond(f, path));
  }

  // -- semi-joins: emit build lambdas; probes appended as conditions --
  std::vector<std::string> semi_builds;
  for (size_t si = 0; si < ast.semis.size(); ++si) {
    const sql::SemiJoin& sj = ast.semis[si];
    JoinOp op = spec.semi_ops[si];
    if (op != JoinOp::BitmapSemiJoin && op != JoinOp::TagArrayJoin && op != JoinOp::HashJoin)
      throw IncompatibleStrategy("semi-join operator must be bitmap, tag-array or hash");

    std::vector<const Expr*> cols;
    sj.outer_key->collect_columns(cols);
    if (cols.empty()) throw EmissionError("uncorrelated semi-join");
    int anchor = cols[0]->table_idx;

    auto it = em.store_.tables.find(sj.inner_table);
    if (it == em.store_.tables.end()) throw EmissionError("unknown semi table " + sj.inner_table);
    const StoreTable* inner = &it->second;

    // Compile the inner side with the anchor slot remapped onto the inner
    // table (the build loop drives rid[anchor] over inner rows).
    const StoreTable* saved = em.tables_[size_t(anchor)];
    em.tables_[size_t(anchor)] = inner;
    std::vector<std::string> inner_conds;
    for (const auto& f : sj.inner_filters) {
      FilterPred fc = f.clone();
      struct R {
        static void walk(Expr& e, int to) {
          if (e.kind == Expr::Kind::ColumnRef) e.table_idx = to;
          for (auto& a : e.args) R::walk(*a, to);
        }
      };
      if (fc.lhs) R::walk(*fc.lhs, anchor);
      if (fc.lo) R::walk(*fc.lo, anchor);
      if (fc.hi) R::walk(*fc.hi, anchor);
      if (fc.pattern) R::walk(*fc.pattern, anchor);
      for (auto& i2 : fc.list) R::walk(*i2, anchor);
      inner_conds.push_back(em.filter_cond(fc, AccessPath::FullScan));
    }
    Expr keyref;
    keyref.kind = Expr::Kind::ColumnRef;
    keyref.table_idx = anchor;
    keyref.col_idx = sj.inner_key_col;
    keyref.column = inner->schema[size_t(sj.inner_key_col)].name;
    keyref.type = inner->schema[size_t(sj.inner_key_col)].type;
    Emitter::EmittedExpr inner_key = em.emit_expr(keyref);
    std::string inner_rows = em.scalar_slot(sj.inner_table + ".rows");
    em.tables_[size_t(anchor)] = saved;

    Emitter::EmittedExpr outer = em.emit_expr(*sj.outer_key);
    if (outer.kind != Emitter::EmittedExpr::Kind::I64 || inner_key.kind != Emitter::EmittedExpr::Kind::I64)
      throw IncompatibleStrategy("semi-join requires an integer key");

    std::string id = "sm" + std::to_string(si);
    int c_it = em.counter("semi:" + sj.inner_table + ".iterations");
    int c_out = em.counter("semi:" + sj.inner_table + ".rows");
    std::ostringstream bld;
    std::string r = em.rid(anchor);
    std::string all_conds = "true";
    for (const auto& cn : inner_conds) all_conds += " && " + cn;
    std::string kg = Emitter::guard_expr(inner_key.guards);

    if (op == JoinOp::BitmapSemiJoin) {
      bld << "  long long " << id << "_min = 0, " << id << "_max = -1;\n";
      bld << "  for (unsigned long long " << r << " = 0; " << r << " < " << inner_rows << "; ++" << r << ") {\n";
      bld << "    if (!(" << kg << ")) continue;\n";
      bld << "    long long k = " << inner_key.code << ";\n";
      bld << "    if (" << id << "_max < " << id << "_min) { " << id << "_min = k; " << id << "_max = k; }\n";
      bld << "    if (k < " << id << "_min) " << id << "_min = k;\n";
      bld << "    if (k > " << id << "_max) " << id << "_max = k;\n  }\n";
      bld << "  if (" << id << "_max - " << id << "_min >= (1LL << 20)) throw std::runtime_error(\"bitmap range\");\n";
      bld << "  std::vector<unsigned long long> " << id << "_bits((unsigned long long)(" << id << "_max - " << id
          << "_min + 65) / 64, 0);\n";
      bld << "  for (unsigned long long " << r << " = 0; " << r << " < " << inner_rows << "; ++" << r << ") {\n";
      if (c_it >= 0) bld << "    BQ_TRACE(trace_buf[" << c_it << "] += 1;)\n";
      bld << "    if (!(" << all_conds << ")) continue;\n";
      bld << "    if (!(" << kg << ")) continue;\n";
      bld << "    unsigned long long off = (unsigned long long)(" << inner_key.code << " - " << id << "_min);\n";
      if (c_out >= 0) bld << "    BQ_TRACE(trace_buf[" << c_out << "] += 1;)\n";
      bld << "    " << id << "_bits[off >> 6] |= 1ull << (off & 63);\n  }\n";
      bld << "  auto " << id << " = [&](long long k) -> bool {\n";
      bld << "    if (k < " << id << "_min || k > " << id << "_max) return false;\n";
      bld << "    unsigned long long off = (unsigned long long)(k - " << id << "_min);\n";
      bld << "    return (" << id << "_bits[off >> 6] >> (off & 63)) & 1; };\n";
    } else if (op == JoinOp::TagArrayJoin) {
      bld << "  unsigned long long " << id << "_buckets = 16;\n";
      bld << "  while (" << id << "_buckets < " << inner_rows << " * 2 + 16) " << id << "_buckets <<= 1;\n";
      bld << "  std::vector<unsigned char> " << id << "_tag(" << id << "_buckets, 0);\n";
      bld << "  std::vector<long long> " << id << "_key(" << id << "_buckets, 0);\n";
      bld << "  unsigned long long " << id << "_mask = " << id << "_buckets - 1;\n";
      bld << "  for (unsigned long long " << r << " = 0; " << r << " < " << inner_rows << "; ++" << r << ") {\n";
      if (c_it >= 0) bld << "    BQ_TRACE(trace_buf[" << c_it << "] += 1;)\n";
      bld << "    if (!(" << all_conds << ")) continue;\n";
      bld << "    if (!(" << kg << ")) continue;\n";
      bld << "    long long k = " << inner_key.code << ";\n";
      bld << "    unsigned long long b = ((unsigned long long)k * 0x9e3779b97f4a7c15ull) & " << id << "_mask;\n";
      bld << "    while (" << id << "_tag[b] && " << id << "_key[b] != k) b = (b + 1) & " << id << "_mask;\n";
      if (c_out >= 0) bld << "    BQ_TRACE(trace_buf[" << c_out << "] += 1;)\n";
      bld << "    " << id << "_tag[b] = 1; " << id << "_key[b] = k;\n  }\n";
      bld << "  auto " << id << " = [&](long long k) -> bool {\n";
      bld << "    unsigned long long b = ((unsigned long long)k * 0x9e3779b97f4a7c15ull) & " << id << "_mask;\n";
      bld << "    while (" << id << "_tag[b]) { if (" << id << "_key[b] == k) return true; b = (b + 1) & " << id
          << "_mask; }\n";
      bld << "    return false; };\n";
    } else {
      bld << "  std::unordered_set<long long> " << id << "_set;\n";
      bld << "  for (unsigned long long " << r << " = 0; " << r << " < " << inner_rows << "; ++" << r << ") {\n";
      if (c_it >= 0) bld << "    BQ_TRACE(trace_buf[" << c_it << "] += 1;)\n";
      bld << "    if (!(" << all_conds << ")) continue;\n";
      bld << "    if (!(" << kg << ")) continue;\n";
      if (c_out >= 0) bld << "    BQ_TRACE(trace_buf[" << c_out << "] += 1;)\n";
      bld << "    " << id << "_set.insert(" << inner_key.code << ");\n  }\n";
      bld << "  auto " << id << " = [&](long long k) -> bool { return " << id << "_set.count(k) > 0; };\n";
    }
    semi_builds.push_back(bld.str());
    conds[size_t(anchor)].push_back("(" + Emitter::guard_expr(outer.guards) + " && " + id + "(" + outer.code +
                                    "))");
  }

  // -- aggregation nodes --
  bool has_agg = ast.has_aggregates();
  bool projection = !has_agg && ast.group_by.empty();
  for (const auto& item : ast.select) {
    std::function<void(const Expr&)> walk = [&](const Expr& e) {
      if (e.kind == Expr::Kind::Agg) {
        Emitter::AggDecl d;
        d.node = &e;
        d.id = "a" + std::to_string(em.aggs_.size());
        if (!e.star) {
          d.arg = em.emit_expr(*e.args[0]);
          d.has_arg = true;
        }
        em.aggs_.push_back(std::move(d));
        return;
      }
      for (const auto& a : e.args) walk(*a);
    };
    if (!projection) walk(*item.expr);
  }

  // -- group keys --
  struct KeyInfo {
    Emitter::EmittedExpr val;     // i64 or str
    std::string codes;            // dict codes var (dense path)
    bool dict = false;
    size_t range = 0;
    int64_t min = 0;
    size_t stride = 1;
    ColumnType type;
    int pos = -1;
    int col = -1;
  };
  std::vector<KeyInfo> keys;
  for (const auto& g : ast.group_by) {
    KeyInfo ki;
    ki.pos = g->table_idx;
    ki.col = g->col_idx;
    ki.type = g->type;
    ki.val = em.emit_expr(*g);
    const EncodedColumn* c = em.col(g->table_idx, g->col_idx);
    if (c->enc == Encoding::Dictionary && !c->nullable) {
      ki.dict = true;
      ki.codes = em.col_codes(g->table_idx, g->col_idx);
      ki.range = c->dict_size();
    } else if (ki.val.kind == Emitter::EmittedExpr::Kind::I64 && !c->nullable) {
      int64_t mn = 0, mx = 0;
      bool any = false;
      for (size_t r = 0; r < c->size(); ++r) {
        if (!c->is_valid(r)) continue;
        int64_t v = c->value_i64(r);
        if (!any || v < mn) mn = v;
        if (!any || v > mx) mx = v;
        any = true;
      }
      ki.min = any ? mn : 0;
      ki.range = any ? size_t(mx - mn) + 1 : 1;
    }
    keys.push_back(std::move(ki));
  }

  // -- join steps: generate loop-opening fragments --
  struct StepGen {
    int pos;
    std::vector<std::string> open_lines;  // emitted via raw text with {} balance handled manually
    int braces = 0;
    std::vector<std::string> post_conds;
    int c_it = -1, c_out = -1;
  };
  std::vector<StepGen> stepgens;
  std::vector<std::string> hash_builds;
  std::vector<bool> edge_used(ast.joins.size(), false);
  std::ostringstream sm_decls;  // sort-merge cursors

  for (size_t step = 1; step < spec.join_order.size(); ++step) {
    int pos = spec.join_order[step];
    const StoreTable* tbl = em.tables_[size_t(pos)];
    const planner::TablePlan* tplan = em.store_.plan.find_table(tbl->name);
    StepGen sg;
    sg.pos = pos;
    sg.c_it = em.counter("join:" + tbl->name + ".iterations");
    sg.c_out = em.counter("join:" + tbl->name + ".rows");

    struct Pair {
      int outer_pos, outer_col, inner_col;
    };
    std::vector<Pair> pairs;
    auto in_prefix = [&](int p) {
      for (size_t k2 = 0; k2 < step; ++k2)
        if (spec.join_order[k2] == p) return true;
      return false;
    };
    for (size_t e = 0; e < ast.joins.size(); ++e) {
      if (edge_used[e]) continue;
      const auto& j = ast.joins[e];
      if (j.left_table == pos && in_prefix(j.right_table)) {
        pairs.push_back({j.right_table, j.right_col, j.left_col});
        edge_used[e] = true;
      } else if (j.right_table == pos && in_prefix(j.left_table)) {
        pairs.push_back({j.left_table, j.left_col, j.right_col});
        edge_used[e] = true;
      }
    }

    auto outer_expr = [&](const Pair& p) {
      Expr e;
      e.kind = Expr::Kind::ColumnRef;
      e.table_idx = p.outer_pos;
      e.col_idx = p.outer_col;
      e.column = em.col_name(p.outer_pos, p.outer_col);
      e.type = em.tables_[size_t(p.outer_pos)]->schema[size_t(p.outer_col)].type;
      return em.emit_expr(e);
    };
    auto inner_expr = [&](const Pair& p) {
      Expr e;
      e.kind = Expr::Kind::ColumnRef;
      e.table_idx = pos;
      e.col_idx = p.inner_col;
      e.column = em.col_name(pos, p.inner_col);
      e.type = tbl->schema[size_t(p.inner_col)].type;
      return em.emit_expr(e);
    };
    auto residual = [&](const Pair& p) {
      auto o = outer_expr(p);
      auto i2 = inner_expr(p);
      return "(" + Emitter::guard_expr(o.guards) + " && " + Emitter::guard_expr(i2.guards) + " && " + o.code +
             " == " + i2.code + ")";
    };

    JoinOp op = spec.join_ops[step - 1];
    std::string r = em.rid(pos);
    switch (op) {
      case JoinOp::HashJoin: {
        std::string id = "hj" + std::to_string(step);
        size_t nk = pairs.size();
        std::ostringstream bld;
        bld << "  unsigned long long " << id << "_buckets = 16;\n";
        bld << "  while (" << id << "_buckets < " << nrows[size_t(pos)] << " * 2 + 16) " << id
            << "_buckets <<= 1;\n";
        bld << "  std::vector<int> " << id << "_head(" << id << "_buckets, -1);\n";
        bld << "  std::vector<int> " << id << "_next;\n";
        bld << "  std::vector<long long> " << id << "_keys;\n";
        bld << "  std::vector<unsigned> " << id << "_row;\n";
        bld << "  const unsigned long long " << id << "_mask = " << id << "_buckets - 1;\n";
        bld << "  for (unsigned long long " << r << " = 0; " << r << " < " << nrows[size_t(pos)] << "; ++" << r
            << ") {\n";
        std::string cc = "true";
        for (const auto& cn : conds[size_t(pos)]) cc += " && " + cn;
        bld << "    if (!(" << cc << ")) continue;\n";
        std::vector<Emitter::EmittedExpr> ikeys;
        for (const auto& p : pairs) ikeys.push_back(inner_expr(p));
        for (const auto& ik : ikeys) bld << "    if (!(" << Emitter::guard_expr(ik.guards) << ")) goto " << id
                                         << "_skip;\n";
        bld << "    {\n      unsigned long long h = 0xcbf29ce484222325ull;\n";
        for (size_t ki2 = 0; ki2 < nk; ++ki2)
          bld << "      h = (h ^ (unsigned long long)(" << ikeys[ki2].code << ")) * 0x100000001b3ull;\n";
        bld << "      unsigned long long b = h & " << id << "_mask;\n";
        bld << "      int e = (int)" << id << "_row.size();\n";
        for (size_t ki2 = 0; ki2 < nk; ++ki2) bld << "      " << id << "_keys.push_back(" << ikeys[ki2].code << ");\n";
        bld << "      " << id << "_row.push_back((unsigned)" << r << ");\n";
        bld << "      " << id << "_next.push_back(" << id << "_head[b]);\n";
        bld << "      " << id << "_head[b] = e;\n    }\n";
        bld << "    " << id << "_skip:;\n  }\n";
        hash_builds.push_back(bld.str());
        conds[size_t(pos)].clear();  // consumed by the build

        std::ostringstream ol;
        std::string probes;
        std::vector<Emitter::EmittedExpr> okeys;
        for (const auto& p : pairs) okeys.push_back(outer_expr(p));
        std::string og = "true";
        for (const auto& ok : okeys) og += " && " + Emitter::guard_expr(ok.guards);
        ol << "if (" << og << ") {";
        sg.open_lines.push_back(ol.str());
        std::string hline = "unsigned long long h = 0xcbf29ce484222325ull;";
        for (size_t ki2 = 0; ki2 < nk; ++ki2)
          hline += " h = (h ^ (unsigned long long)(" + okeys[ki2].code + ")) * 0x100000001b3ull;";
        sg.open_lines.push_back(hline);
        sg.open_lines.push_back("for (int e" + std::to_string(step) + " = " + id + "_head[h & " + id +
                                "_mask]; e" + std::to_string(step) + " >= 0; e" + std::to_string(step) + " = " +
                                id + "_next[e" + std::to_string(step) + "]) {");
        sg.braces = 2;
        std::string match = "true";
        for (size_t ki2 = 0; ki2 < nk; ++ki2)
          match += " && " + id + "_keys[(unsigned long long)e" + std::to_string(step) + " * " +
                   std::to_string(nk) + " + " + std::to_string(ki2) + "] == (long long)(" + okeys[ki2].code + ")";
        sg.open_lines.push_back("if (!(" + match + ")) continue;");
        sg.open_lines.push_back("const unsigned long long " + r + " = " + id + "_row[e" + std::to_string(step) +
                                "];");
        break;
      }
      case JoinOp::IndexNestedLoop: {
        if (pairs.empty()) throw IncompatibleStrategy("index nested loop without a join key");
        bool wired = false;
        // Directory first.
        for (const auto& p : pairs) {
          const auto* dir = tbl->directory_from(em.tables_[size_t(p.outer_pos)]->name);
          const contract::TableSchema* outer_schema =
              em.contract_.find_table(em.tables_[size_t(p.outer_pos)]->name);
          if (dir && outer_schema && outer_schema->column_index(outer_schema->primary_key) == p.outer_col &&
              tbl->schema[size_t(p.inner_col)].name == dir->key_column) {
            std::string base = tbl->name + "." + em.tables_[size_t(p.outer_pos)]->name;
            std::string ds = em.slot(base + ".dir_start", "u32", "unsigned");
            std::string de = em.slot(base + ".dir_end", "u32", "unsigned");
            sg.open_lines.push_back("for (unsigned long long " + r + " = " + ds + "[" + em.rid(p.outer_pos) +
                                    "]; " + r + " < " + de + "[" + em.rid(p.outer_pos) + "]; ++" + r + ") {");
            sg.braces = 1;
            for (const auto& p2 : pairs)
              if (&p2 != &p) sg.post_conds.push_back(residual(p2));
            wired = true;
            break;
          }
        }
        if (!wired) {
          for (const auto& p : pairs) {
            const auto* idx = tbl->hash_index(tbl->schema[size_t(p.inner_col)].name);
            if (!idx) continue;
            std::string base = tbl->name + "." + tbl->schema[size_t(p.inner_col)].name;
            std::string vkeys = em.slot(base + ".idx_keys", "i64", "long long");
            std::string vhead = em.slot(base + ".idx_head", "i32", "int");
            std::string vnext = em.slot(base + ".idx_next", "i32", "int");
            std::string vmask = em.scalar_slot(base + ".idx_mask");
            auto o = outer_expr(p);
            sg.open_lines.push_back("if (" + Emitter::guard_expr(o.guards) + ") {");
            sg.open_lines.push_back("const long long k" + std::to_string(step) + " = " + o.code + ";");
            sg.open_lines.push_back("unsigned long long b" + std::to_string(step) +
                                    " = ((unsigned long long)k" + std::to_string(step) +
                                    " * 0x9e3779b97f4a7c15ull) & " + vmask + ";");
            sg.open_lines.push_back("while (" + vhead + "[b" + std::to_string(step) + "] >= 0 && " + vkeys + "[b" +
                                    std::to_string(step) + "] != k" + std::to_string(step) + ") b" +
                                    std::to_string(step) + " = (b" + std::to_string(step) + " + 1) & " + vmask +
                                    ";");
            sg.open_lines.push_back("for (int e" + std::to_string(step) + " = " + vhead + "[b" +
                                    std::to_string(step) + "]; e" + std::to_string(step) + " >= 0; e" +
                                    std::to_string(step) + " = " + vnext + "[e" + std::to_string(step) + "]) {");
            sg.open_lines.push_back("const unsigned long long " + r + " = (unsigned long long)e" +
                                    std::to_string(step) + ";");
            sg.braces = 2;
            for (const auto& p2 : pairs)
              if (&p2 != &p) sg.post_conds.push_back(residual(p2));
            wired = true;
            break;
          }
        }
        if (!wired) {
          for (const auto& p : pairs) {
            if (!(tplan && tplan->sorted_by(tbl->schema[size_t(p.inner_col)].name))) continue;
            auto o = outer_expr(p);
            auto ie = inner_expr(p);
            // Binary search over the sorted child column.
            std::string lo = "lo" + std::to_string(step), hi = "hi" + std::to_string(step);
            std::string probe = ie.code;
            // Rebuild the probe expression with a generic row variable.
            sg.open_lines.push_back("if (" + Emitter::guard_expr(o.guards) + ") {");
            sg.open_lines.push_back("const long long k" + std::to_string(step) + " = " + o.code + ";");
            std::string vcol;
            {
              // The value of the sorted child column at row `mid`.
              const EncodedColumn* c = em.col(pos, p.inner_col);
              std::string base = tbl->name + "." + tbl->schema[size_t(p.inner_col)].name;
              switch (c->enc) {
                case Encoding::Plain:
                case Encoding::ScaledInteger:
                  vcol = em.slot(base + ".i64", "i64", "long long") + "[mid]";
                  break;
                case Encoding::CompactDate:
                  vcol = "(" + em.scalar_slot(base + ".epoch") + " + (long long)" +
                         em.slot(base + ".u16", "u16", "unsigned short") + "[mid])";
                  break;
                default:
                  throw IncompatibleStrategy("sorted lookup over non-integer storage");
              }
            }
            sg.open_lines.push_back("unsigned long long " + lo + " = 0, " + hi + " = " + nrows[size_t(pos)] + ";");
            sg.open_lines.push_back("while (" + lo + " < " + hi + ") { unsigned long long mid = (" + lo + " + " +
                                    hi + ") / 2; if (" + vcol + " < k" + std::to_string(step) + ") " + lo +
                                    " = mid + 1; else " + hi + " = mid; }");
            std::string vcol_r = vcol;
            size_t mp;
            while ((mp = vcol_r.find("[mid]")) != std::string::npos) vcol_r.replace(mp, 5, "[" + r + "]");
            sg.open_lines.push_back("for (unsigned long long " + r + " = " + lo + "; " + r + " < " +
                                    nrows[size_t(pos)] + " && " + vcol_r + " == k" + std::to_string(step) +
                                    "; ++" + r + ") {");
            sg.braces = 2;
            for (const auto& p2 : pairs)
              if (&p2 != &p) sg.post_conds.push_back(residual(p2));
            wired = true;
            break;
          }
        }
        if (!wired) throw IncompatibleStrategy("no access structure for index nested loop on " + tbl->name);
        break;
      }
      case JoinOp::SortMerge: {
        const Pair* match = nullptr;
        for (const auto& p : pairs) {
          if (p.outer_pos != driver) continue;
          if (em.col_name(driver, p.outer_col) != driver_sort) continue;
          if (tplan && tplan->sorted_by(tbl->schema[size_t(p.inner_col)].name)) {
            match = &p;
            break;
          }
        }
        if (!match) throw IncompatibleStrategy("sort-merge requires both sides sorted on the join key");
        std::string id = "smj" + std::to_string(step);
        sm_decls << "  unsigned long long " << id << "_cur = 0;\n";
        sm_decls << "  long long " << id << "_key = 0; bool " << id << "_valid = false;\n";
        sm_decls << "  unsigned long long " << id << "_b = 0, " << id << "_e = 0;\n";
        auto o = outer_expr(*match);
        const EncodedColumn* c = em.col(pos, match->inner_col);
        std::string base = tbl->name + "." + tbl->schema[size_t(match->inner_col)].name;
        std::string vc;
        switch (c->enc) {
          case Encoding::Plain:
          case Encoding::ScaledInteger:
            vc = em.slot(base + ".i64", "i64", "long long") + "[" + id + "_cur]";
            break;
          case Encoding::CompactDate:
            vc = "(" + em.scalar_slot(base + ".epoch") + " + (long long)" +
                 em.slot(base + ".u16", "u16", "unsigned short") + "[" + id + "_cur])";
            break;
          default:
            throw IncompatibleStrategy("sort-merge over non-integer storage");
        }
        sg.open_lines.push_back("if (" + Emitter::guard_expr(o.guards) + ") {");
        sg.open_lines.push_back("const long long k" + std::to_string(step) + " = " + o.code + ";");
        sg.open_lines.push_back("if (!" + id + "_valid || k" + std::to_string(step) + " > " + id + "_key) {");
        sg.open_lines.push_back("  while (" + id + "_cur < " + nrows[size_t(pos)] + " && " + vc + " < k" +
                                std::to_string(step) + ") ++" + id + "_cur;");
        sg.open_lines.push_back("  " + id + "_b = " + id + "_cur;");
        sg.open_lines.push_back("  while (" + id + "_cur < " + nrows[size_t(pos)] + " && " + vc + " == k" +
                                std::to_string(step) + ") ++" + id + "_cur;");
        sg.open_lines.push_back("  " + id + "_e = " + id + "_cur; " + id + "_key = k" + std::to_string(step) +
                                "; " + id + "_valid = true;");
        sg.open_lines.push_back("}");
        sg.open_lines.push_back("for (unsigned long long " + r + " = " + id + "_b; " + r + " < " + id + "_e; ++" +
                                r + ") {");
        sg.braces = 2;
        for (const auto& p2 : pairs)
          if (&p2 != match) sg.post_conds.push_back(residual(p2));
        break;
      }
      case JoinOp::BitmapSemiJoin:
      case JoinOp::TagArrayJoin:
        throw IncompatibleStrategy("existence-only operator used for a plain join");
    }

    if (op != JoinOp::HashJoin) {
      for (const auto& cn : conds[size_t(pos)]) sg.post_conds.push_back(cn);
      conds[size_t(pos)].clear();
    }
    stepgens.push_back(std::move(sg));
  }

  // -- sorted-range / zone-skip driver preludes --
  std::ostringstream driver_pre;
  std::string scan_begin = "0", scan_end = nrows[size_t(driver)];
  int sort_col_idx = driver_sort.empty() ? -1 : driver_tbl->column_index(driver_sort);
  if (!sorted_bounds.empty()) {
    driver_pre << "  long long bq_lo = -9223372036854775807LL - 1, bq_hi = 9223372036854775807LL;\n";
    for (const auto& bo : sorted_bounds) {
      switch (bo.op) {
        case CmpOp::Eq:
          driver_pre << "  if (" << bo.th << " > bq_lo) bq_lo = " << bo.th << ";\n";
          driver_pre << "  if (" << bo.th << " < bq_hi) bq_hi = " << bo.th << ";\n";
          break;
        case CmpOp::Ge:
          driver_pre << "  if (" << bo.th << " > bq_lo) bq_lo = " << bo.th << ";\n";
          break;
        case CmpOp::Gt:
          driver_pre << "  if (" << bo.th << " + 1 > bq_lo) bq_lo = " << bo.th << " + 1;\n";
          break;
        case CmpOp::Le:
          driver_pre << "  if (" << bo.th << " < bq_hi) bq_hi = " << bo.th << ";\n";
          break;
        case CmpOp::Lt:
          driver_pre << "  if (" << bo.th << " - 1 < bq_hi) bq_hi = " << bo.th << " - 1;\n";
          break;
      }
    }
    const EncodedColumn* c = em.col(driver, sort_col_idx);
    std::string vcol;
    std::string base = driver_tbl->name + "." + driver_sort;
    switch (c->enc) {
      case Encoding::Plain:
      case Encoding::ScaledInteger:
        vcol = em.slot(base + ".i64", "i64", "long long") + "[mid]";
        break;
      case Encoding::CompactDate:
        vcol = "(" + em.scalar_slot(base + ".epoch") + " + (long long)" +
               em.slot(base + ".u16", "u16", "unsigned short") + "[mid])";
        break;
      default:
        throw IncompatibleStrategy("sorted range scan on non-integer storage");
    }
    std::string fv = "0";
    if (c->nullable) {
      std::string vv = em.valid_var(driver, sort_col_idx);
      driver_pre << "  unsigned long long bq_first = 0;\n";
      driver_pre << "  while (bq_first < " << nrows[size_t(driver)] << " && !" << vv << "[bq_first]) ++bq_first;\n";
      fv = "bq_first";
    }
    driver_pre << "  unsigned long long bq_a = " << fv << ", bq_b = " << nrows[size_t(driver)] << ";\n";
    driver_pre << "  while (bq_a < bq_b) { unsigned long long mid = (bq_a + bq_b) / 2; if (" << vcol
               << " < bq_lo) bq_a = mid + 1; else bq_b = mid; }\n";
    driver_pre << "  unsigned long long bq_begin = bq_a; bq_b = " << nrows[size_t(driver)] << ";\n";
    driver_pre << "  while (bq_a < bq_b) { unsigned long long mid = (bq_a + bq_b) / 2; if (" << vcol
               << " <= bq_hi) bq_a = mid + 1; else bq_b = mid; }\n";
    driver_pre << "  if (bq_lo > bq_hi) { bq_begin = 0; bq_a = 0; }\n";
    scan_begin = "bq_begin";
    scan_end = "bq_a";
  }
  // A bounded sorted scan supersedes zone pruning.
  bool use_zone = !zone_bounds.empty() && sorted_bounds.empty();
  if (use_zone) {
    driver_pre << "  long long bq_zlo = -9223372036854775807LL - 1, bq_zhi = 9223372036854775807LL;\n";
    for (const auto& bo : zone_bounds) {
      switch (bo.op) {
        case CmpOp::Eq:
          driver_pre << "  if (" << bo.th << " > bq_zlo) bq_zlo = " << bo.th << ";\n";
          driver_pre << "  if (" << bo.th << " < bq_zhi) bq_zhi = " << bo.th << ";\n";
          break;
        case CmpOp::Ge:
          driver_pre << "  if (" << bo.th << " > bq_zlo) bq_zlo = " << bo.th << ";\n";
          break;
        case CmpOp::Gt:
          driver_pre << "  if (" << bo.th << " + 1 > bq_zlo) bq_zlo = " << bo.th << " + 1;\n";
          break;
        case CmpOp::Le:
          driver_pre << "  if (" << bo.th << " < bq_zhi) bq_zhi = " << bo.th << ";\n";
          break;
        case CmpOp::Lt:
          driver_pre << "  if (" << bo.th << " - 1 < bq_zhi) bq_zhi = " << bo.th << " - 1;\n";
          break;
      }
    }
  }

  // --- assemble the function body ---
  int c_scan_it = em.counter("scan:" + driver_tbl->name + ".iterations");
  int c_scan_out = em.counter("scan:" + driver_tbl->name + ".rows");

  // group/aggregate state declarations
  std::string gid_decl, cap_expr;
  bool dense = false, direct = false, hash_group = false, scalar = false, two_phase = false;
  if (!projection) {
    switch (spec.agg) {
      case AggStrategy::Scalar:
        if (!ast.group_by.empty()) throw IncompatibleStrategy("scalar aggregation with GROUP BY");
        scalar = true;
        cap_expr = "1";
        break;
      case AggStrategy::DenseKeyArray: {
        dense = true;
        size_t cap = 1;
        for (auto& ki : keys) {
          if (ki.range == 0) throw IncompatibleStrategy("dense-key aggregation needs bounded keys");
          cap *= ki.range;
          if (cap > (1ull << 20)) throw IncompatibleStrategy("dense-key capacity exceeds 2^20");
        }
        size_t stride = 1;
        for (size_t i = keys.size(); i-- > 0;) {
          keys[i].stride = stride;
          stride *= keys[i].range;
        }
        cap_expr = std::to_string(cap);
        break;
      }
      case AggStrategy::DirectArray: {
        direct = true;
        if (keys.size() != 1) throw IncompatibleStrategy("direct-array aggregation needs a single key");
        const auto& g = ast.group_by[0];
        const contract::TableSchema* ts = em.contract_.find_table(ast.from[size_t(g->table_idx)].table);
        if (!ts || ts->primary_key.empty() || ts->column_index(ts->primary_key) != g->col_idx)
          throw IncompatibleStrategy("direct-array aggregation requires grouping by a primary key");
        cap_expr = nrows[size_t(g->table_idx)];
        break;
      }
      case AggStrategy::HashGroup:
        hash_group = true;
        cap_expr = "0";
        break;
      case AggStrategy::TwoPhase:
        if (spec.fused) throw IncompatibleStrategy("two-phase aggregation cannot be fused");
        if (keys.empty() || keys.size() > 2) throw IncompatibleStrategy("two-phase aggregation supports 1-2 keys");
        two_phase = true;
        cap_expr = "0";
        break;
    }
  }
  (void)gid_decl;

  bool fused = spec.fused && !projection;
  bool materialize = !projection && !fused;

  // Aggregation state declarations (emitted before the body).
  std::ostringstream decl;
  auto declare_aggs = [&](const std::string& cap) {
    for (auto& a : em.aggs_) {
      decl << "  std::vector<__int128> " << a.id << "_isum(" << cap << ");\n";
      decl << "  std::vector<double> " << a.id << "_fsum(" << cap << ");\n";
      decl << "  std::vector<long long> " << a.id << "_cnt(" << cap << ");\n";
      decl << "  std::vector<long long> " << a.id << "_mm(" << cap << ");\n";
      decl << "  std::vector<std::string> " << a.id << "_mms(" << cap << ");\n";
      decl << "  std::vector<unsigned char> " << a.id << "_seen(" << cap << ");\n";
    }
  };
  if (!projection) {
    declare_aggs(scalar ? "1" : (dense || direct) ? cap_expr : "0");
    if (dense || direct) decl << "  std::vector<unsigned char> g_seen(" << cap_expr << ");\n";
    decl << "  std::vector<unsigned long long> g_order;\n";
    if (hash_group) {
      decl << "  std::unordered_map<std::string, unsigned> g_map;\n";
      decl << "  std::vector<Cell> g_keys;  // nkeys per group\n";
    }
  }
  decl << "  std::vector<std::vector<Cell>> out_rows;\n";
  if (materialize) decl << "  std::vector<std::array<unsigned, " << std::max<size_t>(n, 1) << ">> bq_buf;\n";

  // --- per-row sink code generator (used fused inline or in the buffer pass) ---
  em.body_.str("");
  em.indent_ = 3;
  auto emit_gid_and_update = [&]() {
    if (scalar) {
      em.line("const unsigned long long g = 0;");
      em.emit_agg_updates("g");
      return;
    }
    if (dense) {
      std::string slot = "0";
      for (size_t k2 = 0; k2 < keys.size(); ++k2) {
        const auto& ki = keys[k2];
        std::string part = ki.dict ? "(unsigned long long)" + ki.codes + "[" + em.rid(ki.pos) + "]"
                                   : "(unsigned long long)(" + ki.val.code + " - (" + std::to_string(ki.min) + "LL))";
        slot += " + " + part + " * " + std::to_string(ki.stride) + "ull";
      }
      em.line("const unsigned long long g = " + slot + ";");
      em.open("if (!g_seen[g]) {");
      em.line("g_seen[g] = 1;");
      em.line("g_order.push_back(g);");
      em.close();
      em.emit_agg_updates("g");
      return;
    }
    if (direct) {
      em.line("const unsigned long long g = " + em.rid(keys[0].pos) + ";");
      em.open("if (!g_seen[g]) {");
      em.line("g_seen[g] = 1;");
      em.line("g_order.push_back(g);");
      em.close();
      em.emit_agg_updates("g");
      return;
    }
    if (hash_group || two_phase) {
      // two-phase reuses the hash-group serialization for its key passes; the
      // sorted-unique variant is below in the buffer pass.
      em.line("bq_keybuf.clear();");
      for (auto& ki : keys) {
        if (ki.val.kind == Emitter::EmittedExpr::Kind::Str) {
          em.line("{ bool kv = " + Emitter::guard_expr(ki.val.guards) + "; bq_keybuf += kv ? 'v' : 'n';");
          em.line("  std::string_view sv = kv ? (std::string_view)(" + ki.val.code +
                  ") : std::string_view(); unsigned len = (unsigned)sv.size();");
          em.line("  bq_keybuf.append((const char*)&len, 4); bq_keybuf.append(sv.data(), sv.size()); }");
        } else {
          em.line("{ bool kv = " + Emitter::guard_expr(ki.val.guards) + "; bq_keybuf += kv ? 'v' : 'n';");
          em.line("  long long v = kv ? (long long)(" + ki.val.code + ") : 0;");
          em.line("  bq_keybuf.append((const char*)&v, 8); }");
        }
      }
      em.line("auto gi = g_map.emplace(bq_keybuf, (unsigned)g_map.size());");
      em.line("const unsigned long long g = gi.first->second;");
      em.open("if (gi.second) {");
      for (auto& a : em.aggs_) {
        em.line(a.id + "_isum.emplace_back(); " + a.id + "_fsum.emplace_back(); " + a.id + "_cnt.emplace_back();");
        em.line(a.id + "_mm.emplace_back(); " + a.id + "_mms.emplace_back(); " + a.id + "_seen.emplace_back();");
      }
      em.line("g_order.push_back(g);");
      for (auto& ki : keys) {
        if (ki.val.kind == Emitter::EmittedExpr::Kind::Str) {
          em.line("if (" + Emitter::guard_expr(ki.val.guards) + ") g_keys.push_back(Cell{3, 0, 0, std::string(" +
                  ki.val.code + "), 0}); else g_keys.push_back(Cell{});");
        } else {
          em.line("if (" + Emitter::guard_expr(ki.val.guards) + ") g_keys.push_back(Cell{1, (long long)(" +
                  ki.val.code + "), 0, \"\", " + std::to_string(int(ki.val.scale)) + "}); else g_keys.push_back(Cell{});");
        }
      }
      em.close();
      em.emit_agg_updates("g");
      return;
    }
  };

  auto emit_projection_row = [&]() {
    em.line("std::vector<Cell> bq_row;");
    for (const auto& item : ast.select) {
      Emitter::EmittedExpr e = em.emit_expr(*item.expr);
      if (e.kind == Emitter::EmittedExpr::Kind::Str) {
        em.line("if (" + Emitter::guard_expr(e.guards) + ") bq_row.push_back(Cell{3, 0, 0, std::string(" + e.code +
                "), 0}); else bq_row.push_back(Cell{});");
      } else if (e.kind == Emitter::EmittedExpr::Kind::Dbl) {
        em.line("if (" + Emitter::guard_expr(e.guards) + ") bq_row.push_back(Cell{2, 0, " + e.code +
                ", \"\", 0}); else bq_row.push_back(Cell{});");
      } else {
        em.line("if (" + Emitter::guard_expr(e.guards) + ") bq_row.push_back(Cell{1, (long long)(" + e.code +
                "), 0, \"\", " + std::to_string(int(e.scale)) + "}); else bq_row.push_back(Cell{});");
      }
    }
    em.line("out_rows.push_back(std::move(bq_row));");
  };

  // --- loop nest ---
  std::function<void(size_t)> emit_steps = [&](size_t sidx) {
    if (sidx == stepgens.size()) {
      if (projection) {
        emit_projection_row();
      } else if (fused) {
        emit_gid_and_update();
      } else {
        std::string t = "std::array<unsigned, " + std::to_string(std::max<size_t>(n, 1)) + ">{";
        for (size_t p = 0; p < std::max<size_t>(n, 1); ++p) {
          if (p) t += ", ";
          t += p < n ? "(unsigned)" + em.rid(int(p)) : "0u";
        }
        t += "}";
        em.line("bq_buf.push_back(" + t + ");");
      }
      return;
    }
    StepGen& sg = stepgens[sidx];
    for (const auto& ol : sg.open_lines) em.line(ol);
    em.indent_ += sg.braces;
    em.count(sg.c_it);
    for (const auto& pc : sg.post_conds) em.line("if (!(" + pc + ")) continue;");
    em.count(sg.c_out);
    emit_steps(sidx + 1);
    for (int b2 = 0; b2 < sg.braces; ++b2) em.close();
  };

  // Driver loop. Non-driver rids are declared by their own loops; the driver
  // rid variable is the loop counter.
  em.indent_ = 1;
  if ((hash_group || two_phase) && !projection) em.line("std::string bq_keybuf;");
  if (spec.unrolled_inner) em.line("#pragma GCC unroll 4");
  if (use_zone) {
    std::string base = driver_tbl->name + "." + zone_col;
    std::string zmins = em.slot(base + ".zone_mins", "i64", "long long");
    std::string zmaxs = em.slot(base + ".zone_maxs", "i64", "long long");
    std::string zshard = em.scalar_slot(base + ".zone_shard");
    std::string zn = em.scalar_slot(base + ".zone_n");
    em.open("for (unsigned long long sh = 0; sh < " + zn + "; ++sh) {");
    em.line("if (" + zmins + "[sh] > bq_zhi || " + zmaxs + "[sh] < bq_zlo) continue;");
    em.line("unsigned long long bq_e = (sh + 1) * " + zshard + "; if (bq_e > " + nrows[size_t(driver)] +
            ") bq_e = " + nrows[size_t(driver)] + ";");
    em.open("for (unsigned long long " + em.rid(driver) + " = sh * " + zshard + "; " + em.rid(driver) +
            " < bq_e; ++" + em.rid(driver) + ") {");
  } else {
    em.open("for (unsigned long long " + em.rid(driver) + " = " + scan_begin + "; " + em.rid(driver) + " < " +
            scan_end + "; ++" + em.rid(driver) + ") {");
  }
  em.count(c_scan_it);
  if (!conds[size_t(driver)].empty()) {
    if (spec.branchless_predicates) {
      std::string acc = "unsigned bq_ok = 1;";
      em.line(acc);
      for (const auto& cn : conds[size_t(driver)]) em.line("bq_ok &= (unsigned)(" + cn + ");");
      em.line("if (!bq_ok) continue;");
    } else {
      for (const auto& cn : conds[size_t(driver)]) em.line("if (!(" + cn + ")) continue;");
    }
  }
  em.count(c_scan_out);
  emit_steps(0);
  em.close();
  if (use_zone) em.close();

  // --- buffered aggregation pass (non-fused) ---
  if (materialize) {
    if (two_phase) {
      // Pass 1: composite keys; pass 2: accumulate at sorted positions.
      em.open("{");
      em.line("std::vector<std::pair<long long, long long>> bq_uniq;");
      em.line("bq_uniq.reserve(bq_buf.size());");
      em.open("for (const auto& bq_t : bq_buf) {");
      for (size_t p = 0; p < n; ++p)
        em.line("const unsigned long long " + em.rid(int(p)) + " = bq_t[" + std::to_string(p) + "];");
      for (size_t p = 0; p < n; ++p) em.line("(void)" + em.rid(int(p)) + ";");
      auto key_code = [&](size_t k2) {
        const auto& ki = keys[k2];
        return ki.dict ? "(long long)" + ki.codes + "[" + em.rid(ki.pos) + "]" : "(long long)(" + ki.val.code + ")";
      };
      em.line("bq_uniq.push_back({" + key_code(0) + ", " + (keys.size() > 1 ? key_code(1) : "0") + "});");
      em.close();
      em.line("std::sort(bq_uniq.begin(), bq_uniq.end());");
      em.line("bq_uniq.erase(std::unique(bq_uniq.begin(), bq_uniq.end()), bq_uniq.end());");
      for (auto& a : em.aggs_) {
        em.line(a.id + "_isum.resize(bq_uniq.size()); " + a.id + "_fsum.resize(bq_uniq.size());");
        em.line(a.id + "_cnt.resize(bq_uniq.size()); " + a.id + "_mm.resize(bq_uniq.size());");
        em.line(a.id + "_mms.resize(bq_uniq.size()); " + a.id + "_seen.resize(bq_uniq.size());");
      }
      em.line("std::vector<unsigned char> bq_touched(bq_uniq.size());");
      em.line("std::vector<Cell> g_keys2(bq_uniq.size() * " + std::to_string(keys.size()) + ");");
      em.open("for (const auto& bq_t : bq_buf) {");
      for (size_t p = 0; p < n; ++p)
        em.line("const unsigned long long " + em.rid(int(p)) + " = bq_t[" + std::to_string(p) + "];");
      em.line("std::pair<long long, long long> bq_k{" + key_code(0) + ", " +
              (keys.size() > 1 ? key_code(1) : "0") + "};");
      em.line(
          "const unsigned long long g = (unsigned long long)(std::lower_bound(bq_uniq.begin(), bq_uniq.end(), "
          "bq_k) - bq_uniq.begin());");
      em.open("if (!bq_touched[g]) {");
      em.line("bq_touched[g] = 1; g_order.push_back(g);");
      for (size_t k2 = 0; k2 < keys.size(); ++k2) {
        const auto& ki = keys[k2];
        std::string cell = "g_keys2[g * " + std::to_string(keys.size()) + " + " + std::to_string(k2) + "]";
        if (ki.val.kind == Emitter::EmittedExpr::Kind::Str) {
          em.line("if (" + Emitter::guard_expr(ki.val.guards) + ") " + cell + " = Cell{3, 0, 0, std::string(" +
                  ki.val.code + "), 0};");
        } else {
          em.line("if (" + Emitter::guard_expr(ki.val.guards) + ") " + cell + " = Cell{1, (long long)(" +
                  ki.val.code + "), 0, \"\", " + std::to_string(int(ki.val.scale)) + "};");
        }
      }
      em.close();
      em.emit_agg_updates("g");
      em.close();
      em.close();
    } else {
      em.open("for (const auto& bq_t : bq_buf) {");
      for (size_t p = 0; p < n; ++p)
        em.line("const unsigned long long " + em.rid(int(p)) + " = bq_t[" + std::to_string(p) + "];");
      for (size_t p = 0; p < n; ++p) em.line("(void)" + em.rid(int(p)) + ";");
      emit_gid_and_update();
      em.close();
    }
  }

  // Scan/probe/aggregate section complete; group finalization below must run
  // even when a constant predicate empties the pipeline.
  std::string scan_text = em.body_.str();
  em.body_.str("");
  em.indent_ = 1;

  // --- finalize groups into out_rows ---
  if (!projection) {
    auto key_cell_for = [&](const std::string& g) {
      return [&, g](size_t k2) -> std::string {
        const auto& ki = keys[k2];
        if (hash_group) return "g_keys[" + g + " * " + std::to_string(keys.size()) + " + " + std::to_string(k2) + "]";
        if (two_phase) return "g_keys2[" + g + " * " + std::to_string(keys.size()) + " + " + std::to_string(k2) + "]";
        if (direct) {
          // Key read back from the grouped table at the slot row.
          Expr e;
          e.kind = Expr::Kind::ColumnRef;
          e.table_idx = keys[k2].pos;
          e.col_idx = keys[k2].col;
          e.column = em.col_name(keys[k2].pos, keys[k2].col);
          e.type = keys[k2].type;
          // rid variable for this table is re-bound below as `g`.
          return "bq_key_cell" + std::to_string(k2) + "(g)";
        }
        // Dense: invert the slot composition.
        std::string part = "((" + g + " / " + std::to_string(ki.stride) + "ull) % " + std::to_string(ki.range) +
                           "ull)";
        if (ki.dict) {
          const EncodedColumn* c = em.col(ki.pos, ki.col);
          std::string base = em.tbl_name(ki.pos) + "." + em.col_name(ki.pos, ki.col);
          if (c->logical_type.kind == TypeKind::Varchar) {
            std::string doff = em.slot(base + ".dict_str_off", "u64", "unsigned long long");
            std::string dbytes = em.slot(base + ".dict_str_bytes", "bytes", "char");
            return "Cell{3, 0, 0, std::string(" + dbytes + " + " + doff + "[" + part + "], " + doff + "[" + part +
                   " + 1] - " + doff + "[" + part + "]), 0}";
          }
          std::string di = em.slot(base + ".dict_i64", "i64", "long long");
          uint8_t sc = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
          return "Cell{1, " + di + "[" + part + "], 0, \"\", " + std::to_string(int(sc)) + "}";
        }
        return "Cell{1, (long long)(" + part + ") + " + std::to_string(ki.min) + "LL, 0, \"\", " +
               std::to_string(int(ki.val.scale)) + "}";
      };
    };

    if (direct && !keys.empty()) {
      // Helper lambdas reading the key column at a slot row.
      for (size_t k2 = 0; k2 < keys.size(); ++k2) {
        const auto& ki = keys[k2];
        std::string save_r = em.rid(ki.pos);
        Emitter::EmittedExpr v = ki.val;
        std::string code = v.code;
        // Replace the rid variable with the lambda parameter.
        size_t mp2;
        std::string param = "bq_g";
        std::string c2 = code;
        while ((mp2 = c2.find("[" + save_r + "]")) != std::string::npos)
          c2.replace(mp2, save_r.size() + 2, "[" + param + "]");
        em.line("auto bq_key_cell" + std::to_string(k2) + " = [&](unsigned long long " + param + ") -> Cell {");
        em.line("  return Cell{1, (long long)(" + c2 + "), 0, \"\", " + std::to_string(int(v.scale)) + "}; };");
      }
    }

    // Groupless aggregates yield exactly one row even on empty input.
    if (scalar)
      em.open("for (unsigned long long g = 0; g < 1; ++g) {");
    else
      em.open("for (unsigned long long g : g_order) {");
    em.line("std::vector<Cell> bq_row(" + std::to_string(ast.select.size()) + ");");
    auto kc = key_cell_for("g");
    for (size_t i = 0; i < ast.select.size(); ++i)
      em.emit_final_expr(*ast.select[i].expr, "g", "bq_row[" + std::to_string(i) + "]", kc);
    em.line("out_rows.push_back(std::move(bq_row));");
    em.close();
  }

  // --- final assembly: the body generation above may have allocated more
  // slots and prep steps, so the prologue is captured last ---
  std::ostringstream out;
  out << "// generated kernel for template " << spec.template_id << "\n";
  out << "#include <algorithm>\n#include <array>\n#include <cstdint>\n#include <cstring>\n#include <stdexcept>\n"
      << "#include <string>\n#include <string_view>\n#include <unordered_map>\n"
      << "#include <unordered_set>\n#include <vector>\n\n";
  if (em.tracing_) out << "#define BQ_TRACE(x) x\n\n";
  out << "extern \"C\" {\n"
      << "struct bq_binding { const long long* ints; const char* const* strs; };\n"
      << "struct bq_sink { void* ctx; void (*begin_row)(void*); void (*cell_i64)(void*, long long);\n"
      << " void (*cell_f64)(void*, double); void (*cell_str)(void*, const char*, unsigned long long);\n"
      << " void (*cell_null)(void*); void (*error)(void*, const char*); };\n}\n\n";
  out << runtime_helpers() << "\n";
  out << "extern \"C\" int bespoke_q_" << spec.template_id
      << "(const void* const* slots, const bq_binding* binding, const bq_sink* sink, unsigned long long* "
         "trace_buf) {\n";
  out << "  (void)binding; (void)trace_buf;\n";
  out << "  try {\n";

  std::ostringstream fn;
  fn << em.prologue_.str();
  fn << em.prep_.str();
  for (const auto& d : em.prologue_deferred_) fn << "  " << d << "\n";
  fn << "  bool bq_empty = false;\n";
  for (const auto& cc : const_conds) fn << "  if (!(" << cc << ")) bq_empty = true;\n";
  fn << decl.str();
  fn << "  if (!bq_empty) {\n";
  for (const auto& sb : semi_builds) fn << sb;
  for (const auto& hb : hash_builds) fn << hb;
  fn << sm_decls.str();
  fn << driver_pre.str();
  fn << scan_text;
  fn << "  }\n";
  fn << em.body_.str();

  // --- order, limit, emit ---
  std::ostringstream fin;
  if (!ast.order_by.empty()) {
    fin << "  std::stable_sort(out_rows.begin(), out_rows.end(), [](const std::vector<Cell>& a, const "
           "std::vector<Cell>& b) {\n";
    for (const auto& k2 : ast.order_by) {
      fin << "    { int c = bq_cell_cmp(a[" << k2.select_idx << "], b[" << k2.select_idx << "]); if (c != 0) return "
          << (k2.desc ? "c > 0" : "c < 0") << "; }\n";
    }
    fin << "    return false;\n  });\n";
  }
  if (ast.limit) {
    fin << "  if (out_rows.size() > " << *ast.limit << "ull) out_rows.resize(" << *ast.limit << "ull);\n";
  }
  fin << "  for (const auto& bq_row : out_rows) {\n";
  fin << "    sink->begin_row(sink->ctx);\n";
  fin << "    for (const auto& c : bq_row) {\n";
  fin << "      switch (c.tag) {\n";
  fin << "        case 0: sink->cell_null(sink->ctx); break;\n";
  fin << "        case 1: sink->cell_i64(sink->ctx, c.i); break;\n";
  fin << "        case 2: sink->cell_f64(sink->ctx, c.f); break;\n";
  fin << "        default: sink->cell_str(sink->ctx, c.s.data(), c.s.size()); break;\n";
  fin << "      }\n    }\n  }\n";
  fin << "  return 0;\n";
  fin << "  } catch (const std::exception& e) { if (sink->error) sink->error(sink->ctx, e.what()); return 2; }\n";
  fin << "}\n";

  out << fn.str() << fin.str();

  EmittedKernel ek;
  ek.entry_symbol = "bespoke_q_" + spec.template_id;
  ek.source = out.str();

  json manifest;
  manifest["abi"] = abi_signature_hash();
  manifest["entry"] = ek.entry_symbol;
  manifest["template"] = spec.template_id;
  manifest["slots"] = em.slots_;
  manifest["int_params"] = em.int_params_;
  manifest["str_params"] = em.str_params_;
  json cols = json::array();
  for (const auto& item : ast.select)
    cols.push_back({{"name", item.alias}, {"type", type_name(item.expr->type)}});
  manifest["columns"] = cols;
  manifest["counters"] = em.counters_;
  ek.manifest_json = manifest.dump(2);
  return ek;
}

}  // namespace

// ---------------------------------------------------------------------------
// Host side
// ---------------------------------------------------------------------------

ResolvedSlots resolve_slots(const std::string& manifest_json, const planner::BespokeStore& store) {
  json m = json::parse(manifest_json);
  ResolvedSlots out;
  out.abi_hash = m.at("abi").get<uint64_t>();
  out.int_params = m.at("int_params").get<std::vector<std::string>>();
  out.str_params = m.at("str_params").get<std::vector<std::string>>();
  for (const auto& c : m.at("counters")) out.counter_names.push_back(c.get<std::string>());
  for (const auto& c : m.at("columns"))
    out.columns.push_back({c.at("name").get<std::string>(), type_from_name(c.at("type").get<std::string>())});

  // Scalars must not relocate while slots point at them.
  out.scalar_cells.reserve(m.at("slots").size());

  for (const auto& s : m.at("slots")) {
    std::string name = s.at("name").get<std::string>();
    std::string kind = s.at("kind").get<std::string>();

    // <table>.<rest>
    auto dot = name.find('.');
    if (dot == std::string::npos) throw UnknownPath(name);
    std::string table = name.substr(0, dot);
    std::string rest = name.substr(dot + 1);
    auto it = store.tables.find(table);
    if (it == store.tables.end()) throw UnknownPath(name);
    const StoreTable& st = it->second;

    auto push_scalar = [&](uint64_t v) {
      out.scalar_cells.push_back(v);
      out.slots.push_back(&out.scalar_cells.back());
    };

    if (rest == "rows") {
      push_scalar(st.rows);
      continue;
    }

    // derived columns: derived.<name>.<part>
    if (rest.rfind("derived.", 0) == 0) {
      std::string tail = rest.substr(8);
      auto d2 = tail.rfind('.');
      std::string dname = tail.substr(0, d2);
      std::string part = tail.substr(d2 + 1);
      int di = -1;
      for (size_t i = 0; i < st.derived_meta.size(); ++i)
        if (st.derived_meta[i].name == dname) di = int(i);
      if (di < 0) throw UnknownPath(name);
      const EncodedColumn& c = st.derived[size_t(di)];
      if (part == "i64")
        out.slots.push_back(c.i64.data());
      else if (part == "valid")
        out.slots.push_back(c.valid.data());
      else
        throw UnknownPath(name);
      continue;
    }

    // directory: <child>.<parent>.dir_start|dir_end needs parent segment
    auto d2 = rest.rfind('.');
    if (d2 == std::string::npos) throw UnknownPath(name);
    std::string colname = rest.substr(0, d2);
    std::string part = rest.substr(d2 + 1);

    if (part == "dir_start" || part == "dir_end") {
      const auto* dir = st.directory_from(colname);  // colname holds the parent table here
      if (!dir) throw UnknownPath(name);
      out.slots.push_back(part == "dir_start" ? dir->start.data() : dir->end.data());
      continue;
    }

    int ci = st.column_index(colname);
    if (ci < 0) throw UnknownPath(name);
    const EncodedColumn& c = st.columns[size_t(ci)];
    if (part == "i64")
      out.slots.push_back(c.i64.data());
    else if (part == "u16")
      out.slots.push_back(c.u16.data());
    else if (part == "codes")
      out.slots.push_back(c.codes.data());
    else if (part == "valid")
      out.slots.push_back(c.valid.data());
    else if (part == "off")
      out.slots.push_back(c.offsets.data());
    else if (part == "bytes")
      out.slots.push_back(c.bytes.data());
    else if (part == "dict_i64")
      out.slots.push_back(c.dict_i64.data());
    else if (part == "epoch")
      push_scalar(uint64_t(c.epoch));
    else if (part == "dict_n")
      push_scalar(c.dict_size());
    else if (part == "dict_str_off" || part == "dict_str_bytes") {
      // Dict strings are exposed as an arena; built lazily per store table.
      const_cast<StoreTable&>(st).ensure_dict_arena(size_t(ci));
      const auto& arena = st.dict_arenas.at(size_t(ci));
      out.slots.push_back(part == "dict_str_off" ? (const void*)arena.offsets.data()
                                                 : (const void*)arena.bytes.data());
    } else if (part == "idx_keys" || part == "idx_head" || part == "idx_next" || part == "idx_mask") {
      const auto* idx = st.hash_index(colname);
      if (!idx) throw UnknownPath(name);
      if (part == "idx_keys")
        out.slots.push_back(idx->keys.data());
      else if (part == "idx_head")
        out.slots.push_back(idx->head.data());
      else if (part == "idx_next")
        out.slots.push_back(idx->next.data());
      else
        push_scalar(idx->mask);
    } else if (part == "zone_mins" || part == "zone_maxs" || part == "zone_shard" || part == "zone_n") {
      const auto* z = st.zone_map(colname);
      if (!z) throw UnknownPath(name);
      if (part == "zone_mins")
        out.slots.push_back(z->mins.data());
      else if (part == "zone_maxs")
        out.slots.push_back(z->maxs.data());
      else if (part == "zone_shard")
        push_scalar(z->shard_size);
      else
        push_scalar(z->mins.size());
    } else if (part == "mask_alpha" || part == "mask_bigram") {
      const auto* mk = st.char_mask(colname, part == "mask_bigram");
      if (!mk) throw UnknownPath(name);
      out.slots.push_back(mk->masks.data());
    } else {
      throw UnknownPath(name);
    }
  }
  return out;
}

namespace {

struct SinkCollector {
  oracle::ResultSet* rs;
  const std::vector<std::pair<std::string, ColumnType>>* columns;
  size_t col = 0;
  std::string error;

  void begin() {
    rs->rows.emplace_back();
    col = 0;
  }
  void push(Value v) {
    rs->rows.back().push_back(std::move(v));
    ++col;
  }
  ColumnType cur_type() const { return (*columns)[col % columns->size()].second; }
};

extern "C" {
void bq_cb_begin(void* ctx) { static_cast<SinkCollector*>(ctx)->begin(); }
void bq_cb_i64(void* ctx, long long v) {
  auto* s = static_cast<SinkCollector*>(ctx);
  ColumnType t = s->cur_type();
  switch (t.kind) {
    case TypeKind::Decimal:
      s->push(Value::from_decimal(v, t.scale));
      break;
    case TypeKind::Date:
      s->push(Value::from_date(int32_t(v)));
      break;
    default:
      s->push(Value::from_int(v));
      break;
  }
}
void bq_cb_f64(void* ctx, double v) { static_cast<SinkCollector*>(ctx)->push(Value::from_float(v)); }
void bq_cb_str(void* ctx, const char* p, unsigned long long len) {
  static_cast<SinkCollector*>(ctx)->push(Value::from_string(std::string(p, len)));
}
void bq_cb_null(void* ctx) { static_cast<SinkCollector*>(ctx)->push(Value::null()); }
void bq_cb_error(void* ctx, const char* msg) { static_cast<SinkCollector*>(ctx)->error = msg ? msg : "unknown"; }
}

}  // namespace

oracle::ResultSet run_emitted(EntryFn entry, const ResolvedSlots& slots, const contract::ParamBinding& binding,
                              uint64_t* trace_buf) {
  std::vector<long long> ints;
  for (const auto& name : slots.int_params) {
    auto it = binding.find(name);
    if (it == binding.end()) throw MissingParam(name);
    ints.push_back(it->second.i);
  }
  std::vector<std::string> str_store;
  std::vector<const char*> strs;
  for (const auto& name : slots.str_params) {
    auto it = binding.find(name);
    if (it == binding.end()) throw MissingParam(name);
    str_store.push_back(it->second.s);
  }
  for (const auto& s : str_store) strs.push_back(s.c_str());

  oracle::ResultSet rs;
  for (const auto& [n2, t] : slots.columns) {
    rs.names.push_back(n2);
    rs.types.push_back(t);
  }
  SinkCollector collector{&rs, &slots.columns, 0, ""};
  bq_sink sink{&collector, bq_cb_begin, bq_cb_i64, bq_cb_f64, bq_cb_str, bq_cb_null, bq_cb_error};
  bq_binding bb{ints.data(), strs.data()};
  int rc = entry(slots.slots.data(), &bb, &sink, reinterpret_cast<unsigned long long*>(trace_buf));
  if (rc != 0) throw KernelPanic(collector.error.empty() ? "kernel returned " + std::to_string(rc) : collector.error);
  return rs;
}

}  // namespace bespoke::kernelgen
