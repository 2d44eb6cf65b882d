#include "bespoke/kernel_interp.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <functional>
#include <unordered_map>
#include <unordered_set>

#include "bespoke/errors.hpp"

namespace bespoke::kernelgen {

namespace {

using planner::BespokeStore;
using planner::EncodedColumn;
using planner::Encoding;
using planner::StoreTable;
using sql::AggKind;
using sql::CmpOp;
using sql::Expr;
using sql::FilterPred;

constexpr size_t kMaxTables = 8;

int64_t floor_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}

int64_t ceil_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  return (a % b != 0 && (a < 0) == (b < 0)) ? q + 1 : q;
}

Value value_from_i64(ColumnType t, int64_t v) {
  switch (t.kind) {
    case TypeKind::Int64:
      return Value::from_int(v);
    case TypeKind::Decimal:
      return Value::from_decimal(v, t.scale);
    case TypeKind::Date:
      return Value::from_date(int32_t(v));
    case TypeKind::Float64:
      return Value::from_float(double(v));
    case TypeKind::Varchar:
      break;
  }
  throw CorruptStore("integer conversion of string type");
}

// Per-run parameter slots, filled by prep functions before execution.
struct Prepared {
  std::vector<int64_t> i64;
  std::vector<std::string> str;
  std::vector<uint64_t> u64;
  std::vector<std::vector<int64_t>> i64_list;  // IN-list values / code sets
  bool always_empty = false;
};

struct TraceCtx {
  std::vector<TraceReport::OpCounters> ops;
};

struct Ctx {
  uint32_t rid[kMaxTables] = {};
  Prepared* prep = nullptr;
  TraceCtx* trace = nullptr;
};

using PrepFn = std::function<void(const contract::ParamBinding&, Prepared&)>;
using Pred = std::function<bool(Ctx&)>;
using I64Fn = std::function<bool(Ctx&, int64_t&)>;   // false = null
using DblFn = std::function<bool(Ctx&, double&)>;
using StrFn = std::function<bool(Ctx&, std::string_view&)>;
using ValueFn = std::function<Value(Ctx&)>;

struct ScalarExpr {
  enum class Kind : uint8_t { I64, Dbl, Str } kind = Kind::I64;
  I64Fn i64;
  DblFn dbl;
  StrFn str;
  uint8_t scale = 0;
  ColumnType type;
};

uint64_t now_ns() {
  return uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                      std::chrono::steady_clock::now().time_since_epoch())
                      .count());
}

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

class Builder;

struct CompiledFilter {
  Pred pred;
  int table_pos = -1;  // -1 = constant
};

class Builder {
 public:
  Builder(const KernelSpec& spec, const sql::QueryAst& ast, const BespokeStore& store,
          const contract::Contract& contract)
      : spec_(spec), ast_(ast), store_(store), contract_(contract) {
    if (ast.from.size() > kMaxTables) throw EmissionError("more than 8 tables in FROM");
    for (const auto& tr : ast_.from) tables_.push_back(&store_.tables.at(tr.table));
  }

  const KernelSpec& spec_;
  const sql::QueryAst& ast_;
  const BespokeStore& store_;
  const contract::Contract& contract_;
  std::vector<const StoreTable*> tables_;
  std::vector<PrepFn> preps_;
  Prepared proto_;

  int alloc_i64() {
    proto_.i64.push_back(0);
    return int(proto_.i64.size()) - 1;
  }
  int alloc_str() {
    proto_.str.emplace_back();
    return int(proto_.str.size()) - 1;
  }
  int alloc_u64() {
    proto_.u64.push_back(0);
    return int(proto_.u64.size()) - 1;
  }
  int alloc_list() {
    proto_.i64_list.emplace_back();
    return int(proto_.i64_list.size()) - 1;
  }

  const EncodedColumn* column(int pos, int col) const { return &tables_[size_t(pos)]->columns[size_t(col)]; }

  // --- scalar compilation -------------------------------------------------

  ScalarExpr compile_scalar(const Expr& e) {
    switch (e.kind) {
      case Expr::Kind::Literal:
        return compile_literal(e.lit, e.type);
      case Expr::Kind::Param:
        return compile_param(e);
      case Expr::Kind::ColumnRef:
        return compile_column(e.table_idx, e.col_idx);
      case Expr::Kind::Arith:
        return compile_arith(e);
      case Expr::Kind::Agg:
        throw EmissionError("aggregate in scalar context");
    }
    throw EmissionError("bad expression");
  }

  ScalarExpr compile_literal(const Value& v, ColumnType t) {
    ScalarExpr s;
    s.type = t;
    if (v.tag == Value::Tag::Str) {
      s.kind = ScalarExpr::Kind::Str;
      std::string text = v.s;
      s.str = [text](Ctx&, std::string_view& out) {
        out = text;
        return true;
      };
      return s;
    }
    if (v.tag == Value::Tag::Flt) {
      s.kind = ScalarExpr::Kind::Dbl;
      double f = v.f;
      s.dbl = [f](Ctx&, double& out) {
        out = f;
        return true;
      };
      return s;
    }
    s.kind = ScalarExpr::Kind::I64;
    s.scale = v.tag == Value::Tag::Dec ? v.scale : 0;
    int64_t value = v.i;
    bool isnull = v.is_null();
    s.i64 = [value, isnull](Ctx&, int64_t& out) {
      out = value;
      return !isnull;
    };
    return s;
  }

  ScalarExpr compile_param(const Expr& e) {
    ScalarExpr s;
    s.type = e.type;
    std::string name = e.param;
    if (e.type.kind == TypeKind::Varchar) {
      s.kind = ScalarExpr::Kind::Str;
      int slot = alloc_str();
      preps_.push_back([name, slot](const contract::ParamBinding& b, Prepared& p) {
        auto it = b.find(name);
        if (it == b.end()) throw MissingParam(name);
        p.str[size_t(slot)] = it->second.s;
      });
      s.str = [slot](Ctx& c, std::string_view& out) {
        out = c.prep->str[size_t(slot)];
        return true;
      };
      return s;
    }
    s.kind = ScalarExpr::Kind::I64;
    int slot = alloc_i64();
    // The slot keeps the parameter's own scale; comparisons rescale.
    uint8_t scale = e.type.kind == TypeKind::Decimal ? e.type.scale : 0;
    s.scale = scale;
    preps_.push_back([name, slot, scale](const contract::ParamBinding& b, Prepared& p) {
      auto it = b.find(name);
      if (it == b.end()) throw MissingParam(name);
      const Value& v = it->second;
      int64_t raw = v.i;
      uint8_t vs = v.tag == Value::Tag::Dec ? v.scale : 0;
      if (vs < scale) raw *= pow10_i64(unsigned(scale - vs));
      // vs > scale cannot happen: the domain fixed the scale at parse time.
      p.i64[size_t(slot)] = raw;
    });
    s.i64 = [slot](Ctx& c, int64_t& out) {
      out = c.prep->i64[size_t(slot)];
      return true;
    };
    return s;
  }

  ScalarExpr compile_column(int pos, int col) {
    const EncodedColumn* c = column(pos, col);
    ScalarExpr s;
    s.type = c->logical_type;
    if (c->logical_type.kind == TypeKind::Varchar) {
      s.kind = ScalarExpr::Kind::Str;
      if (c->nullable) {
        s.str = [c, pos](Ctx& x, std::string_view& out) {
          uint32_t r = x.rid[pos];
          if (!c->valid[r]) return false;
          out = c->value_str(r);
          return true;
        };
      } else {
        s.str = [c, pos](Ctx& x, std::string_view& out) {
          out = c->value_str(x.rid[pos]);
          return true;
        };
      }
      return s;
    }
    s.kind = ScalarExpr::Kind::I64;
    s.scale = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
    switch (c->enc) {
      case Encoding::Plain:
      case Encoding::ScaledInteger: {
        const int64_t* data = c->i64.data();
        if (!c->nullable) {
          s.i64 = [data, pos](Ctx& x, int64_t& out) {
            out = data[x.rid[pos]];
            return true;
          };
        } else {
          const uint8_t* valid = c->valid.data();
          s.i64 = [data, valid, pos](Ctx& x, int64_t& out) {
            uint32_t r = x.rid[pos];
            out = data[r];
            return valid[r] != 0;
          };
        }
        break;
      }
      case Encoding::CompactDate: {
        const uint16_t* data = c->u16.data();
        int64_t epoch = c->epoch;
        if (!c->nullable) {
          s.i64 = [data, epoch, pos](Ctx& x, int64_t& out) {
            out = epoch + int64_t(data[x.rid[pos]]);
            return true;
          };
        } else {
          const uint8_t* valid = c->valid.data();
          s.i64 = [data, epoch, valid, pos](Ctx& x, int64_t& out) {
            uint32_t r = x.rid[pos];
            out = epoch + int64_t(data[r]);
            return valid[r] != 0;
          };
        }
        break;
      }
      case Encoding::Dictionary: {
        const uint32_t* codes = c->codes.data();
        const int64_t* dict = c->dict_i64.data();
        if (!c->nullable) {
          s.i64 = [codes, dict, pos](Ctx& x, int64_t& out) {
            out = dict[codes[x.rid[pos]]];
            return true;
          };
        } else {
          const uint8_t* valid = c->valid.data();
          s.i64 = [codes, dict, valid, pos](Ctx& x, int64_t& out) {
            uint32_t r = x.rid[pos];
            out = dict[codes[r]];
            return valid[r] != 0;
          };
        }
        break;
      }
      case Encoding::StringArena:
        throw CorruptStore("string arena read as integer");
    }
    return s;
  }

  // Dictionary-coded string column read as code (for group keys).
  bool column_is_dict(int pos, int col) const { return column(pos, col)->enc == Encoding::Dictionary; }

  ScalarExpr compile_arith(const Expr& e) {
    // Derived-column substitution: when enabled and the canonical text of
    // this subtree matches a precomputed column, read it directly.
    if (spec_.use_derived) {
      std::vector<const Expr*> cols;
      e.collect_columns(cols);
      if (!cols.empty()) {
        int pos = cols[0]->table_idx;
        bool single = std::all_of(cols.begin(), cols.end(), [&](const Expr* c) { return c->table_idx == pos; });
        if (single) {
          int didx = tables_[size_t(pos)]->derived_index(sql::expr_to_text(e));
          if (didx >= 0) {
            const EncodedColumn* c = &tables_[size_t(pos)]->derived[size_t(didx)];
            ScalarExpr s;
            s.type = c->logical_type;
            s.kind = ScalarExpr::Kind::I64;
            s.scale = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
            const int64_t* data = c->i64.data();
            if (!c->nullable) {
              s.i64 = [data, pos](Ctx& x, int64_t& out) {
                out = data[x.rid[pos]];
                return true;
              };
            } else {
              const uint8_t* valid = c->valid.data();
              s.i64 = [data, valid, pos](Ctx& x, int64_t& out) {
                uint32_t r = x.rid[pos];
                out = data[r];
                return valid[r] != 0;
              };
            }
            return s;
          }
        }
      }
    }

    ScalarExpr l = compile_scalar(*e.args[0]);
    ScalarExpr r = compile_scalar(*e.args[1]);
    char op = e.op;
    ScalarExpr s;
    s.type = e.type;
    if (op == '/' || l.kind == ScalarExpr::Kind::Dbl || r.kind == ScalarExpr::Kind::Dbl) {
      s.kind = ScalarExpr::Kind::Dbl;
      DblFn lf = to_dbl(l), rf = to_dbl(r);
      switch (op) {
        case '+':
          s.dbl = [lf, rf](Ctx& c, double& out) {
            double a, b;
            if (!lf(c, a) || !rf(c, b)) return false;
            out = a + b;
            return true;
          };
          break;
        case '-':
          s.dbl = [lf, rf](Ctx& c, double& out) {
            double a, b;
            if (!lf(c, a) || !rf(c, b)) return false;
            out = a - b;
            return true;
          };
          break;
        case '*':
          s.dbl = [lf, rf](Ctx& c, double& out) {
            double a, b;
            if (!lf(c, a) || !rf(c, b)) return false;
            out = a * b;
            return true;
          };
          break;
        case '/':
          s.dbl = [lf, rf](Ctx& c, double& out) {
            double a, b;
            if (!lf(c, a) || !rf(c, b) || b == 0.0) return false;
            out = a / b;
            return true;
          };
          break;
      }
      return s;
    }
    s.kind = ScalarExpr::Kind::I64;
    I64Fn lf = l.i64, rf = r.i64;
    if (op == '*') {
      s.scale = uint8_t(l.scale + r.scale);
      s.i64 = [lf, rf](Ctx& c, int64_t& out) {
        int64_t a, b;
        if (!lf(c, a) || !rf(c, b)) return false;
        if (__builtin_mul_overflow(a, b, &out)) throw ArithmeticError("integer overflow in *");
        return true;
      };
      return s;
    }
    uint8_t scale = std::max(l.scale, r.scale);
    s.scale = scale;
    int64_t lfac = pow10_i64(unsigned(scale - l.scale));
    int64_t rfac = pow10_i64(unsigned(scale - r.scale));
    bool add = op == '+';
    s.i64 = [lf, rf, lfac, rfac, add](Ctx& c, int64_t& out) {
      int64_t a, b;
      if (!lf(c, a) || !rf(c, b)) return false;
      int64_t sa, sb;
      if (__builtin_mul_overflow(a, lfac, &sa) || __builtin_mul_overflow(b, rfac, &sb))
        throw ArithmeticError("integer overflow in scale alignment");
      if (add ? __builtin_add_overflow(sa, sb, &out) : __builtin_sub_overflow(sa, sb, &out))
        throw ArithmeticError("integer overflow in +/-");
      return true;
    };
    return s;
  }

  static DblFn to_dbl(const ScalarExpr& s) {
    if (s.kind == ScalarExpr::Kind::Dbl) return s.dbl;
    if (s.kind == ScalarExpr::Kind::Str) throw EmissionError("string in numeric context");
    I64Fn f = s.i64;
    double div = double(pow10_i64(s.scale));
    return [f, div](Ctx& c, double& out) {
      int64_t v;
      if (!f(c, v)) return false;
      out = double(v) / div;
      return true;
    };
  }

  ValueFn compile_value(const Expr& e) {
    ScalarExpr s = compile_scalar(e);
    ColumnType t = s.type;
    switch (s.kind) {
      case ScalarExpr::Kind::I64: {
        I64Fn f = s.i64;
        uint8_t scale = s.scale;
        ColumnType vt = t.kind == TypeKind::Decimal ? ColumnType::decimal(scale) : t;
        return [f, vt](Ctx& c) -> Value {
          int64_t v;
          if (!f(c, v)) return Value::null();
          return value_from_i64(vt, v);
        };
      }
      case ScalarExpr::Kind::Dbl: {
        DblFn f = s.dbl;
        return [f](Ctx& c) -> Value {
          double v;
          if (!f(c, v)) return Value::null();
          return Value::from_float(v);
        };
      }
      case ScalarExpr::Kind::Str: {
        StrFn f = s.str;
        return [f](Ctx& c) -> Value {
          std::string_view v;
          if (!f(c, v)) return Value::null();
          return Value::from_string(std::string(v));
        };
      }
    }
    throw EmissionError("bad scalar");
  }

  // --- filter compilation ---------------------------------------------------

  // A compile-time-known or per-run i64 threshold at a known scale.
  struct Threshold {
    bool is_param = false;
    int slot = -1;       // param slot (raw, at param scale)
    int64_t value = 0;   // literal payload
    uint8_t scale = 0;
    std::string param;
  };

  Threshold make_threshold(const Expr& e) {
    Threshold t;
    if (e.kind == Expr::Kind::Literal) {
      t.value = e.lit.i;
      t.scale = e.lit.tag == Value::Tag::Dec ? e.lit.scale : 0;
      return t;
    }
    if (e.kind == Expr::Kind::Param) {
      t.is_param = true;
      t.param = e.param;
      t.scale = e.type.kind == TypeKind::Decimal ? e.type.scale : 0;
      t.slot = alloc_i64();
      std::string name = e.param;
      int slot = t.slot;
      preps_.push_back([name, slot](const contract::ParamBinding& b, Prepared& p) {
        auto it = b.find(name);
        if (it == b.end()) throw MissingParam(name);
        p.i64[size_t(slot)] = it->second.i;
      });
      return t;
    }
    throw EmissionError("threshold must be a literal or parameter");
  }

  // Produces a prep step that writes the threshold transformed to the column
  // scale into out_slot, honoring exact semantics when the threshold has more
  // fractional digits than the column. flag_slot (optional) is set to 1 when
  // the predicate can never hold.
  int lower_threshold_to_scale(const Threshold& t, uint8_t col_scale, CmpOp op, int flag_slot) {
    int out_slot = alloc_i64();
    auto transform = [op, col_scale](int64_t raw, uint8_t tscale, int64_t& out, bool& impossible) {
      impossible = false;
      if (tscale <= col_scale) {
        out = raw * pow10_i64(unsigned(col_scale - tscale));
        return;
      }
      int64_t f = pow10_i64(unsigned(tscale - col_scale));
      switch (op) {
        case CmpOp::Eq:
          if (raw % f != 0) {
            impossible = true;
            out = 0;
          } else {
            out = raw / f;
          }
          break;
        case CmpOp::Ge:
          out = ceil_div(raw, f);
          break;
        case CmpOp::Gt:
          out = floor_div(raw, f);
          break;
        case CmpOp::Le:
          out = floor_div(raw, f);
          break;
        case CmpOp::Lt:
          out = ceil_div(raw, f);
          break;
      }
    };
    if (!t.is_param) {
      int64_t out;
      bool impossible;
      transform(t.value, t.scale, out, impossible);
      int64_t flag = impossible ? 1 : 0;
      int slot = out_slot;
      preps_.push_back([slot, out, flag, flag_slot](const contract::ParamBinding&, Prepared& p) {
        p.i64[size_t(slot)] = out;
        if (flag_slot >= 0 && flag) p.i64[size_t(flag_slot)] = 1;
      });
      return out_slot;
    }
    int in_slot = t.slot;
    uint8_t tscale = t.scale;
    int slot = out_slot;
    preps_.push_back([in_slot, tscale, slot, flag_slot, transform](const contract::ParamBinding&, Prepared& p) {
      int64_t out;
      bool impossible;
      transform(p.i64[size_t(in_slot)], tscale, out, impossible);
      p.i64[size_t(slot)] = out;
      if (flag_slot >= 0 && impossible) p.i64[size_t(flag_slot)] = 1;
    });
    return out_slot;
  }

  Pred compile_cmp_col_threshold(int pos, int col, CmpOp op, const Threshold& t) {
    const EncodedColumn* c = column(pos, col);
    uint8_t cs = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
    int flag = alloc_i64();
    int slot = lower_threshold_to_scale(t, cs, op, flag);
    ScalarExpr s = compile_column(pos, col);
    I64Fn get = s.i64;
    switch (op) {
      case CmpOp::Eq:
        return [get, slot, flag](Ctx& c2) {
          int64_t v;
          return !c2.prep->i64[size_t(flag)] && get(c2, v) && v == c2.prep->i64[size_t(slot)];
        };
      case CmpOp::Lt:
        return [get, slot](Ctx& c2) {
          int64_t v;
          return get(c2, v) && v < c2.prep->i64[size_t(slot)];
        };
      case CmpOp::Le:
        return [get, slot](Ctx& c2) {
          int64_t v;
          return get(c2, v) && v <= c2.prep->i64[size_t(slot)];
        };
      case CmpOp::Gt:
        return [get, slot](Ctx& c2) {
          int64_t v;
          return get(c2, v) && v > c2.prep->i64[size_t(slot)];
        };
      case CmpOp::Ge:
        return [get, slot](Ctx& c2) {
          int64_t v;
          return get(c2, v) && v >= c2.prep->i64[size_t(slot)];
        };
    }
    throw EmissionError("bad compare op");
  }

  Pred compile_filter(const FilterPred& f, AccessPath path) {
    switch (f.kind) {
      case FilterPred::Kind::Compare:
      case FilterPred::Kind::Between:
        return compile_range_like_filter(f, path);
      case FilterPred::Kind::InList:
        return compile_in_list(f, path);
      case FilterPred::Kind::Like:
        return compile_like(f, path);
    }
    throw EmissionError("bad filter");
  }

  Pred compile_range_like_filter(const FilterPred& f, AccessPath path) {
    bool simple_col = f.lhs->kind == Expr::Kind::ColumnRef &&
                      f.lhs->type.kind != TypeKind::Varchar &&
                      is_bound(*f.lo) && (!f.hi || is_bound(*f.hi));
    if (path == AccessPath::DictionaryRewrite) {
      if (f.lhs->kind != Expr::Kind::ColumnRef ||
          column(f.lhs->table_idx, f.lhs->col_idx)->enc != Encoding::Dictionary)
        throw IncompatibleStrategy("dictionary rewrite on non-dictionary column");
      return compile_dict_code_filter(f);
    }
    if (simple_col && f.lhs->type.kind != TypeKind::Varchar &&
        column(f.lhs->table_idx, f.lhs->col_idx)->enc != Encoding::Dictionary) {
      int pos = f.lhs->table_idx, col = f.lhs->col_idx;
      if (f.kind == FilterPred::Kind::Compare) return compile_cmp_col_threshold(pos, col, f.op, make_threshold(*f.lo));
      Pred a = compile_cmp_col_threshold(pos, col, CmpOp::Ge, make_threshold(*f.lo));
      Pred b = compile_cmp_col_threshold(pos, col, CmpOp::Le, make_threshold(*f.hi));
      return [a, b](Ctx& c) { return a(c) && b(c); };
    }
    if (simple_col) {
      // Dictionary-coded integer column without rewrite: decode per row.
      int pos = f.lhs->table_idx, col = f.lhs->col_idx;
      if (f.kind == FilterPred::Kind::Compare) return compile_cmp_generic(*f.lhs, f.op, *f.lo);
      Pred a = compile_cmp_generic(*f.lhs, CmpOp::Ge, *f.lo);
      Pred b = compile_cmp_generic(*f.lhs, CmpOp::Le, *f.hi);
      (void)pos;
      (void)col;
      return [a, b](Ctx& c) { return a(c) && b(c); };
    }
    if (f.kind == FilterPred::Kind::Compare) return compile_cmp_generic(*f.lhs, f.op, *f.lo);
    Pred a = compile_cmp_generic(*f.lhs, CmpOp::Ge, *f.lo);
    Pred b = compile_cmp_generic(*f.lhs, CmpOp::Le, *f.hi);
    return [a, b](Ctx& c) { return a(c) && b(c); };
  }

  static bool is_bound(const Expr& e) { return e.kind == Expr::Kind::Literal || e.kind == Expr::Kind::Param; }

  // Generic comparison over arbitrary scalar expressions with compile-time
  // scale alignment. Handles strings and doubles too.
  Pred compile_cmp_generic(const Expr& le, CmpOp op, const Expr& re) {
    ScalarExpr l = compile_scalar(le);
    ScalarExpr r = compile_scalar(re);
    if (l.kind == ScalarExpr::Kind::Str || r.kind == ScalarExpr::Kind::Str) {
      if (l.kind != r.kind) throw EmissionError("string compared with number");
      StrFn lf = l.str, rf = r.str;
      return [lf, rf, op](Ctx& c) {
        std::string_view a, b;
        if (!lf(c, a) || !rf(c, b)) return false;
        int cmp = a.compare(b);
        switch (op) {
          case CmpOp::Eq:
            return cmp == 0;
          case CmpOp::Lt:
            return cmp < 0;
          case CmpOp::Le:
            return cmp <= 0;
          case CmpOp::Gt:
            return cmp > 0;
          case CmpOp::Ge:
            return cmp >= 0;
        }
        return false;
      };
    }
    if (l.kind == ScalarExpr::Kind::Dbl || r.kind == ScalarExpr::Kind::Dbl) {
      DblFn lf = to_dbl(l), rf = to_dbl(r);
      return [lf, rf, op](Ctx& c) {
        double a, b;
        if (!lf(c, a) || !rf(c, b)) return false;
        switch (op) {
          case CmpOp::Eq:
            return a == b;
          case CmpOp::Lt:
            return a < b;
          case CmpOp::Le:
            return a <= b;
          case CmpOp::Gt:
            return a > b;
          case CmpOp::Ge:
            return a >= b;
        }
        return false;
      };
    }
    uint8_t s = std::max(l.scale, r.scale);
    int64_t lfac = pow10_i64(unsigned(s - l.scale));
    int64_t rfac = pow10_i64(unsigned(s - r.scale));
    I64Fn lf = l.i64, rf = r.i64;
    return [lf, rf, lfac, rfac, op](Ctx& c) {
      int64_t a, b;
      if (!lf(c, a) || !rf(c, b)) return false;
      a *= lfac;
      b *= rfac;
      switch (op) {
        case CmpOp::Eq:
          return a == b;
        case CmpOp::Lt:
          return a < b;
        case CmpOp::Le:
          return a <= b;
        case CmpOp::Gt:
          return a > b;
        case CmpOp::Ge:
          return a >= b;
      }
      return false;
    };
  }

  // Dictionary rewrite: compare codes against per-run code bounds.
  Pred compile_dict_code_filter(const FilterPred& f) {
    const EncodedColumn* c = column(f.lhs->table_idx, f.lhs->col_idx);
    const uint32_t* codes = c->codes.data();
    const uint8_t* valid = c->nullable ? c->valid.data() : nullptr;
    int pos = f.lhs->table_idx;
    uint8_t cs = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;

    // Boundary value at column scale -> [lo, hi) code window per run.
    auto add_bounds = [this, c, cs](const Expr& be, CmpOp op) {
      int lo_slot = alloc_i64();
      int hi_slot = alloc_i64();
      int flag = alloc_i64();
      int vslot = lower_threshold_to_scale(make_threshold(be), cs, op, flag);
      bool is_str = c->logical_type.kind == TypeKind::Varchar;
      if (is_str) {
        // String boundaries: only equality makes it here (ranges on strings
        // keep the generic path).
        if (op != CmpOp::Eq) throw IncompatibleStrategy("string range under dictionary rewrite");
        if (be.kind == Expr::Kind::Param) {
          std::string name = be.param;
          preps_.push_back([c, name, lo_slot, hi_slot](const contract::ParamBinding& b, Prepared& p) {
            auto it = b.find(name);
            if (it == b.end()) throw MissingParam(name);
            int64_t code = c->dict_code_of(it->second);
            p.i64[size_t(lo_slot)] = code < 0 ? 1 : code;
            p.i64[size_t(hi_slot)] = code < 0 ? 0 : code + 1;
          });
        } else {
          Value v = be.lit;
          preps_.push_back([c, v, lo_slot, hi_slot](const contract::ParamBinding&, Prepared& p) {
            int64_t code = c->dict_code_of(v);
            p.i64[size_t(lo_slot)] = code < 0 ? 1 : code;
            p.i64[size_t(hi_slot)] = code < 0 ? 0 : code + 1;
          });
        }
        return std::pair<int, int>{lo_slot, hi_slot};
      }
      preps_.push_back([c, op, vslot, flag, lo_slot, hi_slot](const contract::ParamBinding&, Prepared& p) {
        int64_t n = int64_t(c->dict_size());
        if (p.i64[size_t(flag)]) {  // impossible equality
          p.i64[size_t(lo_slot)] = 1;
          p.i64[size_t(hi_slot)] = 0;
          return;
        }
        // The dictionary stores scaled integers, so the integer payload
        // suffices for both decimal and int columns.
        int64_t v = p.i64[size_t(vslot)];
        int64_t b = c->dict_lower_bound(Value::from_int(v));
        int64_t eq = c->dict_code_of(Value::from_int(v));
        int64_t lo = 0, hi = n;
        switch (op) {
          case CmpOp::Eq:
            lo = eq < 0 ? 1 : eq;
            hi = eq < 0 ? 0 : eq + 1;
            break;
          case CmpOp::Lt:
            hi = b;
            break;
          case CmpOp::Le:
            hi = eq >= 0 ? eq + 1 : b;
            break;
          case CmpOp::Gt:
            lo = eq >= 0 ? eq + 1 : b;
            break;
          case CmpOp::Ge:
            lo = b;
            break;
        }
        p.i64[size_t(lo_slot)] = lo;
        p.i64[size_t(hi_slot)] = hi;
      });
      return std::pair<int, int>{lo_slot, hi_slot};
    };

    std::vector<std::pair<int, int>> windows;
    if (f.kind == FilterPred::Kind::Compare) {
      windows.push_back(add_bounds(*f.lo, f.op));
    } else {
      windows.push_back(add_bounds(*f.lo, CmpOp::Ge));
      windows.push_back(add_bounds(*f.hi, CmpOp::Le));
    }
    return [codes, valid, pos, windows](Ctx& x) {
      uint32_t r = x.rid[pos];
      if (valid && !valid[r]) return false;
      int64_t code = codes[r];
      for (auto [lo, hi] : windows)
        if (code < x.prep->i64[size_t(lo)] || code >= x.prep->i64[size_t(hi)]) return false;
      return true;
    };
  }

  Pred compile_in_list(const FilterPred& f, AccessPath path) {
    if (f.lhs->kind == Expr::Kind::ColumnRef && path == AccessPath::DictionaryRewrite) {
      const EncodedColumn* c = column(f.lhs->table_idx, f.lhs->col_idx);
      if (c->enc != Encoding::Dictionary) throw IncompatibleStrategy("dictionary rewrite on non-dictionary column");
      int pos = f.lhs->table_idx;
      const uint32_t* codes = c->codes.data();
      const uint8_t* valid = c->nullable ? c->valid.data() : nullptr;
      int list_slot = alloc_list();
      std::vector<const Expr*> items;
      for (const auto& it : f.list) items.push_back(it.get());
      // Capture literals now; params resolve per run.
      std::vector<Value> lits;
      std::vector<std::string> params;
      for (const auto* it : items) {
        if (it->kind == Expr::Kind::Literal)
          lits.push_back(it->lit);
        else
          params.push_back(it->param);
      }
      preps_.push_back([c, lits, params, list_slot](const contract::ParamBinding& b, Prepared& p) {
        auto& set = p.i64_list[size_t(list_slot)];
        set.clear();
        auto add = [&](const Value& v) {
          int64_t code = c->dict_code_of(v);
          if (code >= 0) set.push_back(code);
        };
        for (const auto& v : lits) add(v);
        for (const auto& name : params) {
          auto it = b.find(name);
          if (it == b.end()) throw MissingParam(name);
          add(it->second);
        }
        std::sort(set.begin(), set.end());
      });
      return [codes, valid, pos, list_slot](Ctx& x) {
        uint32_t r = x.rid[pos];
        if (valid && !valid[r]) return false;
        const auto& set = x.prep->i64_list[size_t(list_slot)];
        return std::binary_search(set.begin(), set.end(), int64_t(codes[r]));
      };
    }
    // Generic: compare against each item.
    std::vector<Pred> preds;
    for (const auto& item : f.list) preds.push_back(compile_cmp_generic(*f.lhs, CmpOp::Eq, *item));
    return [preds](Ctx& c) {
      for (const auto& p : preds)
        if (p(c)) return true;
      return false;
    };
  }

  Pred compile_like(const FilterPred& f, AccessPath path) {
    int pos = f.lhs->table_idx;
    const EncodedColumn* c = column(pos, f.lhs->col_idx);
    int needle_slot = alloc_str();

    // Needle extraction per run (pattern may be a parameter).
    if (f.pattern->kind == Expr::Kind::Literal) {
      std::string pat = f.pattern->lit.s;
      int slot = needle_slot;
      preps_.push_back([pat, slot](const contract::ParamBinding&, Prepared& p) {
        if (pat.size() < 2 || pat.front() != '%' || pat.back() != '%' || pat.find('%', 1) != pat.size() - 1 ||
            pat.find('_') != std::string::npos)
          throw UnsupportedFeature("LIKE pattern must be %infix%");
        p.str[size_t(slot)] = pat.substr(1, pat.size() - 2);
      });
    } else {
      std::string name = f.pattern->param;
      int slot = needle_slot;
      preps_.push_back([name, slot](const contract::ParamBinding& b, Prepared& p) {
        auto it = b.find(name);
        if (it == b.end()) throw MissingParam(name);
        const std::string& pat = it->second.s;
        if (pat.size() < 2 || pat.front() != '%' || pat.back() != '%' || pat.find('%', 1) != pat.size() - 1 ||
            pat.find('_') != std::string::npos)
          throw UnsupportedFeature("LIKE pattern must be %infix%");
        p.str[size_t(slot)] = pat.substr(1, pat.size() - 2);
      });
    }

    if (c->enc == Encoding::Dictionary) {
      // Evaluate the needle once per dictionary entry, then test codes.
      const uint32_t* codes = c->codes.data();
      const uint8_t* valid = c->nullable ? c->valid.data() : nullptr;
      int flags_slot = alloc_list();
      preps_.push_back([c, needle_slot, flags_slot](const contract::ParamBinding&, Prepared& p) {
        const std::string& needle = p.str[size_t(needle_slot)];
        auto& flags = p.i64_list[size_t(flags_slot)];
        flags.assign(c->dict_size(), 0);
        for (size_t i = 0; i < c->dict_size(); ++i)
          flags[i] = needle.empty() || c->dict_str[i].find(needle) != std::string::npos;
      });
      return [codes, valid, pos, flags_slot](Ctx& x) {
        uint32_t r = x.rid[pos];
        if (valid && !valid[r]) return false;
        return x.prep->i64_list[size_t(flags_slot)][codes[r]] != 0;
      };
    }

    if (c->enc != Encoding::StringArena) throw IncompatibleStrategy("LIKE on non-string storage");
    const uint64_t* offs = c->offsets.data();
    const char* bytes = c->bytes.data();
    const uint8_t* valid = c->nullable ? c->valid.data() : nullptr;

    if (path == AccessPath::CharMaskPrefilter) {
      const auto* alpha = tables_[size_t(pos)]->char_mask(f.lhs->column, false);
      const auto* bigram = tables_[size_t(pos)]->char_mask(f.lhs->column, true);
      if (!alpha && !bigram) throw IncompatibleStrategy("char-mask prefilter without masks on " + f.lhs->column);
      int am_slot = alloc_u64();
      int bm_slot = alloc_u64();
      preps_.push_back([needle_slot, am_slot, bm_slot](const contract::ParamBinding&, Prepared& p) {
        const std::string& needle = p.str[size_t(needle_slot)];
        p.u64[size_t(am_slot)] = planner::char_mask_of(needle, false);
        p.u64[size_t(bm_slot)] = planner::char_mask_of(needle, true);
      });
      const uint64_t* amask = alpha ? alpha->masks.data() : nullptr;
      const uint64_t* bmask = bigram ? bigram->masks.data() : nullptr;
      return [offs, bytes, valid, pos, needle_slot, am_slot, bm_slot, amask, bmask](Ctx& x) {
        uint32_t r = x.rid[pos];
        if (valid && !valid[r]) return false;
        uint64_t na = x.prep->u64[size_t(am_slot)];
        uint64_t nb = x.prep->u64[size_t(bm_slot)];
        if (amask && (na & ~amask[r]) != 0) return false;
        if (bmask && (nb & ~bmask[r]) != 0) return false;
        const std::string& needle = x.prep->str[size_t(needle_slot)];
        std::string_view row(bytes + offs[r], offs[r + 1] - offs[r]);
        return needle.empty() || row.find(needle) != std::string_view::npos;
      };
    }
    return [offs, bytes, valid, pos, needle_slot](Ctx& x) {
      uint32_t r = x.rid[pos];
      if (valid && !valid[r]) return false;
      const std::string& needle = x.prep->str[size_t(needle_slot)];
      std::string_view row(bytes + offs[r], offs[r + 1] - offs[r]);
      return needle.empty() || row.find(needle) != std::string_view::npos;
    };
  }
};

// ---------------------------------------------------------------------------
// Pipeline operators
// ---------------------------------------------------------------------------

class KernelImpl;

// One per-template pipeline: driver scan -> join steps -> sink.
struct RowSink {
  virtual ~RowSink() = default;
  virtual void begin_run(Ctx&) = 0;
  virtual void row(Ctx&) = 0;
};

struct StepOp;

struct PipelineRef {
  const std::vector<std::unique_ptr<StepOp>>* steps;
  RowSink* sink;
  inline void emit(Ctx& ctx, size_t step) const;
};

struct StepOp {
  int pos = -1;            // FROM position joined at this step
  std::string trace_name;
  int trace_slot = -1;
  std::vector<Pred> post;  // local filters, semi checks, residual equalities

  virtual ~StepOp() = default;
  virtual void prepare_run(Ctx&) {}
  virtual void run(Ctx& ctx, const PipelineRef& pipe, size_t step) = 0;

  bool post_pass(Ctx& ctx) const {
    for (const auto& p : post)
      if (!p(ctx)) return false;
    return true;
  }
};

inline void PipelineRef::emit(Ctx& ctx, size_t step) const {
  if (step == steps->size()) {
    sink->row(ctx);
    return;
  }
  StepOp* op = (*steps)[step].get();
  if (ctx.trace && op->trace_slot >= 0) {
    uint64_t t0 = now_ns();
    op->run(ctx, *this, step);
    ctx.trace->ops[size_t(op->trace_slot)].ns += now_ns() - t0;
  } else {
    op->run(ctx, *this, step);
  }
}

// --- join step operators ---

// Key pair evaluated from the already-joined prefix.
struct OuterKey {
  I64Fn get;
};

struct IndexNestedLoopOp final : StepOp {
  enum class Access { Directory, HashIndex, SortedLookup } access = Access::HashIndex;
  const planner::RangeDirectoryData* dir = nullptr;
  int parent_pos = -1;
  const planner::HashIndexData* index = nullptr;
  OuterKey key;
  // Sorted lookup state
  const EncodedColumn* sorted_col = nullptr;
  size_t rows = 0;

  void run(Ctx& ctx, const PipelineRef& pipe, size_t step) override {
    TraceReport::OpCounters* tc =
        ctx.trace && trace_slot >= 0 ? &ctx.trace->ops[size_t(trace_slot)] : nullptr;
    switch (access) {
      case Access::Directory: {
        uint32_t pr = ctx.rid[parent_pos];
        uint32_t b = dir->start[pr], e = dir->end[pr];
        for (uint32_t r = b; r < e; ++r) {
          if (tc) ++tc->iterations;
          ctx.rid[pos] = r;
          if (!post_pass(ctx)) continue;
          if (tc) ++tc->rows_out;
          pipe.emit(ctx, step + 1);
        }
        break;
      }
      case Access::HashIndex: {
        int64_t k;
        if (!key.get(ctx, k)) return;
        for (auto it = index->probe(k); !it.at_end(); it.advance()) {
          if (tc) ++tc->iterations;
          ctx.rid[pos] = uint32_t(it.row);
          if (!post_pass(ctx)) continue;
          if (tc) ++tc->rows_out;
          pipe.emit(ctx, step + 1);
        }
        break;
      }
      case Access::SortedLookup: {
        int64_t k;
        if (!key.get(ctx, k)) return;
        // Binary search over the sorted (nulls-first) key column.
        size_t lo = 0, hi = rows;
        while (lo < hi) {
          size_t mid = (lo + hi) / 2;
          if (!sorted_col->is_valid(mid) || sorted_col->value_i64(mid) < k)
            lo = mid + 1;
          else
            hi = mid;
        }
        for (size_t r = lo; r < rows && sorted_col->is_valid(r) && sorted_col->value_i64(r) == k; ++r) {
          if (tc) ++tc->iterations;
          ctx.rid[pos] = uint32_t(r);
          if (!post_pass(ctx)) continue;
          if (tc) ++tc->rows_out;
          pipe.emit(ctx, step + 1);
        }
        break;
      }
    }
  }
};

// Per-run build over the (filtered) child rows, composite key probe.
struct HashJoinOp final : StepOp {
  std::vector<I64Fn> outer_keys;
  std::vector<I64Fn> child_keys;  // evaluated with rid[pos] = child row
  std::vector<Pred> child_filters;
  size_t child_rows = 0;
  bool presized = false;

  // scratch (single-threaded use)
  mutable std::vector<int64_t> keybuf;  // nkeys per entry
  mutable std::vector<int32_t> next;
  mutable std::vector<int32_t> head;
  mutable std::vector<uint32_t> rowid;
  mutable uint64_t mask = 0;
  mutable size_t entries = 0;

  void prepare_run(Ctx& ctx) override {
    size_t nkeys = child_keys.size();
    size_t buckets = 16;
    while (buckets < child_rows * 2 + 16) buckets <<= 1;
    mask = buckets - 1;
    head.assign(buckets, -1);
    next.clear();
    rowid.clear();
    keybuf.clear();
    if (presized) {
      next.reserve(child_rows);
      rowid.reserve(child_rows);
      keybuf.reserve(child_rows * nkeys);
    }
    entries = 0;
    uint32_t saved = ctx.rid[pos];
    std::vector<int64_t> keys(nkeys);
    for (uint32_t r = 0; r < child_rows; ++r) {
      ctx.rid[pos] = r;
      bool ok = true;
      for (const auto& f : child_filters)
        if (!f(ctx)) {
          ok = false;
          break;
        }
      if (!ok) continue;
      for (size_t k = 0; k < nkeys && ok; ++k) ok = child_keys[k](ctx, keys[k]);
      if (!ok) continue;
      uint64_t h = 0xcbf29ce484222325ull;
      for (size_t k = 0; k < nkeys; ++k) h = (h ^ uint64_t(keys[k])) * 0x100000001b3ull;
      size_t b = h & mask;
      int32_t id = int32_t(entries++);
      for (size_t k = 0; k < nkeys; ++k) keybuf.push_back(keys[k]);
      rowid.push_back(r);
      next.push_back(head[b]);
      head[b] = id;
    }
    ctx.rid[pos] = saved;
  }

  void run(Ctx& ctx, const PipelineRef& pipe, size_t step) override {
    TraceReport::OpCounters* tc =
        ctx.trace && trace_slot >= 0 ? &ctx.trace->ops[size_t(trace_slot)] : nullptr;
    size_t nkeys = outer_keys.size();
    int64_t probe[4];
    for (size_t k = 0; k < nkeys; ++k)
      if (!outer_keys[k](ctx, probe[k])) return;
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t k = 0; k < nkeys; ++k) h = (h ^ uint64_t(probe[k])) * 0x100000001b3ull;
    for (int32_t id = head[h & mask]; id >= 0; id = next[size_t(id)]) {
      if (tc) ++tc->iterations;
      bool match = true;
      for (size_t k = 0; k < nkeys; ++k)
        if (keybuf[size_t(id) * nkeys + k] != probe[k]) {
          match = false;
          break;
        }
      if (!match) continue;
      ctx.rid[pos] = rowid[size_t(id)];
      if (!post_pass(ctx)) continue;
      if (tc) ++tc->rows_out;
      pipe.emit(ctx, step + 1);
    }
  }
};

// Driver sorted by the outer key; child sorted by its key column. The driver
// emits keys in non-decreasing order, so one cursor suffices.
struct SortMergeOp final : StepOp {
  OuterKey key;
  const EncodedColumn* child_col = nullptr;
  size_t child_rows = 0;

  mutable size_t cursor = 0;
  mutable int64_t run_key = 0;
  mutable size_t run_begin = 0, run_end = 0;
  mutable bool run_valid = false;

  void prepare_run(Ctx&) override {
    cursor = 0;
    while (cursor < child_rows && !child_col->is_valid(cursor)) ++cursor;  // skip nulls-first prefix
    run_valid = false;
  }

  void run(Ctx& ctx, const PipelineRef& pipe, size_t step) override {
    TraceReport::OpCounters* tc =
        ctx.trace && trace_slot >= 0 ? &ctx.trace->ops[size_t(trace_slot)] : nullptr;
    int64_t k;
    if (!key.get(ctx, k)) return;
    if (!run_valid || k > run_key) {
      while (cursor < child_rows && child_col->value_i64(cursor) < k) ++cursor;
      run_begin = cursor;
      while (cursor < child_rows && child_col->value_i64(cursor) == k) ++cursor;
      run_end = cursor;
      run_key = k;
      run_valid = true;
    } else if (k < run_key) {
      // Driver keys regressed; the spec guaranteed sortedness.
      throw IncompatibleStrategy("sort-merge driver keys not monotone");
    }
    for (size_t r = run_begin; r < run_end; ++r) {
      if (tc) ++tc->iterations;
      ctx.rid[pos] = uint32_t(r);
      if (!post_pass(ctx)) continue;
      if (tc) ++tc->rows_out;
      pipe.emit(ctx, step + 1);
    }
  }
};

// --- semi-join membership (applied as a predicate at the anchor position) ---

struct SemiOp {
  JoinOp op = JoinOp::HashJoin;
  I64Fn outer_key;
  std::vector<Pred> inner_filters;  // evaluated with rid[anchor] = inner row
  I64Fn inner_key;                  // same convention
  int anchor_pos = -1;
  size_t inner_rows = 0;
  int64_t key_min = 0;
  int64_t key_max = 0;
  std::string trace_name;
  int trace_slot = -1;

  mutable std::vector<uint64_t> bits;
  mutable std::vector<uint32_t> tag_epoch;
  mutable std::vector<int64_t> tag_key;
  mutable uint32_t epoch = 0;
  mutable uint64_t tag_mask = 0;
  mutable std::unordered_set<int64_t> set;

  void build(Ctx& ctx) {
    TraceReport::OpCounters* tc =
        ctx.trace && trace_slot >= 0 ? &ctx.trace->ops[size_t(trace_slot)] : nullptr;
    uint32_t saved = ctx.rid[anchor_pos];
    switch (op) {
      case JoinOp::BitmapSemiJoin: {
        size_t range = size_t(key_max - key_min) + 1;
        bits.assign((range + 63) / 64, 0);
        break;
      }
      case JoinOp::TagArrayJoin: {
        size_t buckets = 16;
        while (buckets < inner_rows * 2 + 16) buckets <<= 1;
        if (tag_epoch.size() != buckets) {
          tag_epoch.assign(buckets, 0);
          tag_key.assign(buckets, 0);
        }
        tag_mask = buckets - 1;
        ++epoch;
        break;
      }
      default:
        set.clear();
        break;
    }
    for (uint32_t r = 0; r < inner_rows; ++r) {
      if (tc) ++tc->iterations;
      ctx.rid[anchor_pos] = r;
      bool ok = true;
      for (const auto& f : inner_filters)
        if (!f(ctx)) {
          ok = false;
          break;
        }
      if (!ok) continue;
      int64_t k;
      if (!inner_key(ctx, k)) continue;
      if (tc) ++tc->rows_out;
      switch (op) {
        case JoinOp::BitmapSemiJoin: {
          uint64_t off = uint64_t(k - key_min);
          bits[off >> 6] |= 1ull << (off & 63);
          break;
        }
        case JoinOp::TagArrayJoin: {
          uint64_t b = (uint64_t(k) * 0x9e3779b97f4a7c15ull) & tag_mask;
          while (tag_epoch[b] == epoch && tag_key[b] != k) b = (b + 1) & tag_mask;
          tag_epoch[b] = epoch;
          tag_key[b] = k;
          break;
        }
        default:
          set.insert(k);
          break;
      }
    }
    ctx.rid[anchor_pos] = saved;
  }

  bool probe(Ctx& ctx) const {
    int64_t k;
    if (!outer_key(ctx, k)) return false;
    switch (op) {
      case JoinOp::BitmapSemiJoin: {
        if (k < key_min || k > key_max) return false;
        uint64_t off = uint64_t(k - key_min);
        return (bits[off >> 6] >> (off & 63)) & 1;
      }
      case JoinOp::TagArrayJoin: {
        uint64_t b = (uint64_t(k) * 0x9e3779b97f4a7c15ull) & tag_mask;
        while (tag_epoch[b] == epoch) {
          if (tag_key[b] == k) return true;
          b = (b + 1) & tag_mask;
        }
        return false;
      }
      default:
        return set.count(k) > 0;
    }
  }
};

// --- drivers ---

struct DriverOp {
  int pos = 0;
  std::vector<Pred> preds;  // residual per-row predicates
  bool branchless = false;
  bool unrolled = false;
  size_t rows = 0;
  std::string trace_name;
  int trace_slot = -1;

  virtual ~DriverOp() = default;
  virtual void scan(Ctx& ctx, const PipelineRef& pipe) = 0;

  inline bool pass(Ctx& ctx) const {
    if (branchless) {
      unsigned ok = 1;
      for (const auto& p : preds) ok &= unsigned(p(ctx));
      return ok != 0;
    }
    for (const auto& p : preds)
      if (!p(ctx)) return false;
    return true;
  }

  inline void touch_row(Ctx& ctx, const PipelineRef& pipe, uint32_t r, TraceReport::OpCounters* tc) {
    ctx.rid[pos] = r;
    if (tc) ++tc->iterations;
    if (!pass(ctx)) return;
    if (tc) ++tc->rows_out;
    pipe.emit(ctx, 0);
  }
};

struct FullScanDriver final : DriverOp {
  void scan(Ctx& ctx, const PipelineRef& pipe) override {
    TraceReport::OpCounters* tc =
        ctx.trace && trace_slot >= 0 ? &ctx.trace->ops[size_t(trace_slot)] : nullptr;
    uint32_t r = 0;
    if (unrolled) {
      for (; r + 4 <= rows; r += 4) {
        touch_row(ctx, pipe, r, tc);
        touch_row(ctx, pipe, r + 1, tc);
        touch_row(ctx, pipe, r + 2, tc);
        touch_row(ctx, pipe, r + 3, tc);
      }
    }
    for (; r < rows; ++r) touch_row(ctx, pipe, r, tc);
  }
};

// Bounds from range predicates on the sort column, binary-searched per run.
struct SortedRangeDriver final : DriverOp {
  const EncodedColumn* col = nullptr;
  // Per-run inclusive value bounds, from prepared slots; min/max when absent.
  std::vector<std::pair<int, CmpOp>> bound_slots;  // slot at column scale

  void scan(Ctx& ctx, const PipelineRef& pipe) override {
    TraceReport::OpCounters* tc =
        ctx.trace && trace_slot >= 0 ? &ctx.trace->ops[size_t(trace_slot)] : nullptr;
    int64_t lo = std::numeric_limits<int64_t>::min();
    int64_t hi = std::numeric_limits<int64_t>::max();
    bool empty = false;
    for (auto [slot, op] : bound_slots) {
      int64_t t = ctx.prep->i64[size_t(slot)];
      switch (op) {
        case CmpOp::Eq:
          lo = std::max(lo, t);
          hi = std::min(hi, t);
          break;
        case CmpOp::Ge:
          lo = std::max(lo, t);
          break;
        case CmpOp::Gt:
          if (t == std::numeric_limits<int64_t>::max()) empty = true;
          lo = std::max(lo, t + 1);
          break;
        case CmpOp::Le:
          hi = std::min(hi, t);
          break;
        case CmpOp::Lt:
          if (t == std::numeric_limits<int64_t>::min()) empty = true;
          hi = std::min(hi, t - 1);
          break;
      }
    }
    if (empty || lo > hi) return;
    // Null rows sort first; begin the search after them.
    size_t first_valid = 0, n = rows;
    while (first_valid < n && !col->is_valid(first_valid)) ++first_valid;
    size_t a = first_valid, b = n;
    while (a < b) {
      size_t mid = (a + b) / 2;
      if (col->value_i64(mid) < lo)
        a = mid + 1;
      else
        b = mid;
    }
    size_t begin = a;
    b = n;
    while (a < b) {
      size_t mid = (a + b) / 2;
      if (col->value_i64(mid) <= hi)
        a = mid + 1;
      else
        b = mid;
    }
    for (uint32_t r = uint32_t(begin); r < uint32_t(a); ++r) touch_row(ctx, pipe, r, tc);
  }
};

// Shard-skip scan: consult zone min/max per shard before scanning rows.
struct ZoneSkipDriver final : DriverOp {
  const planner::ZoneMapData* zone = nullptr;
  std::vector<std::pair<int, CmpOp>> bound_slots;

  void scan(Ctx& ctx, const PipelineRef& pipe) override {
    TraceReport::OpCounters* tc =
        ctx.trace && trace_slot >= 0 ? &ctx.trace->ops[size_t(trace_slot)] : nullptr;
    int64_t lo = std::numeric_limits<int64_t>::min();
    int64_t hi = std::numeric_limits<int64_t>::max();
    for (auto [slot, op] : bound_slots) {
      int64_t t = ctx.prep->i64[size_t(slot)];
      switch (op) {
        case CmpOp::Eq:
          lo = std::max(lo, t);
          hi = std::min(hi, t);
          break;
        case CmpOp::Ge:
          lo = std::max(lo, t);
          break;
        case CmpOp::Gt:
          lo = t == std::numeric_limits<int64_t>::max() ? t : std::max(lo, t + 1);
          break;
        case CmpOp::Le:
          hi = std::min(hi, t);
          break;
        case CmpOp::Lt:
          hi = t == std::numeric_limits<int64_t>::min() ? t : std::min(hi, t - 1);
          break;
      }
    }
    size_t shards = zone->mins.size();
    for (size_t sh = 0; sh < shards; ++sh) {
      if (zone->mins[sh] > hi || zone->maxs[sh] < lo) continue;  // whole shard out of range
      uint32_t begin = uint32_t(sh * zone->shard_size);
      uint32_t end = uint32_t(std::min<size_t>(rows, (sh + 1) * zone->shard_size));
      for (uint32_t r = begin; r < end; ++r) touch_row(ctx, pipe, r, tc);
    }
  }
};

// ---------------------------------------------------------------------------
// Aggregation sinks
// ---------------------------------------------------------------------------

struct AggNode {
  AggKind kind = AggKind::Count;
  bool star = false;
  ScalarExpr arg;       // unused for COUNT(*)
  ColumnType out_type;  // result type (matches the oracle)
  const Expr* node = nullptr;
};

struct AggStore {
  std::vector<__int128> isum;
  std::vector<double> fsum;
  std::vector<int64_t> cnt;
  std::vector<int64_t> mm_i;
  std::vector<std::string> mm_s;
  std::vector<uint8_t> seen;

  void ensure(size_t n) {
    if (isum.size() < n) {
      isum.resize(n);
      fsum.resize(n);
      cnt.resize(n);
      mm_i.resize(n);
      mm_s.resize(n);
      seen.resize(n);
    }
  }
  void reset(size_t g) {
    isum[g] = 0;
    fsum[g] = 0;
    cnt[g] = 0;
    mm_i[g] = 0;
    mm_s[g].clear();
    seen[g] = 0;
  }
};

struct GroupKeyCol {
  ScalarExpr read;      // value path for output
  ColumnType out_type;
  // dense path
  bool dict = false;
  const uint32_t* codes = nullptr;
  int pos = -1;
  size_t range = 0;
  int64_t min = 0;
};

// Shared aggregation core: strategy-specific group-id assignment feeding
// common per-node accumulators.
struct AggSinkBase : RowSink {
  AggStrategy strategy = AggStrategy::Scalar;
  std::vector<AggNode> nodes;
  std::vector<GroupKeyCol> keys;
  bool groupless = false;

  mutable std::vector<AggStore> stores;        // one per node
  mutable std::vector<uint32_t> group_order;   // first-touch order
  mutable std::vector<Value> group_key_values; // group * nkeys

  void begin_run(Ctx&) override {
    group_order.clear();
    group_key_values.clear();
  }

  // Resets the group's accumulator slots and records its key values (indexed
  // by gid). Callers append gid to group_order themselves.
  void init_group(Ctx& ctx, uint32_t gid) {
    for (auto& s : stores) {
      s.ensure(size_t(gid) + 1);
      s.reset(gid);
    }
    size_t nk = keys.size();
    if (group_key_values.size() < (size_t(gid) + 1) * nk) group_key_values.resize((size_t(gid) + 1) * nk);
    for (size_t ki = 0; ki < nk; ++ki) {
      auto& k = keys[ki];
      Value v;
      switch (k.read.kind) {
        case ScalarExpr::Kind::I64: {
          int64_t x;
          v = k.read.i64(ctx, x) ? value_from_i64(k.out_type, x) : Value::null();
          break;
        }
        case ScalarExpr::Kind::Str: {
          std::string_view sv;
          v = k.read.str(ctx, sv) ? Value::from_string(std::string(sv)) : Value::null();
          break;
        }
        case ScalarExpr::Kind::Dbl: {
          double d;
          v = k.read.dbl(ctx, d) ? Value::from_float(d) : Value::null();
          break;
        }
      }
      group_key_values[size_t(gid) * nk + ki] = std::move(v);
    }
  }

  inline void update(Ctx& ctx, uint32_t gid) {
    for (size_t a = 0; a < nodes.size(); ++a) {
      AggNode& n = nodes[a];
      AggStore& s = stores[a];
      switch (n.kind) {
        case AggKind::Count:
          if (n.star) {
            ++s.cnt[gid];
          } else {
            switch (n.arg.kind) {
              case ScalarExpr::Kind::I64: {
                int64_t v;
                if (n.arg.i64(ctx, v)) ++s.cnt[gid];
                break;
              }
              case ScalarExpr::Kind::Dbl: {
                double v;
                if (n.arg.dbl(ctx, v)) ++s.cnt[gid];
                break;
              }
              case ScalarExpr::Kind::Str: {
                std::string_view v;
                if (n.arg.str(ctx, v)) ++s.cnt[gid];
                break;
              }
            }
          }
          break;
        case AggKind::Sum:
        case AggKind::Avg:
          if (n.arg.kind == ScalarExpr::Kind::I64) {
            int64_t v;
            if (n.arg.i64(ctx, v)) {
              s.isum[gid] += v;
              ++s.cnt[gid];
              s.seen[gid] = 1;
            }
          } else {
            double v;
            if (n.arg.dbl(ctx, v)) {
              s.fsum[gid] += v;
              ++s.cnt[gid];
              s.seen[gid] = 1;
            }
          }
          break;
        case AggKind::Min:
        case AggKind::Max: {
          bool want_max = n.kind == AggKind::Max;
          if (n.arg.kind == ScalarExpr::Kind::Str) {
            std::string_view v;
            if (!n.arg.str(ctx, v)) break;
            if (!s.seen[gid] || (want_max ? v > s.mm_s[gid] : v < s.mm_s[gid])) s.mm_s[gid] = std::string(v);
            s.seen[gid] = 1;
          } else if (n.arg.kind == ScalarExpr::Kind::I64) {
            int64_t v;
            if (!n.arg.i64(ctx, v)) break;
            if (!s.seen[gid] || (want_max ? v > s.mm_i[gid] : v < s.mm_i[gid])) s.mm_i[gid] = v;
            s.seen[gid] = 1;
          } else {
            double v;
            if (!n.arg.dbl(ctx, v)) break;
            double cur = s.fsum[gid];
            if (!s.seen[gid] || (want_max ? v > cur : v < cur)) s.fsum[gid] = v;
            s.seen[gid] = 1;
          }
          break;
        }
      }
    }
  }

  Value node_result(size_t a, uint32_t gid) const {
    const AggNode& n = nodes[a];
    const AggStore& s = stores[a];
    switch (n.kind) {
      case AggKind::Count:
        return Value::from_int(s.cnt[gid]);
      case AggKind::Sum: {
        if (!s.seen[gid]) return Value::null();
        if (n.arg.kind == ScalarExpr::Kind::Dbl) return Value::from_float(s.fsum[gid]);
        __int128 v = s.isum[gid];
        if (v > std::numeric_limits<int64_t>::max() || v < std::numeric_limits<int64_t>::min())
          throw ArithmeticError("sum overflow");
        return value_from_i64(n.out_type, int64_t(v));
      }
      case AggKind::Avg: {
        if (!s.seen[gid]) return Value::null();
        double total = n.arg.kind == ScalarExpr::Kind::Dbl
                           ? s.fsum[gid]
                           : double(int64_t(s.isum[gid])) / double(pow10_i64(n.arg.scale));
        return Value::from_float(total / double(s.cnt[gid]));
      }
      case AggKind::Min:
      case AggKind::Max:
        if (!s.seen[gid]) return Value::null();
        if (n.arg.kind == ScalarExpr::Kind::Str) return Value::from_string(s.mm_s[gid]);
        if (n.arg.kind == ScalarExpr::Kind::Dbl) return Value::from_float(s.fsum[gid]);
        return value_from_i64(n.out_type, s.mm_i[gid]);
    }
    return Value::null();
  }
};

struct ScalarAggSink final : AggSinkBase {
  void begin_run(Ctx& ctx) override {
    AggSinkBase::begin_run(ctx);
    init_group(ctx, 0);
    group_order.push_back(0);  // groupless aggregates yield one row even on empty input
  }
  void row(Ctx& ctx) override { update(ctx, 0); }
};

// Accumulator arrays indexed by a dense composite of the key codes/values.
struct DenseKeyAggSink final : AggSinkBase {
  std::vector<size_t> strides;
  size_t capacity = 0;
  mutable std::vector<uint32_t> gid_epoch;
  mutable std::vector<uint32_t> slot_gid;
  mutable uint32_t epoch = 0;
  mutable uint32_t ngroups = 0;

  void begin_run(Ctx& ctx) override {
    AggSinkBase::begin_run(ctx);
    if (gid_epoch.size() != capacity) {
      gid_epoch.assign(capacity, 0);
      slot_gid.assign(capacity, 0);
    }
    ++epoch;
    ngroups = 0;
  }

  void row(Ctx& ctx) override {
    size_t slot = 0;
    for (size_t k = 0; k < keys.size(); ++k) {
      const GroupKeyCol& kc = keys[k];
      size_t part;
      if (kc.dict) {
        part = kc.codes[ctx.rid[kc.pos]];
      } else {
        int64_t v;
        if (!kc.read.i64(const_cast<Ctx&>(ctx), v)) return;  // null keys never occur (gated)
        part = size_t(v - kc.min);
      }
      slot += part * strides[k];
    }
    uint32_t gid;
    if (gid_epoch[slot] != epoch) {
      gid_epoch[slot] = epoch;
      gid = ngroups++;
      slot_gid[slot] = gid;
      init_group(ctx, gid);
      group_order.push_back(gid);
    } else {
      gid = slot_gid[slot];
    }
    update(ctx, gid);
  }
};

// Group id = physical rowid of the primary-key table.
struct DirectArrayAggSink final : AggSinkBase {
  int pk_pos = -1;
  size_t capacity = 0;
  mutable std::vector<uint32_t> gid_epoch;
  mutable std::vector<uint32_t> slot_gid;
  mutable uint32_t epoch = 0;
  mutable uint32_t ngroups = 0;

  void begin_run(Ctx& ctx) override {
    AggSinkBase::begin_run(ctx);
    if (gid_epoch.size() != capacity) {
      gid_epoch.assign(capacity, 0);
      slot_gid.assign(capacity, 0);
    }
    ++epoch;
    ngroups = 0;
  }

  void row(Ctx& ctx) override {
    size_t slot = ctx.rid[pk_pos];
    uint32_t gid;
    if (gid_epoch[slot] != epoch) {
      gid_epoch[slot] = epoch;
      gid = ngroups++;
      slot_gid[slot] = gid;
      init_group(ctx, gid);
      group_order.push_back(gid);
    } else {
      gid = slot_gid[slot];
    }
    update(ctx, gid);
  }
};

// Serialized-key hash map; the basic strategy that works for every key type.
struct HashGroupAggSink final : AggSinkBase {
  mutable std::unordered_map<std::string, uint32_t> map;
  mutable std::string keybuf;

  void begin_run(Ctx& ctx) override {
    AggSinkBase::begin_run(ctx);
    map.clear();
  }

  void row(Ctx& ctx) override {
    keybuf.clear();
    for (auto& k : keys) {
      if (k.read.kind == ScalarExpr::Kind::Str) {
        std::string_view sv;
        bool ok = k.read.str(ctx, sv);
        keybuf += ok ? 'v' : 'n';
        uint32_t len = uint32_t(sv.size());
        keybuf.append(reinterpret_cast<const char*>(&len), 4);
        keybuf.append(sv.data(), sv.size());
      } else {
        int64_t v = 0;
        bool ok = k.read.i64(ctx, v);
        keybuf += ok ? 'v' : 'n';
        keybuf.append(reinterpret_cast<const char*>(&v), 8);
      }
    }
    auto [it, inserted] = map.emplace(keybuf, uint32_t(map.size()));
    uint32_t gid = it->second;
    if (inserted) {
      init_group(ctx, gid);
      group_order.push_back(gid);
    }
    update(ctx, gid);
  }
};

// ---------------------------------------------------------------------------
// The kernel object
// ---------------------------------------------------------------------------

struct ProjectionRow {
  std::vector<Value> values;
};

class KernelImpl final : public InterpretedKernel {
 public:
  KernelSpec spec_;
  bool tracing_ = false;
  const BespokeStore* store_ = nullptr;
  sql::QueryAst ast_;

  Prepared proto_;
  std::vector<PrepFn> preps_;
  std::vector<Pred> const_preds_;

  std::unique_ptr<DriverOp> driver_;
  std::vector<std::unique_ptr<StepOp>> steps_;
  std::vector<SemiOp> semis_;           // built per run
  std::unique_ptr<AggSinkBase> agg_sink_;

  // Non-fused: materialize join output, aggregate in a second pass.
  bool materialize_ = false;
  mutable std::vector<std::array<uint32_t, kMaxTables>> buffer_;
  bool presized_ = false;
  size_t presize_hint_ = 0;

  // Projection-only queries.
  bool projection_ = false;
  std::vector<ValueFn> project_;

  // Two-phase grouping (over the materialized buffer).
  bool two_phase_ = false;

  std::vector<std::string> out_names_;
  std::vector<ColumnType> out_types_;
  std::vector<const Expr*> agg_nodes_;  // select-order agg nodes

  std::vector<std::string> trace_names_;

  const KernelSpec& spec() const override { return spec_; }
  bool tracing() const override { return tracing_; }

  oracle::ResultSet run(const contract::ParamBinding& binding, TraceReport* trace) const override;

  struct MaterializeSink final : RowSink {
    KernelImpl* k;
    void begin_run(Ctx&) override {
      k->buffer_.clear();
      if (k->presized_) k->buffer_.reserve(k->presize_hint_);
    }
    void row(Ctx& ctx) override {
      std::array<uint32_t, kMaxTables> t;
      std::copy(std::begin(ctx.rid), std::end(ctx.rid), t.begin());
      k->buffer_.push_back(t);
    }
  };

  struct ProjectSink final : RowSink {
    KernelImpl* k;
    std::vector<std::vector<Value>>* out = nullptr;
    void begin_run(Ctx&) override {}
    void row(Ctx& ctx) override {
      std::vector<Value> row;
      row.reserve(k->project_.size());
      for (const auto& p : k->project_) row.push_back(p(ctx));
      out->push_back(std::move(row));
    }
  };

  mutable MaterializeSink mat_sink_;
  mutable ProjectSink proj_sink_;

  void run_two_phase(Ctx& ctx, AggSinkBase* sink) const;
  Value finalize_expr(const Expr& e, AggSinkBase& sink, uint32_t gid) const;
};

// First pass extracts and sorts the composite keys; the second accumulates
// into dense positions found by binary search.
void KernelImpl::run_two_phase(Ctx& ctx, AggSinkBase* sink) const {
  size_t nk = sink->keys.size();
  auto read_key = [&](size_t ki, int64_t& out) -> bool {
    const GroupKeyCol& kc = sink->keys[ki];
    if (kc.dict) {
      out = kc.codes[ctx.rid[kc.pos]];
      return true;
    }
    return kc.read.i64(ctx, out);
  };
  std::vector<std::pair<int64_t, int64_t>> uniq;
  uniq.reserve(buffer_.size());
  for (const auto& t : buffer_) {
    std::copy(t.begin(), t.end(), std::begin(ctx.rid));
    std::pair<int64_t, int64_t> key{0, 0};
    bool ok = read_key(0, key.first);
    if (ok && nk > 1) ok = read_key(1, key.second);
    if (ok) uniq.push_back(key);
  }
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  std::vector<uint8_t> touched(uniq.size(), 0);
  for (const auto& t : buffer_) {
    std::copy(t.begin(), t.end(), std::begin(ctx.rid));
    std::pair<int64_t, int64_t> key{0, 0};
    bool ok = read_key(0, key.first);
    if (ok && nk > 1) ok = read_key(1, key.second);
    if (!ok) continue;
    uint32_t gid = uint32_t(std::lower_bound(uniq.begin(), uniq.end(), key) - uniq.begin());
    if (!touched[gid]) {
      touched[gid] = 1;
      sink->init_group(ctx, gid);
      sink->group_order.push_back(gid);
    }
    sink->update(ctx, gid);
  }
}

Value KernelImpl::finalize_expr(const Expr& e, AggSinkBase& sink, uint32_t gid) const {
  switch (e.kind) {
    case Expr::Kind::Agg: {
      for (size_t a = 0; a < agg_nodes_.size(); ++a)
        if (agg_nodes_[a] == &e) return sink.node_result(a, gid);
      throw EmissionError("unregistered aggregate node");
    }
    case Expr::Kind::ColumnRef: {
      for (size_t g = 0; g < ast_.group_by.size(); ++g)
        if (ast_.group_by[g]->table_idx == e.table_idx && ast_.group_by[g]->col_idx == e.col_idx)
          return sink.group_key_values[size_t(gid) * sink.keys.size() + g];
      throw EmissionError("select column not in GROUP BY");
    }
    case Expr::Kind::Arith:
      return value_arith(e.op, finalize_expr(*e.args[0], sink, gid), finalize_expr(*e.args[1], sink, gid));
    case Expr::Kind::Literal:
      return e.lit;
    default:
      throw EmissionError("bad select expression");
  }
}

oracle::ResultSet KernelImpl::run(const contract::ParamBinding& binding, TraceReport* trace) const {
  Prepared prep = proto_;
  prep.always_empty = false;
  for (const auto& p : preps_) p(binding, prep);

  TraceCtx tctx;
  Ctx ctx;
  ctx.prep = &prep;
  if (tracing_) {
    tctx.ops.resize(trace_names_.size());
    for (size_t i = 0; i < trace_names_.size(); ++i) tctx.ops[i].name = trace_names_[i];
    ctx.trace = &tctx;
  }

  bool empty = prep.always_empty;
  for (const auto& p : const_preds_)
    if (!p(ctx)) empty = true;

  oracle::ResultSet rs;
  rs.names = out_names_;
  rs.types = out_types_;

  PipelineRef pipe;
  pipe.steps = &steps_;

  std::vector<std::vector<Value>> proj_rows;
  KernelImpl* self = const_cast<KernelImpl*>(this);
  if (projection_) {
    self->proj_sink_.k = self;
    self->proj_sink_.out = &proj_rows;
    pipe.sink = &self->proj_sink_;
  } else if (materialize_) {
    self->mat_sink_.k = self;
    pipe.sink = &self->mat_sink_;
  } else {
    pipe.sink = self->agg_sink_.get();
  }

  if (!empty) {
    for (auto& s : self->semis_) s.build(ctx);
    for (auto& st : self->steps_) st->prepare_run(ctx);
    pipe.sink->begin_run(ctx);
    uint64_t t0 = now_ns();
    self->driver_->scan(ctx, pipe);
    if (ctx.trace && driver_->trace_slot >= 0) tctx.ops[size_t(driver_->trace_slot)].ns += now_ns() - t0;
  } else {
    pipe.sink->begin_run(ctx);
  }

  if (projection_) {
    rs.rows = std::move(proj_rows);
  } else {
    AggSinkBase* sink = self->agg_sink_.get();
    if (materialize_) {
      // Aggregate (or two-phase aggregate) over the buffered rowid tuples.
      sink->begin_run(ctx);
      if (two_phase_) {
        run_two_phase(ctx, sink);
      } else {
        for (const auto& t : buffer_) {
          std::copy(t.begin(), t.end(), std::begin(ctx.rid));
          sink->row(ctx);
        }
      }
    }
    for (uint32_t gid : sink->group_order) {
      std::vector<Value> row;
      row.reserve(ast_.select.size());
      for (const auto& item : ast_.select) row.push_back(finalize_expr(*item.expr, *sink, gid));
      rs.rows.push_back(std::move(row));
    }
  }

  if (!ast_.order_by.empty()) {
    std::stable_sort(rs.rows.begin(), rs.rows.end(), [&](const auto& a, const auto& b) {
      for (const auto& k : ast_.order_by) {
        int c = a[size_t(k.select_idx)].compare(b[size_t(k.select_idx)]);
        if (c != 0) return k.desc ? c > 0 : c < 0;
      }
      return false;
    });
  }
  if (ast_.limit && rs.rows.size() > size_t(*ast_.limit)) rs.rows.resize(size_t(*ast_.limit));

  if (trace && tracing_) {
    trace->ops = std::move(tctx.ops);
  }
  return rs;
}

// ---------------------------------------------------------------------------
// Build
// ---------------------------------------------------------------------------

struct ColMinMax {
  int64_t min = 0;
  int64_t max = 0;
  bool any = false;
};

// Two-phase grouping reuses the base accumulators; run_two_phase drives
// init/update directly and row() is never reached through the pipeline.
struct TwoPhaseAggSink final : AggSinkBase {
  void row(Ctx& ctx) override { update(ctx, 0); }
};

ColMinMax scan_min_max(const EncodedColumn& col) {
  ColMinMax mm;
  for (size_t r = 0; r < col.size(); ++r) {
    if (!col.is_valid(r)) continue;
    int64_t v = col.value_i64(r);
    if (!mm.any || v < mm.min) mm.min = v;
    if (!mm.any || v > mm.max) mm.max = v;
    mm.any = true;
  }
  return mm;
}

std::unique_ptr<KernelImpl> make_kernel(const KernelSpec& spec, const sql::QueryAst& ast,
                                        const BespokeStore& store, const contract::Contract& contract,
                                        bool tracing) {
  auto k = std::make_unique<KernelImpl>();
  k->spec_ = spec;
  k->tracing_ = tracing;
  k->store_ = &store;
  k->ast_ = ast.clone();
  const sql::QueryAst& q = k->ast_;

  Builder b(spec, q, store, contract);
  size_t n = q.from.size();

  // Join order must be a permutation with the declared driver first.
  if (spec.join_order.size() != n) throw IncompatibleStrategy("join order arity mismatch");
  {
    std::vector<bool> seen(n, false);
    for (int p : spec.join_order) {
      if (p < 0 || size_t(p) >= n || seen[size_t(p)]) throw IncompatibleStrategy("join order is not a permutation");
      seen[size_t(p)] = true;
    }
  }
  if (spec.join_ops.size() != (n == 0 ? 0 : n - 1)) throw IncompatibleStrategy("join op count mismatch");
  if (spec.semi_ops.size() != q.semis.size()) throw IncompatibleStrategy("semi op count mismatch");

  int driver_pos = spec.join_order.empty() ? 0 : spec.join_order[0];
  const StoreTable* driver_tbl = b.tables_[size_t(driver_pos)];
  const planner::TablePlan* driver_plan = store.plan.find_table(driver_tbl->name);
  std::string driver_sort =
      driver_plan && !driver_plan->sort_order.empty() ? driver_plan->sort_order.front() : "";

  // --- trace slots ---
  auto trace_slot = [&](const std::string& name) -> int {
    if (!tracing) return -1;
    k->trace_names_.push_back(name);
    return int(k->trace_names_.size()) - 1;
  };

  // --- semi-joins (built per run, probed as predicates at their anchor) ---
  std::vector<std::vector<Pred>> semi_preds(n);  // anchored probes per position
  k->semis_.resize(q.semis.size());
  for (size_t si = 0; si < q.semis.size(); ++si) {
    const sql::SemiJoin& sj = q.semis[si];
    SemiOp& op = k->semis_[si];
    op.op = spec.semi_ops[si];
    if (op.op != JoinOp::BitmapSemiJoin && op.op != JoinOp::TagArrayJoin && op.op != JoinOp::HashJoin)
      throw IncompatibleStrategy("semi-join operator must be bitmap, tag-array or hash");

    std::vector<const Expr*> cols;
    sj.outer_key->collect_columns(cols);
    if (cols.empty()) throw EmissionError("uncorrelated semi-join");
    int anchor = cols[0]->table_idx;
    op.anchor_pos = anchor;
    op.trace_name = "semi:" + sj.inner_table;
    op.trace_slot = trace_slot(op.trace_name);

    ScalarExpr outer = b.compile_scalar(*sj.outer_key);
    if (outer.kind != ScalarExpr::Kind::I64) throw IncompatibleStrategy("semi-join requires an integer key");
    op.outer_key = outer.i64;

    // Compile the inner side against the inner store table, remapped onto the
    // anchor's context slot.
    auto it = store.tables.find(sj.inner_table);
    if (it == store.tables.end()) throw EmissionError("unknown semi-join table " + sj.inner_table);
    const StoreTable* inner_tbl = &it->second;
    op.inner_rows = inner_tbl->rows;

    const StoreTable* saved = b.tables_[size_t(anchor)];
    b.tables_[size_t(anchor)] = inner_tbl;
    auto remap = [&](sql::FilterPred f) {
      struct R {
        static void walk(Expr& e, int to) {
          if (e.kind == Expr::Kind::ColumnRef) e.table_idx = to;
          for (auto& a : e.args) walk(*a, to);
        }
      };
      if (f.lhs) R::walk(*f.lhs, anchor);
      if (f.lo) R::walk(*f.lo, anchor);
      if (f.hi) R::walk(*f.hi, anchor);
      if (f.pattern) R::walk(*f.pattern, anchor);
      for (auto& i2 : f.list) R::walk(*i2, anchor);
      f.table_idx = anchor;
      return f;
    };
    for (const auto& f : sj.inner_filters) op.inner_filters.push_back(b.compile_filter(remap(f.clone()), AccessPath::FullScan));
    ScalarExpr ik = b.compile_column(anchor, sj.inner_key_col);
    b.tables_[size_t(anchor)] = saved;
    if (ik.kind != ScalarExpr::Kind::I64) throw IncompatibleStrategy("semi-join requires an integer key");
    op.inner_key = ik.i64;

    if (op.op == JoinOp::BitmapSemiJoin) {
      ColMinMax mm = scan_min_max(inner_tbl->columns[size_t(sj.inner_key_col)]);
      op.key_min = mm.any ? mm.min : 0;
      op.key_max = mm.any ? mm.max : -1;
      if (mm.any && uint64_t(mm.max - mm.min) >= (1ull << 20))
        throw IncompatibleStrategy("bitmap semi-join key range exceeds 2^20");
    }
    SemiOp* opp = &op;
    semi_preds[size_t(anchor)].push_back([opp](Ctx& c) { return opp->probe(c); });
  }

  // --- filters: partition by table, honoring access paths ---
  std::vector<std::vector<Pred>> table_preds(n);
  struct BoundUse {
    int slot;
    CmpOp op;
  };
  std::vector<BoundUse> sorted_bounds;  // on the driver sort column
  std::vector<BoundUse> zone_bounds;    // on one zone-mapped driver column
  std::string zone_col;

  for (size_t fi = 0; fi < q.filters.size(); ++fi) {
    const sql::FilterPred& f = q.filters[fi];
    AccessPath path = AccessPath::FullScan;
    auto pit = spec.filter_paths.find(int(fi));
    if (pit != spec.filter_paths.end()) path = pit->second;

    if (f.table_idx < 0) {
      k->const_preds_.push_back(b.compile_filter(f.clone(), AccessPath::FullScan));
      continue;
    }
    if (path == AccessPath::SortedRangeScan) {
      if (f.table_idx != driver_pos) throw IncompatibleStrategy("sorted range scan on a non-driver table");
      if (f.lhs->kind != Expr::Kind::ColumnRef || f.lhs->column != driver_sort)
        throw IncompatibleStrategy("sorted range scan requires the driver's sort column");
      const EncodedColumn* c = b.column(driver_pos, f.lhs->col_idx);
      if (c->enc == Encoding::StringArena || c->enc == Encoding::Dictionary)
        throw IncompatibleStrategy("sorted range scan on non-integer storage");
      uint8_t cs = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
      if (f.kind == sql::FilterPred::Kind::Compare) {
        int slot = b.lower_threshold_to_scale(b.make_threshold(*f.lo), cs, f.op, -1);
        sorted_bounds.push_back({slot, f.op});
      } else if (f.kind == sql::FilterPred::Kind::Between) {
        sorted_bounds.push_back({b.lower_threshold_to_scale(b.make_threshold(*f.lo), cs, CmpOp::Ge, -1), CmpOp::Ge});
        sorted_bounds.push_back({b.lower_threshold_to_scale(b.make_threshold(*f.hi), cs, CmpOp::Le, -1), CmpOp::Le});
      } else {
        throw IncompatibleStrategy("sorted range scan needs a range predicate");
      }
      // Range bounds are exact; no residual predicate needed.
      continue;
    }
    if (path == AccessPath::ZoneSkipScan) {
      if (f.table_idx != driver_pos) throw IncompatibleStrategy("zone-skip scan on a non-driver table");
      if (f.lhs->kind != Expr::Kind::ColumnRef) throw IncompatibleStrategy("zone-skip scan needs a plain column");
      if (!driver_tbl->zone_map(f.lhs->column)) throw IncompatibleStrategy("no zone map on " + f.lhs->column);
      if (!zone_col.empty() && zone_col != f.lhs->column)
        throw IncompatibleStrategy("zone-skip scan supports one column per kernel");
      zone_col = f.lhs->column;
      const EncodedColumn* c = b.column(driver_pos, f.lhs->col_idx);
      uint8_t cs = c->logical_type.kind == TypeKind::Decimal ? c->logical_type.scale : 0;
      if (f.kind == sql::FilterPred::Kind::Compare) {
        zone_bounds.push_back({b.lower_threshold_to_scale(b.make_threshold(*f.lo), cs, f.op, -1), f.op});
      } else if (f.kind == sql::FilterPred::Kind::Between) {
        zone_bounds.push_back({b.lower_threshold_to_scale(b.make_threshold(*f.lo), cs, CmpOp::Ge, -1), CmpOp::Ge});
        zone_bounds.push_back({b.lower_threshold_to_scale(b.make_threshold(*f.hi), cs, CmpOp::Le, -1), CmpOp::Le});
      } else {
        throw IncompatibleStrategy("zone-skip scan needs a range predicate");
      }
      // Zone pruning is only necessary, not sufficient: keep the row check.
      table_preds[size_t(f.table_idx)].push_back(b.compile_filter(f.clone(), AccessPath::FullScan));
      continue;
    }
    table_preds[size_t(f.table_idx)].push_back(b.compile_filter(f.clone(), path));
  }

  // --- driver ---
  std::unique_ptr<DriverOp> driver;
  if (!sorted_bounds.empty()) {
    auto d = std::make_unique<SortedRangeDriver>();
    int sc = driver_tbl->column_index(driver_sort);
    d->col = &driver_tbl->columns[size_t(sc)];
    for (auto& bu : sorted_bounds) d->bound_slots.push_back({bu.slot, bu.op});
    driver = std::move(d);
  } else if (!zone_bounds.empty()) {
    auto d = std::make_unique<ZoneSkipDriver>();
    d->zone = driver_tbl->zone_map(zone_col);
    for (auto& bu : zone_bounds) d->bound_slots.push_back({bu.slot, bu.op});
    driver = std::move(d);
  } else {
    driver = std::make_unique<FullScanDriver>();
  }
  driver->pos = driver_pos;
  driver->rows = driver_tbl->rows;
  driver->branchless = spec.branchless_predicates;
  driver->unrolled = spec.unrolled_inner;
  driver->preds = std::move(table_preds[size_t(driver_pos)]);
  for (auto& p : semi_preds[size_t(driver_pos)]) driver->preds.push_back(std::move(p));
  driver->trace_name = "scan:" + driver_tbl->name;
  driver->trace_slot = trace_slot(driver->trace_name);
  k->driver_ = std::move(driver);

  // --- join steps ---
  std::vector<bool> edge_used(q.joins.size(), false);
  for (size_t step = 1; step < spec.join_order.size(); ++step) {
    int pos = spec.join_order[step];
    const StoreTable* tbl = b.tables_[size_t(pos)];
    const planner::TablePlan* tplan = store.plan.find_table(tbl->name);

    struct Pair {
      int outer_pos, outer_col, inner_col;
    };
    std::vector<Pair> pairs;
    for (size_t e = 0; e < q.joins.size(); ++e) {
      if (edge_used[e]) continue;
      const auto& j = q.joins[e];
      auto in_prefix = [&](int p) {
        for (size_t s2 = 0; s2 < step; ++s2)
          if (spec.join_order[s2] == p) return true;
        return false;
      };
      if (j.left_table == pos && in_prefix(j.right_table)) {
        pairs.push_back({j.right_table, j.right_col, j.left_col});
        edge_used[e] = true;
      } else if (j.right_table == pos && in_prefix(j.left_table)) {
        pairs.push_back({j.left_table, j.left_col, j.right_col});
        edge_used[e] = true;
      }
    }

    JoinOp op = spec.join_ops[step - 1];
    std::unique_ptr<StepOp> sop;

    auto residual_pred = [&](const Pair& p) -> Pred {
      ScalarExpr outer = b.compile_column(p.outer_pos, p.outer_col);
      ScalarExpr inner = b.compile_column(pos, p.inner_col);
      I64Fn of = outer.i64, inf = inner.i64;
      if (!of || !inf) throw IncompatibleStrategy("join keys must be integers");
      return [of, inf](Ctx& c) {
        int64_t a, b2;
        return of(c, a) && inf(c, b2) && a == b2;
      };
    };

    switch (op) {
      case JoinOp::HashJoin: {
        auto h = std::make_unique<HashJoinOp>();
        h->child_rows = tbl->rows;
        h->presized = spec.presized_outputs;
        if (pairs.size() > 4) throw IncompatibleStrategy("more than 4 join keys");
        for (const auto& p : pairs) {
          ScalarExpr outer = b.compile_column(p.outer_pos, p.outer_col);
          ScalarExpr inner = b.compile_column(pos, p.inner_col);
          if (!outer.i64 || !inner.i64) throw IncompatibleStrategy("hash join keys must be integers");
          h->outer_keys.push_back(outer.i64);
          h->child_keys.push_back(inner.i64);
        }
        h->child_filters = std::move(table_preds[size_t(pos)]);
        for (auto& p : semi_preds[size_t(pos)]) h->child_filters.push_back(std::move(p));
        sop = std::move(h);
        break;
      }
      case JoinOp::IndexNestedLoop: {
        if (pairs.empty()) throw IncompatibleStrategy("index nested loop without a join key");
        auto inl = std::make_unique<IndexNestedLoopOp>();
        // Prefer the range directory, then a hash index, then sorted lookup.
        bool wired = false;
        for (const auto& p : pairs) {
          const auto* dir = tbl->directory_from(b.tables_[size_t(p.outer_pos)]->name);
          const contract::TableSchema* outer_schema = contract.find_table(b.tables_[size_t(p.outer_pos)]->name);
          if (dir && outer_schema &&
              outer_schema->column_index(outer_schema->primary_key) == p.outer_col &&
              tbl->schema[size_t(p.inner_col)].name == dir->key_column) {
            inl->access = IndexNestedLoopOp::Access::Directory;
            inl->dir = dir;
            inl->parent_pos = p.outer_pos;
            for (const auto& p2 : pairs)
              if (&p2 != &p) inl->post.push_back(residual_pred(p2));
            wired = true;
            break;
          }
        }
        if (!wired) {
          for (const auto& p : pairs) {
            const auto* idx = tbl->hash_index(tbl->schema[size_t(p.inner_col)].name);
            if (idx) {
              inl->access = IndexNestedLoopOp::Access::HashIndex;
              inl->index = idx;
              ScalarExpr outer = b.compile_column(p.outer_pos, p.outer_col);
              if (!outer.i64) throw IncompatibleStrategy("index key must be an integer");
              inl->key.get = outer.i64;
              for (const auto& p2 : pairs)
                if (&p2 != &p) inl->post.push_back(residual_pred(p2));
              wired = true;
              break;
            }
          }
        }
        if (!wired) {
          for (const auto& p : pairs) {
            if (tplan && tplan->sorted_by(tbl->schema[size_t(p.inner_col)].name)) {
              inl->access = IndexNestedLoopOp::Access::SortedLookup;
              inl->sorted_col = &tbl->columns[size_t(p.inner_col)];
              inl->rows = tbl->rows;
              ScalarExpr outer = b.compile_column(p.outer_pos, p.outer_col);
              if (!outer.i64) throw IncompatibleStrategy("index key must be an integer");
              inl->key.get = outer.i64;
              for (const auto& p2 : pairs)
                if (&p2 != &p) inl->post.push_back(residual_pred(p2));
              wired = true;
              break;
            }
          }
        }
        if (!wired)
          throw IncompatibleStrategy("no directory, hash index or sort order for index nested loop on " + tbl->name);
        sop = std::move(inl);
        break;
      }
      case JoinOp::SortMerge: {
        const Pair* match = nullptr;
        for (const auto& p : pairs) {
          if (p.outer_pos != driver_pos) continue;
          const auto& outer_name = b.tables_[size_t(driver_pos)]->schema[size_t(p.outer_col)].name;
          if (outer_name != driver_sort) continue;
          if (tplan && tplan->sorted_by(tbl->schema[size_t(p.inner_col)].name)) {
            match = &p;
            break;
          }
        }
        if (!match) throw IncompatibleStrategy("sort-merge requires both sides sorted on the join key");
        auto sm = std::make_unique<SortMergeOp>();
        ScalarExpr outer = b.compile_column(match->outer_pos, match->outer_col);
        sm->key.get = outer.i64;
        sm->child_col = &tbl->columns[size_t(match->inner_col)];
        sm->child_rows = tbl->rows;
        for (const auto& p2 : pairs)
          if (&p2 != match) sm->post.push_back(residual_pred(p2));
        sop = std::move(sm);
        break;
      }
      case JoinOp::BitmapSemiJoin:
      case JoinOp::TagArrayJoin:
        throw IncompatibleStrategy("existence-only operator used for a plain join");
    }

    sop->pos = pos;
    sop->trace_name = "join:" + tbl->name;
    sop->trace_slot = trace_slot(sop->trace_name);
    if (op != JoinOp::HashJoin) {
      for (auto& p : table_preds[size_t(pos)]) sop->post.push_back(std::move(p));
      for (auto& p : semi_preds[size_t(pos)]) sop->post.push_back(std::move(p));
    }
    k->steps_.push_back(std::move(sop));
  }

  // --- aggregation / projection ---
  bool has_agg = q.has_aggregates();
  k->out_names_.clear();
  for (const auto& item : q.select) {
    k->out_names_.push_back(item.alias);
    k->out_types_.push_back(item.expr->type);
  }

  if (!has_agg && q.group_by.empty()) {
    k->projection_ = true;
    for (const auto& item : q.select) k->project_.push_back(b.compile_value(*item.expr));
  } else {
    std::unique_ptr<AggSinkBase> sink;
    std::vector<GroupKeyCol> keys;
    for (const auto& g : q.group_by) {
      GroupKeyCol kc;
      kc.pos = g->table_idx;
      kc.read = b.compile_column(g->table_idx, g->col_idx);
      kc.out_type = kc.read.type;
      const EncodedColumn* c = b.column(g->table_idx, g->col_idx);
      if (c->enc == Encoding::Dictionary && !c->nullable) {
        kc.dict = true;
        kc.codes = c->codes.data();
        kc.range = c->dict_size();
      } else if (kc.read.kind == ScalarExpr::Kind::I64 && !c->nullable) {
        ColMinMax mm = scan_min_max(*c);
        kc.min = mm.any ? mm.min : 0;
        kc.range = mm.any ? size_t(mm.max - mm.min) + 1 : 1;
      } else {
        kc.range = 0;  // dense-ineligible
      }
      keys.push_back(std::move(kc));
    }

    switch (spec.agg) {
      case AggStrategy::Scalar: {
        if (!q.group_by.empty()) throw IncompatibleStrategy("scalar aggregation with GROUP BY");
        sink = std::make_unique<ScalarAggSink>();
        break;
      }
      case AggStrategy::DenseKeyArray: {
        auto s = std::make_unique<DenseKeyAggSink>();
        size_t cap = 1;
        for (const auto& kc : keys) {
          if (kc.range == 0)
            throw IncompatibleStrategy("dense-key aggregation needs dictionary or dense integer keys");
          cap *= kc.range;
          if (cap > (1ull << 20)) throw IncompatibleStrategy("dense-key capacity exceeds 2^20");
        }
        s->strides.resize(keys.size());
        size_t stride = 1;
        for (size_t i = keys.size(); i-- > 0;) {
          s->strides[i] = stride;
          stride *= keys[i].range;
        }
        s->capacity = cap;
        sink = std::move(s);
        break;
      }
      case AggStrategy::DirectArray: {
        if (keys.size() != 1) throw IncompatibleStrategy("direct-array aggregation needs a single key");
        const auto& g = q.group_by[0];
        const std::string& tname = q.from[size_t(g->table_idx)].table;
        const contract::TableSchema* ts = contract.find_table(tname);
        if (!ts || ts->primary_key.empty() || ts->column_index(ts->primary_key) != g->col_idx)
          throw IncompatibleStrategy("direct-array aggregation requires grouping by a primary key");
        auto s = std::make_unique<DirectArrayAggSink>();
        s->pk_pos = g->table_idx;
        s->capacity = b.tables_[size_t(g->table_idx)]->rows;
        sink = std::move(s);
        break;
      }
      case AggStrategy::HashGroup:
        sink = std::make_unique<HashGroupAggSink>();
        break;
      case AggStrategy::TwoPhase: {
        if (spec.fused) throw IncompatibleStrategy("two-phase aggregation cannot be fused");
        if (keys.empty() || keys.size() > 2) throw IncompatibleStrategy("two-phase aggregation supports 1-2 keys");
        for (const auto& kc : keys)
          if (!kc.dict && kc.read.kind != ScalarExpr::Kind::I64)
            throw IncompatibleStrategy("two-phase aggregation needs integer-typed keys");
        sink = std::make_unique<TwoPhaseAggSink>();
        k->two_phase_ = true;
        break;
      }
    }
    sink->strategy = spec.agg;
    sink->groupless = q.group_by.empty();
    sink->keys = std::move(keys);

    // Aggregate nodes in select order.
    for (const auto& item : q.select) {
      std::vector<const Expr*> nodes;
      std::function<void(const Expr&)> walk = [&](const Expr& e) {
        if (e.kind == Expr::Kind::Agg) {
          nodes.push_back(&e);
          return;
        }
        for (const auto& a : e.args) walk(*a);
      };
      walk(*item.expr);
      for (const auto* node : nodes) {
        AggNode an;
        an.kind = node->agg;
        an.star = node->star;
        an.out_type = node->type;
        an.node = node;
        if (!node->star) an.arg = b.compile_scalar(*node->args[0]);
        k->agg_nodes_.push_back(node);
        sink->nodes.push_back(std::move(an));
      }
    }
    sink->stores.resize(sink->nodes.size());

    k->agg_sink_ = std::move(sink);
    k->materialize_ = !spec.fused;
    if (k->two_phase_) k->materialize_ = true;
  }

  k->presized_ = spec.presized_outputs;
  k->presize_hint_ = driver_tbl->rows / 4 + 16;

  // Builder state moves into the kernel.
  k->proto_ = std::move(b.proto_);
  k->preps_ = std::move(b.preps_);
  return k;
}

}  // namespace

std::unique_ptr<InterpretedKernel> InterpretedKernel::build(const KernelSpec& spec, const sql::QueryAst& ast,
                                                            const planner::BespokeStore& store,
                                                            const contract::Contract& contract, bool tracing) {
  return make_kernel(spec, ast, store, contract, tracing);
}

}  // namespace bespoke::kernelgen

