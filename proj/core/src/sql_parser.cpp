#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include "bespoke/errors.hpp"
#include "bespoke/sql.hpp"

namespace bespoke::sql {

namespace {

struct Token {
  enum class Kind : uint8_t { Ident, Number, String, Param, Punct, End };
  Kind kind = Kind::End;
  std::string text;  // idents lowercased, punct verbatim
  std::string raw;
  size_t pos = 0;
};

struct Lexer {
  std::string src;
  size_t pos = 0;
  std::vector<Token> tokens;
  size_t cur = 0;

  explicit Lexer(std::string s) : src(std::move(s)) { tokenize(); }

  void tokenize() {
    while (pos < src.size()) {
      char c = src[pos];
      if (std::isspace(uint8_t(c))) {
        ++pos;
        continue;
      }
      size_t start = pos;
      if (std::isalpha(uint8_t(c)) || c == '_') {
        while (pos < src.size() && (std::isalnum(uint8_t(src[pos])) || src[pos] == '_')) ++pos;
        std::string raw = src.substr(start, pos - start);
        std::string low = raw;
        std::transform(low.begin(), low.end(), low.begin(), [](char ch) { return char(std::tolower(ch)); });
        tokens.push_back({Token::Kind::Ident, low, raw, start});
      } else if (std::isdigit(uint8_t(c))) {
        while (pos < src.size() && (std::isdigit(uint8_t(src[pos])) || src[pos] == '.')) ++pos;
        tokens.push_back({Token::Kind::Number, src.substr(start, pos - start), "", start});
      } else if (c == '\'') {
        ++pos;
        std::string text;
        while (pos < src.size()) {
          if (src[pos] == '\'' && pos + 1 < src.size() && src[pos + 1] == '\'') {
            text += '\'';
            pos += 2;
          } else if (src[pos] == '\'') {
            break;
          } else {
            text += src[pos++];
          }
        }
        if (pos >= src.size()) throw SyntaxError(0, "unterminated string literal");
        ++pos;
        tokens.push_back({Token::Kind::String, text, "", start});
      } else if (c == ':') {
        ++pos;
        size_t ns = pos;
        while (pos < src.size() && (std::isalnum(uint8_t(src[pos])) || src[pos] == '_')) ++pos;
        if (ns == pos) throw SyntaxError(0, "':' must be followed by a parameter name");
        tokens.push_back({Token::Kind::Param, src.substr(ns, pos - ns), "", start});
      } else {
        std::string p(1, c);
        ++pos;
        if ((c == '<' || c == '>') && pos < src.size() && src[pos] == '=') {
          p += '=';
          ++pos;
        }
        tokens.push_back({Token::Kind::Punct, p, "", start});
      }
    }
    tokens.push_back({Token::Kind::End, "", "", src.size()});
  }

  const Token& peek(size_t ahead = 0) const { return tokens[std::min(cur + ahead, tokens.size() - 1)]; }
  Token next() { return tokens[std::min(cur++, tokens.size() - 1)]; }
  bool accept_kw(const std::string& kw) {
    if (peek().kind == Token::Kind::Ident && peek().text == kw) {
      ++cur;
      return true;
    }
    return false;
  }
  bool accept_punct(const std::string& p) {
    if (peek().kind == Token::Kind::Punct && peek().text == p) {
      ++cur;
      return true;
    }
    return false;
  }
  void expect_punct(const std::string& p) {
    if (!accept_punct(p)) throw SyntaxError(0, "expected '" + p + "' near '" + peek().text + "'");
  }
  void expect_kw(const std::string& kw) {
    if (!accept_kw(kw)) throw SyntaxError(0, "expected " + kw + " near '" + peek().text + "'");
  }
};

bool is_keyword(const std::string& t) {
  static const std::set<std::string>* kws = new std::set<std::string>{
      "select", "from", "where",  "group", "by",   "order", "asc",   "desc", "limit", "and",
      "between", "in",   "like",  "exists", "as",   "sum",   "count", "avg",  "min",   "max",
      "join",    "inner", "on",   "date"};
  return kws->count(t) > 0;
}

struct Scope {
  const contract::Contract* schema = nullptr;
  // (alias -> (from index, table schema)); inner scope for subqueries.
  std::vector<std::pair<std::string, const contract::TableSchema*>> tables;

  int find_alias(const std::string& a) const {
    for (size_t i = 0; i < tables.size(); ++i)
      if (tables[i].first == a) return int(i);
    return -1;
  }
};

class Parser {
 public:
  Parser(const std::string& text, const contract::Contract& schema,
         std::vector<std::pair<std::string, ColumnType>>* placeholder_types)
      : lex_(text), schema_(schema), placeholder_types_(placeholder_types) {}

  // Entry for table-local expressions (derived columns): scope is the table
  // itself at position 0 plus its FK parents by table name.
  ExprPtr parse_standalone(const std::vector<std::pair<std::string, const contract::TableSchema*>>& tables) {
    scope_.schema = &schema_;
    scope_.tables = tables;
    ExprPtr e = parse_expr(scope_);
    if (lex_.peek().kind != Token::Kind::End) throw SyntaxError(0, "trailing input in expression");
    if (e->contains_param() || e->contains_agg()) throw SemanticError("expression", "must be parameter- and aggregate-free");
    return e;
  }

  QueryAst parse() {
    lex_.expect_kw("select");
    QueryAst ast;
    parse_select_list(ast);
    lex_.expect_kw("from");
    parse_from(ast);

    scope_.schema = &schema_;
    for (const auto& tr : ast.from) {
      const auto* ts = schema_.find_table(tr.table);
      if (!ts) throw SemanticError(tr.table, "unknown table");
      scope_.tables.push_back({tr.alias, ts});
    }

    size_t after_from = lex_.cur;
    for (auto [b, e] : pending_join_conds_) {
      lex_.cur = b;
      parse_conjunct(ast, scope_, &ast.joins, &ast.semis);
      if (lex_.cur != e) throw SyntaxError(0, "malformed join condition");
    }
    pending_join_conds_.clear();
    lex_.cur = after_from;

    if (lex_.accept_kw("where")) {
      do {
        parse_conjunct(ast, scope_, &ast.joins, &ast.semis);
      } while (lex_.accept_kw("and"));
    }
    resolve_select(ast);
    if (lex_.accept_kw("group")) {
      lex_.expect_kw("by");
      do {
        ExprPtr e = parse_expr(scope_);
        if (e->kind != Expr::Kind::ColumnRef) throw UnsupportedFeature("GROUP BY over non-column expression");
        ast.group_by.push_back(std::move(e));
      } while (lex_.accept_punct(","));
    }
    check_aggregation(ast);
    if (lex_.accept_kw("order")) {
      lex_.expect_kw("by");
      do {
        OrderKey k;
        k.select_idx = resolve_order_target(ast);
        if (lex_.accept_kw("desc"))
          k.desc = true;
        else
          lex_.accept_kw("asc");
        ast.order_by.push_back(k);
      } while (lex_.accept_punct(","));
    }
    if (lex_.accept_kw("limit")) {
      auto t = lex_.next();
      if (t.kind != Token::Kind::Number) throw SyntaxError(0, "LIMIT expects an integer");
      ast.limit = std::stoll(t.text);
    }
    if (lex_.peek().kind != Token::Kind::End)
      throw SyntaxError(0, "trailing input near '" + lex_.peek().text + "'");
    return ast;
  }

 private:
  Lexer lex_;
  const contract::Contract& schema_;
  std::vector<std::pair<std::string, ColumnType>>* placeholder_types_;
  Scope scope_;

  void note_param(const std::string& name, ColumnType t) {
    if (!placeholder_types_) return;
    for (auto& [n, ty] : *placeholder_types_) {
      if (n == name) {
        if (!(ty == t)) throw SemanticError(":" + name, "placeholder used at sites of different types");
        return;
      }
    }
    placeholder_types_->push_back({name, t});
  }

  void parse_select_list(QueryAst& ast) {
    do {
      SelectItem item;
      item.expr = nullptr;
      raw_selects_.push_back(capture_expr_tokens());
      if (lex_.accept_kw("as")) {
        auto t = lex_.next();
        if (t.kind != Token::Kind::Ident || is_keyword(t.text)) throw SyntaxError(0, "expected alias after AS");
        raw_aliases_.push_back(t.text);
      } else {
        raw_aliases_.push_back("");
      }
      ast.select.push_back(std::move(item));
    } while (lex_.accept_punct(","));
  }

  // Select expressions are captured as token ranges and parsed after FROM so
  // column references can resolve; the grammar keeps select items free of
  // top-level commas except inside parens.
  std::pair<size_t, size_t> capture_expr_tokens() {
    size_t begin = lex_.cur;
    int depth = 0;
    while (true) {
      const Token& t = lex_.peek();
      if (t.kind == Token::Kind::End) break;
      if (t.kind == Token::Kind::Punct) {
        if (t.text == "(") ++depth;
        if (t.text == ")") {
          if (depth == 0) break;
          --depth;
        }
        if (t.text == "," && depth == 0) break;
      }
      if (t.kind == Token::Kind::Ident && depth == 0 && (t.text == "from" || t.text == "as")) break;
      ++lex_.cur;
    }
    return {begin, lex_.cur};
  }

  std::vector<std::pair<size_t, size_t>> raw_selects_;
  std::vector<std::string> raw_aliases_;

  void resolve_select(QueryAst& ast) {
    size_t save = lex_.cur;
    for (size_t i = 0; i < ast.select.size(); ++i) {
      lex_.cur = raw_selects_[i].first;
      ast.select[i].expr = parse_expr(scope_, /*allow_agg=*/true);
      if (lex_.cur != raw_selects_[i].second) throw SyntaxError(0, "malformed select expression");
      ast.select[i].alias = !raw_aliases_[i].empty() ? raw_aliases_[i] : default_alias(*ast.select[i].expr, i);
      if (ast.select[i].expr->contains_param())
        throw SemanticError(ast.select[i].alias, "placeholders may only appear as predicate operands");
    }
    lex_.cur = save;
  }

  static std::string default_alias(const Expr& e, size_t idx) {
    if (e.kind == Expr::Kind::ColumnRef) return e.column;
    if (e.kind == Expr::Kind::Agg) {
      static const char* names[] = {"sum", "count", "avg", "min", "max"};
      return std::string(names[int(e.agg)]) + "_" + std::to_string(idx);
    }
    return "expr_" + std::to_string(idx);
  }

  void parse_from(QueryAst& ast) {
    parse_table_ref(ast);
    while (true) {
      if (lex_.accept_punct(",")) {
        parse_table_ref(ast);
      } else if (lex_.peek().kind == Token::Kind::Ident &&
                 (lex_.peek().text == "join" || lex_.peek().text == "inner")) {
        lex_.accept_kw("inner");
        lex_.expect_kw("join");
        parse_table_ref(ast);
        lex_.expect_kw("on");
        pending_join_conds_.push_back(capture_condition_tokens());
      } else {
        break;
      }
    }
  }

  // JOIN ... ON conditions are parsed with the WHERE conjuncts once the full
  // table list is known.
  std::vector<std::pair<size_t, size_t>> pending_join_conds_;

  std::pair<size_t, size_t> capture_condition_tokens() {
    size_t begin = lex_.cur;
    int depth = 0;
    while (true) {
      const Token& t = lex_.peek();
      if (t.kind == Token::Kind::End) break;
      if (t.kind == Token::Kind::Punct) {
        if (t.text == "(") ++depth;
        if (t.text == ")") --depth;
      }
      if (t.kind == Token::Kind::Ident && depth == 0 &&
          (t.text == "where" || t.text == "group" || t.text == "order" || t.text == "limit" || t.text == "join" ||
           t.text == "inner" || t.text == ","))
        break;
      if (t.kind == Token::Kind::Punct && depth == 0 && t.text == ",") break;
      ++lex_.cur;
    }
    return {begin, lex_.cur};
  }

  void parse_table_ref(QueryAst& ast) {
    auto t = lex_.next();
    if (t.kind != Token::Kind::Ident || is_keyword(t.text)) throw SyntaxError(0, "expected table name");
    TableRef tr;
    tr.table = t.text;
    tr.alias = t.text;
    if (lex_.accept_kw("as")) {
      auto a = lex_.next();
      if (a.kind != Token::Kind::Ident) throw SyntaxError(0, "expected alias");
      tr.alias = a.text;
    } else if (lex_.peek().kind == Token::Kind::Ident && !is_keyword(lex_.peek().text)) {
      tr.alias = lex_.next().text;
    }
    ast.from.push_back(tr);
  }

  void parse_conjunct(QueryAst& ast, Scope& scope, std::vector<JoinPred>* joins, std::vector<SemiJoin>* semis) {
    if (lex_.accept_kw("exists")) {
      lex_.expect_punct("(");
      if (!semis) throw UnsupportedFeature("nested EXISTS");
      semis->push_back(parse_exists_body(scope));
      lex_.expect_punct(")");
      return;
    }
    ExprPtr lhs = parse_expr(scope);
    if (lex_.accept_kw("between")) {
      FilterPred p;
      p.kind = FilterPred::Kind::Between;
      p.lhs = std::move(lhs);
      p.lo = parse_expr(scope);
      lex_.expect_kw("and");
      p.hi = parse_expr(scope);
      coerce_operand(*p.lhs, *p.lo);
      coerce_operand(*p.lhs, *p.hi);
      finish_filter(ast, std::move(p));
      return;
    }
    if (lex_.accept_kw("in")) {
      lex_.expect_punct("(");
      if (lex_.peek().kind == Token::Kind::Ident && lex_.peek().text == "select") {
        if (!semis) throw UnsupportedFeature("nested IN subquery");
        semis->push_back(parse_in_subquery_body(scope, std::move(lhs)));
        lex_.expect_punct(")");
        return;
      }
      FilterPred p;
      p.kind = FilterPred::Kind::InList;
      p.lhs = std::move(lhs);
      do {
        p.list.push_back(parse_expr(scope));
        if (p.list.back()->kind != Expr::Kind::Literal && p.list.back()->kind != Expr::Kind::Param)
          throw UnsupportedFeature("IN list items must be literals");
        coerce_operand(*p.lhs, *p.list.back());
      } while (lex_.accept_punct(","));
      lex_.expect_punct(")");
      finish_filter(ast, std::move(p));
      return;
    }
    if (lex_.accept_kw("like")) {
      FilterPred p;
      p.kind = FilterPred::Kind::Like;
      if (lhs->kind != Expr::Kind::ColumnRef || lhs->type.kind != TypeKind::Varchar)
        throw SemanticError("LIKE", "left side must be a varchar column");
      p.lhs = std::move(lhs);
      p.pattern = parse_expr(scope);
      if (p.pattern->kind == Expr::Kind::Param) {
        p.pattern->type = ColumnType::varchar();
        note_param(p.pattern->param, ColumnType::varchar());
      } else if (p.pattern->kind != Expr::Kind::Literal || p.pattern->lit.tag != Value::Tag::Str) {
        throw SemanticError("LIKE", "pattern must be a string literal or placeholder");
      }
      finish_filter(ast, std::move(p));
      return;
    }
    // comparison
    CmpOp op;
    if (lex_.accept_punct("=")) {
      op = CmpOp::Eq;
    } else if (lex_.accept_punct("<=")) {
      op = CmpOp::Le;
    } else if (lex_.accept_punct(">=")) {
      op = CmpOp::Ge;
    } else if (lex_.accept_punct("<")) {
      op = CmpOp::Lt;
    } else if (lex_.accept_punct(">")) {
      op = CmpOp::Gt;
    } else {
      throw SyntaxError(0, "expected predicate operator near '" + lex_.peek().text + "'");
    }
    ExprPtr rhs = parse_expr(scope);

    // An equality between column refs of two different tables is a join edge.
    if (op == CmpOp::Eq && lhs->kind == Expr::Kind::ColumnRef && rhs->kind == Expr::Kind::ColumnRef &&
        lhs->table_idx != rhs->table_idx) {
      if (!joins) throw UnsupportedFeature("join predicate inside subquery");
      if (!(lhs->type == rhs->type) &&
          !(lhs->type.kind != TypeKind::Varchar && rhs->type.kind != TypeKind::Varchar))
        throw SemanticError(lhs->column, "join key types do not match");
      joins->push_back({lhs->table_idx, lhs->col_idx, rhs->table_idx, rhs->col_idx});
      return;
    }
    coerce_operand(*lhs, *rhs);
    FilterPred p;
    p.kind = FilterPred::Kind::Compare;
    p.op = op;
    p.lhs = std::move(lhs);
    p.lo = std::move(rhs);
    finish_filter(ast, std::move(p));
  }

  // Assigns the filter to its single table (or -1 for constants); predicates
  // spanning two tables that are not equi-joins fall outside the subset.
  void finish_filter(QueryAst& ast, FilterPred p) {
    int t = -1;
    auto visit = [&](const Expr& e) {
      std::vector<const Expr*> cols;
      e.collect_columns(cols);
      for (const auto* c : cols) {
        if (t == -1) t = c->table_idx;
        if (t != c->table_idx) throw UnsupportedFeature("non-equi predicate across tables");
      }
    };
    visit(*p.lhs);
    if (p.lo) visit(*p.lo);
    if (p.hi) visit(*p.hi);
    for (const auto& it : p.list) visit(*it);
    p.table_idx = t;
    ast.filters.push_back(std::move(p));
  }

  // Type-coerces a predicate operand against the typed side: string literals
  // become dates in date context, params adopt the context type.
  void coerce_operand(const Expr& typed_side, Expr& other) {
    ColumnType want = typed_side.type;
    if (other.kind == Expr::Kind::Param) {
      other.type = want;
      note_param(other.param, want);
      return;
    }
    if (other.kind == Expr::Kind::Literal) {
      if (want.kind == TypeKind::Date && other.lit.tag == Value::Tag::Str) {
        auto d = parse_date(other.lit.s);
        if (!d) throw SemanticError(other.lit.s, "expected a date literal");
        other.lit = Value::from_date(*d);
        other.type = ColumnType::date();
        return;
      }
    }
    bool lnum = want.kind == TypeKind::Int64 || want.kind == TypeKind::Decimal || want.kind == TypeKind::Float64;
    bool rnum = other.type.kind == TypeKind::Int64 || other.type.kind == TypeKind::Decimal ||
                other.type.kind == TypeKind::Float64;
    if (!((lnum && rnum) || want.kind == other.type.kind))
      throw SemanticError(typed_side.kind == Expr::Kind::ColumnRef ? typed_side.column : "predicate",
                          "operand types are not comparable");
  }

  SemiJoin parse_exists_body(Scope& outer) {
    lex_.expect_kw("select");
    // The select list of an EXISTS subquery is irrelevant; accept one token
    // expression (typically the literal 1 or a column).
    capture_expr_tokens();
    lex_.expect_kw("from");
    return parse_semi_tail(outer, nullptr);
  }

  SemiJoin parse_in_subquery_body(Scope& outer, ExprPtr outer_key) {
    lex_.expect_kw("select");
    size_t col_begin = lex_.cur;
    capture_expr_tokens();
    size_t col_end = lex_.cur;
    lex_.expect_kw("from");
    SemiJoin semi = parse_semi_tail(outer, &outer_key, col_begin, col_end);
    return semi;
  }

  // FROM <table> [alias] [WHERE ...] of a semi-join subquery. For the IN form
  // the selected column (token range) is the inner key; for EXISTS the key
  // comes from the correlation conjunct.
  SemiJoin parse_semi_tail(Scope& outer, ExprPtr* outer_key, size_t col_begin = 0, size_t col_end = 0) {
    auto t = lex_.next();
    if (t.kind != Token::Kind::Ident || is_keyword(t.text)) throw SyntaxError(0, "expected subquery table");
    SemiJoin semi;
    semi.inner_table = t.text;
    semi.inner_alias = t.text;
    if (lex_.peek().kind == Token::Kind::Ident && !is_keyword(lex_.peek().text)) semi.inner_alias = lex_.next().text;
    const auto* inner_schema = schema_.find_table(semi.inner_table);
    if (!inner_schema) throw SemanticError(semi.inner_table, "unknown table in subquery");

    Scope inner;
    inner.schema = &schema_;
    inner.tables.push_back({semi.inner_alias, inner_schema});

    if (outer_key) {
      // IN form: resolve the selected column against the inner table.
      size_t save = lex_.cur;
      lex_.cur = col_begin;
      ExprPtr sel = parse_expr(inner);
      if (lex_.cur != col_end || sel->kind != Expr::Kind::ColumnRef)
        throw UnsupportedFeature("IN subquery must select a single inner column");
      lex_.cur = save;
      semi.inner_key_col = sel->col_idx;
      semi.outer_key = std::move(*outer_key);
      coerce_check_join(*semi.outer_key, *sel);
    }

    if (lex_.accept_kw("where")) {
      do {
        parse_semi_conjunct(semi, inner, outer, *inner_schema);
      } while (lex_.accept_kw("and"));
    }
    if (semi.inner_key_col < 0)
      throw UnsupportedFeature("EXISTS subquery requires one correlation equality");
    return semi;
  }

  void coerce_check_join(const Expr& a, const Expr& b) {
    bool anum = a.type.kind != TypeKind::Varchar && a.type.kind != TypeKind::Date;
    bool bnum = b.type.kind != TypeKind::Varchar && b.type.kind != TypeKind::Date;
    if (!(a.type == b.type) && !(anum && bnum))
      throw SemanticError("semi-join", "correlation key types do not match");
  }

  void parse_semi_conjunct(SemiJoin& semi, Scope& inner, Scope& outer, const contract::TableSchema& inner_schema) {
    // Try: inner.col = outer-expr correlation; otherwise a local filter.
    size_t save = lex_.cur;
    bool correlation = false;
    try {
      ExprPtr l = parse_expr(inner);
      if (lex_.accept_punct("=")) {
        ExprPtr r_try;
        size_t rsave = lex_.cur;
        bool r_is_outer = false;
        try {
          r_try = parse_expr(outer);
          r_is_outer = true;
        } catch (const Error&) {
          lex_.cur = rsave;
        }
        if (r_is_outer && l->kind == Expr::Kind::ColumnRef) {
          if (semi.inner_key_col >= 0) throw UnsupportedFeature("multiple correlation equalities");
          semi.inner_key_col = l->col_idx;
          semi.outer_key = std::move(r_try);
          coerce_check_join(*semi.outer_key, *l);
          correlation = true;
        }
      }
    } catch (const Error&) {
      correlation = false;
    }
    if (correlation) return;
    lex_.cur = save;
    // Correlation may also be written outer = inner.
    try {
      ExprPtr l = parse_expr(outer);
      if (lex_.accept_punct("=")) {
        ExprPtr r = parse_expr(inner);
        if (r->kind == Expr::Kind::ColumnRef) {
          if (semi.inner_key_col >= 0) throw UnsupportedFeature("multiple correlation equalities");
          semi.inner_key_col = r->col_idx;
          semi.outer_key = std::move(l);
          coerce_check_join(*semi.outer_key, *r);
          return;
        }
      }
    } catch (const Error&) {
    }
    lex_.cur = save;
    QueryAst scratch;
    parse_conjunct(scratch, inner, nullptr, nullptr);
    if (scratch.filters.size() != 1) throw UnsupportedFeature("subquery predicate");
    semi.inner_filters.push_back(std::move(scratch.filters[0]));
    (void)inner_schema;
  }

  int resolve_order_target(QueryAst& ast) {
    auto t = lex_.next();
    if (t.kind == Token::Kind::Number) {
      int idx = std::stoi(t.text) - 1;
      if (idx < 0 || size_t(idx) >= ast.select.size()) throw SemanticError(t.text, "ORDER BY position out of range");
      return idx;
    }
    if (t.kind != Token::Kind::Ident) throw SyntaxError(0, "expected ORDER BY target");
    std::string name = t.text;
    if (lex_.accept_punct(".")) name = lex_.next().text;  // accept qualified column
    for (size_t i = 0; i < ast.select.size(); ++i)
      if (ast.select[i].alias == name) return int(i);
    throw SemanticError(name, "ORDER BY target is not a select-list column");
  }

  // expr := term (('+'|'-') term)*
  ExprPtr parse_expr(Scope& scope, bool allow_agg = false) {
    ExprPtr lhs = parse_term(scope, allow_agg);
    while (true) {
      char op = 0;
      if (lex_.accept_punct("+"))
        op = '+';
      else if (lex_.accept_punct("-"))
        op = '-';
      else
        break;
      ExprPtr rhs = parse_term(scope, allow_agg);
      lhs = make_arith(op, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  ExprPtr parse_term(Scope& scope, bool allow_agg) {
    ExprPtr lhs = parse_factor(scope, allow_agg);
    while (true) {
      char op = 0;
      if (lex_.accept_punct("*"))
        op = '*';
      else if (lex_.accept_punct("/"))
        op = '/';
      else
        break;
      ExprPtr rhs = parse_factor(scope, allow_agg);
      lhs = make_arith(op, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  ExprPtr make_arith(char op, ExprPtr l, ExprPtr r) {
    auto e = std::make_unique<Expr>();
    e->kind = Expr::Kind::Arith;
    e->op = op;
    if (l->kind == Expr::Kind::Param || r->kind == Expr::Kind::Param)
      throw SemanticError("arithmetic", "placeholders may only appear as predicate operands");
    ColumnType lt = l->type, rt = r->type;
    auto numeric = [](ColumnType t) {
      return t.kind == TypeKind::Int64 || t.kind == TypeKind::Decimal || t.kind == TypeKind::Float64;
    };
    if (!numeric(lt) || !numeric(rt)) throw SemanticError("arithmetic", "operands must be numeric");
    if (op == '/') {
      e->type = ColumnType::float64();
    } else if (lt.kind == TypeKind::Float64 || rt.kind == TypeKind::Float64) {
      e->type = ColumnType::float64();
    } else if (op == '*') {
      unsigned s = unsigned(lt.scale) + unsigned(rt.scale);
      if (s > 9) throw SemanticError("arithmetic", "product scale exceeds 9");
      e->type = s == 0 ? ColumnType::int64() : ColumnType::decimal(uint8_t(s));
    } else {
      uint8_t s = std::max(lt.scale, rt.scale);
      e->type = s == 0 ? ColumnType::int64() : ColumnType::decimal(s);
    }
    e->args.push_back(std::move(l));
    e->args.push_back(std::move(r));
    return e;
  }

  ExprPtr parse_factor(Scope& scope, bool allow_agg) {
    const Token& t = lex_.peek();
    if (t.kind == Token::Kind::Punct && t.text == "(") {
      lex_.next();
      ExprPtr e = parse_expr(scope, allow_agg);
      lex_.expect_punct(")");
      return e;
    }
    if (t.kind == Token::Kind::Punct && t.text == "-") {
      lex_.next();
      ExprPtr inner = parse_factor(scope, allow_agg);
      if (inner->kind == Expr::Kind::Literal && inner->lit.tag == Value::Tag::Int) {
        inner->lit.i = -inner->lit.i;
        return inner;
      }
      if (inner->kind == Expr::Kind::Literal && inner->lit.tag == Value::Tag::Dec) {
        inner->lit.i = -inner->lit.i;
        return inner;
      }
      auto zero = std::make_unique<Expr>();
      zero->kind = Expr::Kind::Literal;
      zero->lit = Value::from_int(0);
      zero->type = ColumnType::int64();
      return make_arith('-', std::move(zero), std::move(inner));
    }
    if (t.kind == Token::Kind::Number) {
      lex_.next();
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Literal;
      auto dot = t.text.find('.');
      if (dot == std::string::npos) {
        e->lit = Value::from_int(std::stoll(t.text));
        e->type = ColumnType::int64();
      } else {
        uint8_t scale = uint8_t(t.text.size() - dot - 1);
        auto v = parse_decimal(t.text, scale);
        if (!v) throw SyntaxError(0, "bad numeric literal: " + t.text);
        e->lit = Value::from_decimal(*v, scale);
        e->type = ColumnType::decimal(scale);
      }
      return e;
    }
    if (t.kind == Token::Kind::String) {
      lex_.next();
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Literal;
      e->lit = Value::from_string(t.text);
      e->type = ColumnType::varchar();
      return e;
    }
    if (t.kind == Token::Kind::Param) {
      lex_.next();
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Param;
      e->param = t.text;
      return e;
    }
    if (t.kind == Token::Kind::Ident && t.text == "date") {
      lex_.next();
      auto s = lex_.next();
      if (s.kind != Token::Kind::String) throw SyntaxError(0, "DATE expects a quoted literal");
      auto d = parse_date(s.text);
      if (!d) throw SyntaxError(0, "bad date literal: " + s.text);
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Literal;
      e->lit = Value::from_date(*d);
      e->type = ColumnType::date();
      return e;
    }
    if (t.kind == Token::Kind::Ident &&
        (t.text == "sum" || t.text == "count" || t.text == "avg" || t.text == "min" || t.text == "max") &&
        lex_.peek(1).kind == Token::Kind::Punct && lex_.peek(1).text == "(") {
      if (!allow_agg) throw UnsupportedFeature("aggregate outside select list");
      std::string fn = t.text;
      lex_.next();
      lex_.expect_punct("(");
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Agg;
      e->agg = fn == "sum"     ? AggKind::Sum
               : fn == "count" ? AggKind::Count
               : fn == "avg"   ? AggKind::Avg
               : fn == "min"   ? AggKind::Min
                               : AggKind::Max;
      if (lex_.accept_punct("*")) {
        if (e->agg != AggKind::Count) throw SyntaxError(0, "only COUNT accepts *");
        e->star = true;
        e->type = ColumnType::int64();
      } else {
        ExprPtr arg = parse_expr(scope, false);
        switch (e->agg) {
          case AggKind::Count:
            e->type = ColumnType::int64();
            break;
          case AggKind::Avg:
            e->type = ColumnType::float64();
            break;
          case AggKind::Sum:
            if (arg->type.kind == TypeKind::Varchar || arg->type.kind == TypeKind::Date)
              throw SemanticError("sum", "argument must be numeric");
            e->type = arg->type;
            break;
          case AggKind::Min:
          case AggKind::Max:
            e->type = arg->type;
            break;
        }
        e->args.push_back(std::move(arg));
      }
      lex_.expect_punct(")");
      return e;
    }
    if (t.kind == Token::Kind::Ident && !is_keyword(t.text)) {
      return parse_column_ref(scope);
    }
    throw SyntaxError(0, "unexpected token '" + t.text + "'");
  }

  ExprPtr parse_column_ref(Scope& scope) {
    auto t = lex_.next();
    std::string qualifier, column;
    if (lex_.accept_punct(".")) {
      qualifier = t.text;
      auto c = lex_.next();
      if (c.kind != Token::Kind::Ident) throw SyntaxError(0, "expected column after '.'");
      column = c.text;
    } else {
      column = t.text;
    }
    auto e = std::make_unique<Expr>();
    e->kind = Expr::Kind::ColumnRef;
    e->qualifier = qualifier;
    e->column = column;
    if (!qualifier.empty()) {
      int ti = scope.find_alias(qualifier);
      if (ti < 0) throw SemanticError(qualifier + "." + column, "unknown table alias");
      int ci = scope.tables[ti].second->column_index(column);
      if (ci < 0) throw SemanticError(qualifier + "." + column, "unknown column");
      e->table_idx = ti;
      e->col_idx = ci;
      e->type = scope.tables[ti].second->columns[ci].type;
    } else {
      int found_t = -1, found_c = -1;
      for (size_t ti = 0; ti < scope.tables.size(); ++ti) {
        int ci = scope.tables[ti].second->column_index(column);
        if (ci >= 0) {
          if (found_t >= 0) throw SemanticError(column, "ambiguous column");
          found_t = int(ti);
          found_c = ci;
        }
      }
      if (found_t < 0) throw SemanticError(column, "unknown column");
      e->table_idx = found_t;
      e->col_idx = found_c;
      e->type = scope.tables[found_t].second->columns[found_c].type;
    }
    return e;
  }

  void check_aggregation(QueryAst& ast) {
    bool has_agg = ast.has_aggregates();
    if (!has_agg && ast.group_by.empty()) return;
    for (const auto& item : ast.select) {
      std::vector<const Expr*> cols;
      collect_nonagg_columns(*item.expr, cols);
      for (const auto* c : cols) {
        bool grouped = std::any_of(ast.group_by.begin(), ast.group_by.end(), [&](const ExprPtr& g) {
          return g->table_idx == c->table_idx && g->col_idx == c->col_idx;
        });
        if (!grouped) throw SemanticError(c->column, "column must appear in GROUP BY or inside an aggregate");
      }
    }
  }

  static void collect_nonagg_columns(const Expr& e, std::vector<const Expr*>& out) {
    if (e.kind == Expr::Kind::Agg) return;
    if (e.kind == Expr::Kind::ColumnRef) out.push_back(&e);
    for (const auto& a : e.args) collect_nonagg_columns(*a, out);
  }
};

}  // namespace

ExprPtr Expr::clone() const {
  auto e = std::make_unique<Expr>();
  e->kind = kind;
  e->lit = lit;
  e->qualifier = qualifier;
  e->column = column;
  e->table_idx = table_idx;
  e->col_idx = col_idx;
  e->param = param;
  e->op = op;
  e->agg = agg;
  e->star = star;
  e->type = type;
  for (const auto& a : args) e->args.push_back(a->clone());
  return e;
}

bool Expr::contains_agg() const {
  if (kind == Kind::Agg) return true;
  return std::any_of(args.begin(), args.end(), [](const ExprPtr& a) { return a->contains_agg(); });
}

bool Expr::contains_param() const {
  if (kind == Kind::Param) return true;
  return std::any_of(args.begin(), args.end(), [](const ExprPtr& a) { return a->contains_param(); });
}

void Expr::collect_columns(std::vector<const Expr*>& out) const {
  if (kind == Kind::ColumnRef) out.push_back(this);
  for (const auto& a : args) a->collect_columns(out);
}

FilterPred FilterPred::clone() const {
  FilterPred p;
  p.kind = kind;
  p.op = op;
  p.table_idx = table_idx;
  if (lhs) p.lhs = lhs->clone();
  if (lo) p.lo = lo->clone();
  if (hi) p.hi = hi->clone();
  if (pattern) p.pattern = pattern->clone();
  for (const auto& it : list) p.list.push_back(it->clone());
  return p;
}

bool QueryAst::has_aggregates() const {
  return std::any_of(select.begin(), select.end(), [](const SelectItem& s) { return s.expr->contains_agg(); });
}

QueryAst QueryAst::clone() const {
  QueryAst a;
  for (const auto& s : select) a.select.push_back({s.expr->clone(), s.alias});
  a.from = from;
  a.joins = joins;
  for (const auto& f : filters) a.filters.push_back(f.clone());
  for (const auto& s : semis) {
    SemiJoin sj;
    sj.inner_table = s.inner_table;
    sj.inner_alias = s.inner_alias;
    sj.inner_key_col = s.inner_key_col;
    sj.outer_key = s.outer_key->clone();
    for (const auto& f : s.inner_filters) sj.inner_filters.push_back(f.clone());
    a.semis.push_back(std::move(sj));
  }
  for (const auto& g : group_by) a.group_by.push_back(g->clone());
  a.order_by = order_by;
  a.limit = limit;
  return a;
}

QueryAst parse_query(const std::string& text, const contract::Contract& schema,
                     std::vector<std::pair<std::string, ColumnType>>* placeholder_types) {
  Parser p(text, schema, placeholder_types);
  return p.parse();
}

namespace {

void substitute_expr(Expr& e, const contract::ParamBinding& binding) {
  if (e.kind == Expr::Kind::Param) {
    auto it = binding.find(e.param);
    if (it == binding.end()) throw MissingParam(e.param);
    Value v = it->second;
    // Adopt the context type recorded during parsing where it matters.
    if (e.type.kind == TypeKind::Date && v.tag == Value::Tag::Str) {
      auto d = parse_date(v.s);
      if (d) v = Value::from_date(*d);
    }
    e.kind = Expr::Kind::Literal;
    e.lit = std::move(v);
    switch (e.lit.tag) {
      case Value::Tag::Int:
        e.type = ColumnType::int64();
        break;
      case Value::Tag::Dec:
        e.type = ColumnType::decimal(e.lit.scale);
        break;
      case Value::Tag::Date:
        e.type = ColumnType::date();
        break;
      case Value::Tag::Str:
        e.type = ColumnType::varchar();
        break;
      default:
        break;
    }
    return;
  }
  for (auto& a : e.args) substitute_expr(*a, binding);
}

void substitute_filter(FilterPred& f, const contract::ParamBinding& binding) {
  if (f.lhs) substitute_expr(*f.lhs, binding);
  if (f.lo) substitute_expr(*f.lo, binding);
  if (f.hi) substitute_expr(*f.hi, binding);
  if (f.pattern) substitute_expr(*f.pattern, binding);
  for (auto& it : f.list) substitute_expr(*it, binding);
}

}  // namespace

QueryAst instantiate(const QueryAst& ast, const contract::ParamBinding& binding) {
  QueryAst out = ast.clone();
  for (auto& s : out.select) substitute_expr(*s.expr, binding);
  for (auto& f : out.filters) substitute_filter(f, binding);
  for (auto& s : out.semis) {
    substitute_expr(*s.outer_key, binding);
    for (auto& f : s.inner_filters) substitute_filter(f, binding);
  }
  return out;
}

QueryAst instantiate(const contract::QueryTemplate& tmpl, const contract::Contract& schema,
                     const contract::ParamBinding& binding) {
  return instantiate(parse_query(tmpl.text, schema), binding);
}

std::string expr_to_text(const Expr& e) {
  switch (e.kind) {
    case Expr::Kind::Literal:
      if (e.lit.tag == Value::Tag::Str) return "'" + e.lit.s + "'";
      if (e.lit.tag == Value::Tag::Date) return "date '" + e.lit.to_text() + "'";
      return e.lit.to_text();
    case Expr::Kind::ColumnRef:
      return e.column;
    case Expr::Kind::Param:
      return ":" + e.param;
    case Expr::Kind::Arith:
      return "(" + expr_to_text(*e.args[0]) + " " + std::string(1, e.op) + " " + expr_to_text(*e.args[1]) + ")";
    case Expr::Kind::Agg: {
      static const char* names[] = {"sum", "count", "avg", "min", "max"};
      return std::string(names[int(e.agg)]) + "(" + (e.star ? "*" : expr_to_text(*e.args[0])) + ")";
    }
  }
  return {};
}

ExprPtr parse_table_expr(const std::string& text, const contract::Contract& schema, const std::string& table) {
  const auto* ts = schema.find_table(table);
  if (!ts) throw SemanticError(table, "unknown table");
  std::vector<std::pair<std::string, const contract::TableSchema*>> tables;
  tables.push_back({ts->name, ts});
  for (const auto& fk : ts->foreign_keys) {
    const auto* parent = schema.find_table(fk.parent_table);
    bool already = std::any_of(tables.begin(), tables.end(),
                               [&](const auto& p) { return p.first == fk.parent_table; });
    if (parent && !already) tables.push_back({fk.parent_table, parent});
  }
  Parser p(text, schema, nullptr);
  return p.parse_standalone(tables);
}

std::string substitute_text(const std::string& text, const contract::ParamBinding& binding) {
  std::string out;
  size_t i = 0;
  while (i < text.size()) {
    if (text[i] == ':' && i + 1 < text.size() && (std::isalpha(uint8_t(text[i + 1])) || text[i + 1] == '_')) {
      size_t j = i + 1;
      while (j < text.size() && (std::isalnum(uint8_t(text[j])) || text[j] == '_')) ++j;
      std::string name = text.substr(i + 1, j - i - 1);
      auto it = binding.find(name);
      if (it == binding.end()) throw MissingParam(name);
      const Value& v = it->second;
      if (v.tag == Value::Tag::Str) {
        std::string esc;
        for (char c : v.s) {
          esc += c;
          if (c == '\'') esc += '\'';
        }
        out += "'" + esc + "'";
      } else if (v.tag == Value::Tag::Date) {
        out += "date '" + v.to_text() + "'";
      } else {
        out += v.to_text();
      }
      i = j;
    } else {
      out += text[i++];
    }
  }
  return out;
}

}  // namespace bespoke::sql
