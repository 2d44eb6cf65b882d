#include "bespoke/contract.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "bespoke/errors.hpp"
#include "bespoke/sql.hpp"

namespace bespoke::contract {

const ColumnSchema* TableSchema::find_column(const std::string& n) const {
  for (const auto& c : columns)
    if (c.name == n) return &c;
  return nullptr;
}

int TableSchema::column_index(const std::string& n) const {
  for (size_t i = 0; i < columns.size(); ++i)
    if (columns[i].name == n) return int(i);
  return -1;
}

const ParamDomain* QueryTemplate::find_param(const std::string& n) const {
  for (const auto& p : params)
    if (p.name == n) return &p;
  return nullptr;
}

const TableSchema* Contract::find_table(const std::string& n) const {
  for (const auto& t : tables)
    if (t.name == n) return &t;
  return nullptr;
}

const QueryTemplate* Contract::find_template(const std::string& id) const {
  for (const auto& t : templates)
    if (t.id == id) return &t;
  return nullptr;
}

bool ParamDomain::contains(const Value& v) const {
  switch (kind) {
    case Kind::IntRange:
      return v.tag == Value::Tag::Int && v.i >= lo && v.i <= hi;
    case Kind::DateRange:
      return v.tag == Value::Tag::Date && v.i >= lo && v.i <= hi;
    case Kind::DecimalRange:
      return v.tag == Value::Tag::Dec && v.scale == scale && v.i >= lo && v.i <= hi;
    case Kind::Choice:
      return std::any_of(choices.begin(), choices.end(), [&](const Value& c) { return c == v; });
  }
  return false;
}

namespace {

struct LineReader {
  std::istringstream in;
  int line_no = 0;
  explicit LineReader(const std::string& text) : in(text) {}
  bool next(std::string& out) {
    while (std::getline(in, out)) {
      ++line_no;
      size_t a = out.find_first_not_of(" \t\r");
      if (a == std::string::npos) continue;
      size_t b = out.find_last_not_of(" \t\r");
      out = out.substr(a, b - a + 1);
      if (out.empty() || out[0] == '#') continue;
      return true;
    }
    return false;
  }
};

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

// Parses the quoted string in `sql = "..."` with \" \\ \n escapes.
std::string parse_quoted(const std::string& s, int line) {
  size_t i = s.find('"');
  if (i == std::string::npos || s.back() != '"' || s.size() < i + 2)
    throw SyntaxError(line, "expected double-quoted string");
  std::string out;
  for (size_t p = i + 1; p + 1 < s.size(); ++p) {
    char c = s[p];
    if (c == '\\' && p + 2 < s.size()) {
      char e = s[++p];
      out += e == 'n' ? '\n' : e;
    } else if (c == '"') {
      throw SyntaxError(line, "unescaped quote inside string");
    } else {
      out += c;
    }
  }
  return out;
}

// One literal inside choice(...): 'string', a date, an integer or a decimal.
Value parse_choice_literal(const std::string& raw, int line) {
  std::string s = raw;
  if (!s.empty() && s.front() == '\'' && s.back() == '\'' && s.size() >= 2)
    return Value::from_string(s.substr(1, s.size() - 2));
  if (auto d = parse_date(s)) return Value::from_date(*d);
  if (s.find('.') != std::string::npos) {
    uint8_t scale = uint8_t(s.size() - s.find('.') - 1);
    if (auto v = parse_decimal(s, scale)) return Value::from_decimal(*v, scale);
  }
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos == s.size()) return Value::from_int(v);
  } catch (...) {
  }
  throw SyntaxError(line, "bad literal in choice(): " + raw);
}

// Splits "a, 'b,c', d" on commas outside single quotes.
std::vector<std::string> split_args(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  bool q = false;
  for (char c : s) {
    if (c == '\'') q = !q;
    if (c == ',' && !q) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  for (auto& a : out) {
    size_t b = a.find_first_not_of(" \t");
    size_t e = a.find_last_not_of(" \t");
    a = b == std::string::npos ? "" : a.substr(b, e - b + 1);
  }
  return out;
}

ParamDomain parse_param_line(const std::string& rest, int line) {
  // <name> <kind>(<args>)
  size_t sp = rest.find_first_of(" \t");
  if (sp == std::string::npos) throw SyntaxError(line, "param needs a name and a domain");
  ParamDomain d;
  d.name = rest.substr(0, sp);
  std::string spec = rest.substr(sp + 1);
  size_t b = spec.find_first_not_of(" \t");
  spec = spec.substr(b == std::string::npos ? 0 : b);
  size_t open = spec.find('(');
  if (open == std::string::npos || spec.back() != ')') throw SyntaxError(line, "malformed domain: " + spec);
  std::string kind = spec.substr(0, open);
  auto args = split_args(spec.substr(open + 1, spec.size() - open - 2));
  auto want = [&](size_t n) {
    if (args.size() != n) throw SyntaxError(line, kind + " expects " + std::to_string(n) + " arguments");
  };
  if (kind == "int_range") {
    want(2);
    d.kind = ParamDomain::Kind::IntRange;
    d.lo = std::stoll(args[0]);
    d.hi = std::stoll(args[1]);
  } else if (kind == "date_range") {
    want(2);
    d.kind = ParamDomain::Kind::DateRange;
    auto lo = parse_date(args[0]), hi = parse_date(args[1]);
    if (!lo || !hi) throw SyntaxError(line, "date_range expects YYYY-MM-DD bounds");
    d.lo = *lo;
    d.hi = *hi;
  } else if (kind == "decimal_range") {
    want(3);
    d.kind = ParamDomain::Kind::DecimalRange;
    int scale = std::stoi(args[2]);
    if (scale < 0 || scale > 9) throw SyntaxError(line, "decimal scale out of range [0,9]");
    d.scale = uint8_t(scale);
    auto lo = parse_decimal(args[0], d.scale), hi = parse_decimal(args[1], d.scale);
    if (!lo || !hi) throw SyntaxError(line, "bad decimal bounds");
    d.lo = *lo;
    d.hi = *hi;
  } else if (kind == "choice") {
    d.kind = ParamDomain::Kind::Choice;
    if (args.empty()) throw SyntaxError(line, "choice() must not be empty");
    for (const auto& a : args) d.choices.push_back(parse_choice_literal(a, line));
  } else {
    throw SyntaxError(line, "unknown domain kind: " + kind);
  }
  if (d.kind != ParamDomain::Kind::Choice && d.lo > d.hi) throw SyntaxError(line, "empty range: lo > hi");
  return d;
}

void validate(Contract& c) {
  std::set<std::string> names;
  for (auto& t : c.tables) {
    if (!names.insert(t.name).second) throw SemanticError(t.name, "duplicate table name");
    std::set<std::string> cols;
    for (auto& col : t.columns)
      if (!cols.insert(col.name).second) throw SemanticError(t.name + "." + col.name, "duplicate column name");
    if (!t.primary_key.empty()) {
      const auto* pk = t.find_column(t.primary_key);
      if (!pk) throw SemanticError(t.name + "." + t.primary_key, "primary key names unknown column");
      if (pk->type.kind != TypeKind::Int64 && pk->type.kind != TypeKind::Date)
        throw SemanticError(t.name + "." + t.primary_key, "primary key must have integer or date type");
    }
    for (auto& fk : t.foreign_keys) {
      if (!t.find_column(fk.column)) throw SemanticError(t.name + "." + fk.column, "foreign key names unknown column");
      const auto* parent = c.find_table(fk.parent_table);
      if (!parent) throw SemanticError(t.name + "." + fk.column, "foreign key references unknown table " + fk.parent_table);
      if (parent->primary_key.empty() || parent->primary_key != fk.parent_column)
        throw SemanticError(t.name + "." + fk.column,
                            "foreign key must reference the primary key of " + fk.parent_table);
    }
  }
  std::set<std::string> ids;
  for (auto& tmpl : c.templates) {
    if (!ids.insert(tmpl.id).second) throw SemanticError(tmpl.id, "duplicate template id");
    std::set<std::string> pnames;
    for (auto& p : tmpl.params)
      if (!pnames.insert(p.name).second) throw SemanticError(tmpl.id + "/" + p.name, "duplicate parameter");

    std::vector<std::pair<std::string, ColumnType>> placeholders;
    sql::parse_query(tmpl.text, c, &placeholders);  // resolves names, throws SemanticError

    std::set<std::string> used;
    for (auto& [name, type] : placeholders) {
      used.insert(name);
      const auto* dom = tmpl.find_param(name);
      if (!dom) throw SemanticError(tmpl.id + "/:" + name, "placeholder has no declared domain");
      bool ok = false;
      switch (dom->kind) {
        case ParamDomain::Kind::IntRange:
          ok = type.kind == TypeKind::Int64 || type.kind == TypeKind::Decimal;
          break;
        case ParamDomain::Kind::DateRange:
          ok = type.kind == TypeKind::Date;
          break;
        case ParamDomain::Kind::DecimalRange:
          ok = type.kind == TypeKind::Decimal || type.kind == TypeKind::Int64 || type.kind == TypeKind::Float64;
          break;
        case ParamDomain::Kind::Choice:
          ok = std::all_of(dom->choices.begin(), dom->choices.end(), [&](const Value& v) {
            if (type.kind == TypeKind::Varchar) return v.tag == Value::Tag::Str;
            if (type.kind == TypeKind::Date) return v.tag == Value::Tag::Date;
            return v.tag == Value::Tag::Int || v.tag == Value::Tag::Dec;
          });
          break;
      }
      if (!ok)
        throw SemanticError(tmpl.id + "/:" + name, "domain kind does not match the placeholder's usage site");
    }
    for (auto& p : tmpl.params)
      if (!used.count(p.name)) throw SemanticError(tmpl.id + "/" + p.name, "declared parameter never used");
  }
}

}  // namespace

Contract parse_contract(const std::string& text) {
  Contract c;
  LineReader rd(text);
  std::string line;
  TableSchema* table = nullptr;
  QueryTemplate* tmpl = nullptr;
  enum class Section { None, Table, Template, Dataset, Objective, Seed } section = Section::None;

  while (rd.next(line)) {
    if (line.front() == '[') {
      if (line.back() != ']') throw SyntaxError(rd.line_no, "unterminated section header");
      auto inner = line.substr(1, line.size() - 2);
      auto toks = split_ws(inner);
      table = nullptr;
      tmpl = nullptr;
      if (toks.size() == 2 && toks[0] == "table") {
        c.tables.push_back({toks[1], {}, "", {}});
        table = &c.tables.back();
        section = Section::Table;
      } else if (toks.size() == 2 && toks[0] == "template") {
        c.templates.push_back({toks[1], "", {}});
        tmpl = &c.templates.back();
        section = Section::Template;
      } else if (toks.size() == 1 && toks[0] == "dataset") {
        section = Section::Dataset;
      } else if (toks.size() == 1 && toks[0] == "objective") {
        section = Section::Objective;
      } else if (toks.size() == 1 && toks[0] == "seed") {
        section = Section::Seed;
      } else {
        throw SyntaxError(rd.line_no, "unknown section [" + inner + "]");
      }
      continue;
    }
    switch (section) {
      case Section::Table: {
        auto toks = split_ws(line);
        if (toks.empty()) break;
        if (toks[0] == "col") {
          if (toks.size() < 3) throw SyntaxError(rd.line_no, "col <name> <type> [nullable]");
          ColumnSchema col;
          col.name = toks[1];
          try {
            col.type = parse_column_type(toks[2]);
          } catch (const Error& e) {
            throw SyntaxError(rd.line_no, e.what());
          }
          col.nullable = toks.size() > 3 && toks[3] == "nullable";
          table->columns.push_back(std::move(col));
        } else if (toks[0] == "pk" && toks.size() == 2) {
          table->primary_key = toks[1];
        } else if (toks[0] == "fk" && toks.size() == 4 && toks[2] == "->") {
          auto dot = toks[3].find('.');
          if (dot == std::string::npos) throw SyntaxError(rd.line_no, "fk target must be <table>.<column>");
          table->foreign_keys.push_back({toks[1], toks[3].substr(0, dot), toks[3].substr(dot + 1)});
        } else {
          throw SyntaxError(rd.line_no, "unknown table directive: " + toks[0]);
        }
        break;
      }
      case Section::Template: {
        if (line.rfind("sql", 0) == 0) {
          tmpl->text = parse_quoted(line, rd.line_no);
        } else if (line.rfind("param ", 0) == 0) {
          tmpl->params.push_back(parse_param_line(line.substr(6), rd.line_no));
        } else {
          throw SyntaxError(rd.line_no, "unknown template directive");
        }
        break;
      }
      case Section::Dataset: {
        auto eq = line.find('=');
        if (eq == std::string::npos || line.substr(0, eq).find("path") == std::string::npos)
          throw SyntaxError(rd.line_no, "dataset section expects: path = <dir>");
        auto v = line.substr(eq + 1);
        size_t b = v.find_first_not_of(" \t");
        c.dataset_path = b == std::string::npos ? "" : v.substr(b);
        break;
      }
      case Section::Objective: {
        if (line == "total-runtime")
          c.objective = Objective::TotalRuntime;
        else if (line == "per-query-median")
          c.objective = Objective::PerQueryMedian;
        else
          throw SyntaxError(rd.line_no, "objective must be total-runtime or per-query-median");
        break;
      }
      case Section::Seed:
        try {
          c.seed = std::stoull(line);
        } catch (...) {
          throw SyntaxError(rd.line_no, "seed must be an unsigned integer");
        }
        break;
      case Section::None:
        throw SyntaxError(rd.line_no, "content before first section");
    }
  }
  validate(c);
  return c;
}

namespace {

std::string domain_to_string(const ParamDomain& d) {
  switch (d.kind) {
    case ParamDomain::Kind::IntRange:
      return "int_range(" + std::to_string(d.lo) + ", " + std::to_string(d.hi) + ")";
    case ParamDomain::Kind::DateRange:
      return "date_range(" + format_date(int32_t(d.lo)) + ", " + format_date(int32_t(d.hi)) + ")";
    case ParamDomain::Kind::DecimalRange:
      return "decimal_range(" + format_decimal(d.lo, d.scale) + ", " + format_decimal(d.hi, d.scale) + ", " +
             std::to_string(int(d.scale)) + ")";
    case ParamDomain::Kind::Choice: {
      std::string out = "choice(";
      for (size_t i = 0; i < d.choices.size(); ++i) {
        if (i) out += ", ";
        const Value& v = d.choices[i];
        out += v.tag == Value::Tag::Str ? "'" + v.s + "'" : v.to_text();
      }
      return out + ")";
    }
  }
  return {};
}

std::string escape_quoted(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    if (ch == '\n') {
      out += "\\n";
      continue;
    }
    out += ch;
  }
  return out;
}

}  // namespace

std::string print_contract(const Contract& c) {
  std::ostringstream out;
  for (const auto& t : c.tables) {
    out << "[table " << t.name << "]\n";
    for (const auto& col : t.columns)
      out << "col " << col.name << " " << col.type.to_string() << (col.nullable ? " nullable" : "") << "\n";
    if (!t.primary_key.empty()) out << "pk " << t.primary_key << "\n";
    for (const auto& fk : t.foreign_keys)
      out << "fk " << fk.column << " -> " << fk.parent_table << "." << fk.parent_column << "\n";
    out << "\n";
  }
  for (const auto& tmpl : c.templates) {
    out << "[template " << tmpl.id << "]\n";
    out << "sql = \"" << escape_quoted(tmpl.text) << "\"\n";
    for (const auto& p : tmpl.params) out << "param " << p.name << " " << domain_to_string(p) << "\n";
    out << "\n";
  }
  out << "[dataset]\npath = " << c.dataset_path << "\n\n";
  out << "[objective]\n" << (c.objective == Objective::TotalRuntime ? "total-runtime" : "per-query-median") << "\n\n";
  out << "[seed]\n" << c.seed << "\n";
  return out.str();
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

uint64_t hash_str(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (char c : s) h = (h ^ uint8_t(c)) * 1099511628211ull;
  return h;
}

// Unbiased draw in [0, n); stable across standard library versions.
uint64_t uniform_u64(std::mt19937_64& rng, uint64_t n) {
  if (n == 0) return 0;
  uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
  uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace

std::vector<ParamBinding> sample_bindings(const QueryTemplate& tmpl, size_t n, uint64_t seed) {
  std::vector<ParamBinding> out(n);
  for (const auto& dom : tmpl.params) {
    std::mt19937_64 rng(mix64(seed ^ hash_str(tmpl.id) * 3 ^ hash_str(dom.name)));
    uint64_t span = dom.kind == ParamDomain::Kind::Choice ? dom.choices.size() : uint64_t(dom.hi - dom.lo) + 1;
    bool want_distinct =
        (dom.kind == ParamDomain::Kind::IntRange || dom.kind == ParamDomain::Kind::DateRange) && span >= n;
    std::set<uint64_t> seen;
    for (size_t i = 0; i < n; ++i) {
      uint64_t draw = uniform_u64(rng, span);
      while (want_distinct && seen.count(draw)) draw = uniform_u64(rng, span);
      seen.insert(draw);
      Value v;
      switch (dom.kind) {
        case ParamDomain::Kind::IntRange:
          v = Value::from_int(dom.lo + int64_t(draw));
          break;
        case ParamDomain::Kind::DateRange:
          v = Value::from_date(int32_t(dom.lo + int64_t(draw)));
          break;
        case ParamDomain::Kind::DecimalRange:
          v = Value::from_decimal(dom.lo + int64_t(draw), dom.scale);
          break;
        case ParamDomain::Kind::Choice:
          v = dom.choices[draw];
          break;
      }
      out[i][dom.name] = std::move(v);
    }
  }
  return out;
}

}  // namespace bespoke::contract
