#include "bespoke/value.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>

#include "bespoke/errors.hpp"

namespace bespoke {

std::string ColumnType::to_string() const {
  switch (kind) {
    case TypeKind::Int64:
      return "int64";
    case TypeKind::Decimal:
      return "decimal(" + std::to_string(int(scale)) + ")";
    case TypeKind::Date:
      return "date";
    case TypeKind::Varchar:
      return "varchar";
    case TypeKind::Float64:
      return "float64";
  }
  return "?";
}

ColumnType parse_column_type(const std::string& text) {
  if (text == "int64") return ColumnType::int64();
  if (text == "date") return ColumnType::date();
  if (text == "varchar") return ColumnType::varchar();
  if (text == "float64") return ColumnType::float64();
  if (text.rfind("decimal(", 0) == 0 && text.back() == ')') {
    int scale = std::stoi(text.substr(8, text.size() - 9));
    if (scale < 0 || scale > 9) throw Error("decimal scale out of range [0,9]: " + text);
    return ColumnType::decimal(uint8_t(scale));
  }
  throw Error("unknown column type: " + text);
}

int64_t pow10_i64(unsigned exp) {
  int64_t r = 1;
  while (exp--) r *= 10;
  return r;
}

namespace {

// Numeric rank for cross-type comparison: ints, decimals, dates and floats
// all compare on the number line; strings only compare to strings.
bool is_numeric(Value::Tag t) { return t != Value::Tag::Str && t != Value::Tag::Null; }

int compare_numeric(const Value& a, const Value& b) {
  if (a.tag == Value::Tag::Flt || b.tag == Value::Tag::Flt) {
    double x = a.tag == Value::Tag::Flt ? a.f
               : a.tag == Value::Tag::Dec
                   ? double(a.i) / double(pow10_i64(a.scale))
                   : double(a.i);
    double y = b.tag == Value::Tag::Flt ? b.f
               : b.tag == Value::Tag::Dec
                   ? double(b.i) / double(pow10_i64(b.scale))
                   : double(b.i);
    return x < y ? -1 : x > y ? 1 : 0;
  }
  uint8_t sa = a.tag == Value::Tag::Dec ? a.scale : 0;
  uint8_t sb = b.tag == Value::Tag::Dec ? b.scale : 0;
  uint8_t s = std::max(sa, sb);
  __int128 x = __int128(a.i) * pow10_i64(s - sa);
  __int128 y = __int128(b.i) * pow10_i64(s - sb);
  return x < y ? -1 : x > y ? 1 : 0;
}

}  // namespace

int Value::compare(const Value& other) const {
  if (tag == Tag::Null || other.tag == Tag::Null) {
    if (tag == other.tag) return 0;
    return tag == Tag::Null ? -1 : 1;  // nulls first
  }
  if (tag == Tag::Str || other.tag == Tag::Str) {
    if (tag != Tag::Str || other.tag != Tag::Str) return tag == Tag::Str ? 1 : -1;
    return s.compare(other.s) < 0 ? -1 : s == other.s ? 0 : 1;
  }
  if (is_numeric(tag) && is_numeric(other.tag)) return compare_numeric(*this, other);
  return 0;
}

std::string Value::to_text() const {
  switch (tag) {
    case Tag::Null:
      return "\\N";
    case Tag::Int:
      return std::to_string(i);
    case Tag::Dec:
      return format_decimal(i, scale);
    case Tag::Date:
      return format_date(int32_t(i));
    case Tag::Str:
      return s;
    case Tag::Flt: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.10g", f);
      return buf;
    }
  }
  return {};
}

size_t Value::hash() const {
  switch (tag) {
    case Tag::Null:
      return 0x9e3779b97f4a7c15ull;
    case Tag::Str:
      return std::hash<std::string>{}(s);
    case Tag::Flt:
      return std::hash<double>{}(f);
    case Tag::Dec:
      // Normalize to scale 9 so equal decimals of different scales collide.
      return std::hash<int64_t>{}(i * pow10_i64(9 - scale));
    default:
      return std::hash<int64_t>{}(i * pow10_i64(9));
  }
}

int32_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = unsigned(y - era * 400);
  const unsigned doy = (153u * unsigned(m + (m > 2 ? -3 : 9)) + 2) / 5 + unsigned(d) - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return int32_t(era * 146097 + int(doe) - 719468);
}

void civil_from_days(int32_t z, int& y, int& m, int& d) {
  z += 719468;
  const int era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = unsigned(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = int(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = int(doy - (153 * mp + 2) / 5 + 1);
  m = int(mp + (mp < 10 ? 3 : -9));
  y += m <= 2;
}

std::optional<int32_t> parse_date(const std::string& text) {
  int y, m, d;
  if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
  if (std::sscanf(text.c_str(), "%d-%d-%d", &y, &m, &d) != 3) return std::nullopt;
  if (m < 1 || m > 12 || d < 1 || d > 31) return std::nullopt;
  return days_from_civil(y, m, d);
}

std::string format_date(int32_t days) {
  int y, m, d;
  civil_from_days(days, y, m, d);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", y, m, d);
  return buf;
}

std::string format_decimal(int64_t scaled, uint8_t scale) {
  if (scale == 0) return std::to_string(scaled);
  bool neg = scaled < 0;
  uint64_t mag = neg ? uint64_t(-(scaled + 1)) + 1 : uint64_t(scaled);
  uint64_t p = uint64_t(pow10_i64(scale));
  std::string frac = std::to_string(mag % p);
  frac.insert(0, scale - frac.size(), '0');
  return (neg ? "-" : "") + std::to_string(mag / p) + "." + frac;
}

std::optional<int64_t> parse_decimal(const std::string& text, uint8_t scale) {
  if (text.empty()) return std::nullopt;
  size_t pos = 0;
  bool neg = false;
  if (text[pos] == '-' || text[pos] == '+') {
    neg = text[pos] == '-';
    ++pos;
  }
  int64_t whole = 0;
  bool any = false;
  while (pos < text.size() && std::isdigit(uint8_t(text[pos]))) {
    whole = whole * 10 + (text[pos] - '0');
    ++pos;
    any = true;
  }
  int64_t frac = 0;
  unsigned digits = 0;
  if (pos < text.size() && text[pos] == '.') {
    ++pos;
    while (pos < text.size() && std::isdigit(uint8_t(text[pos]))) {
      if (digits < scale) {
        frac = frac * 10 + (text[pos] - '0');
        ++digits;
      } else if (text[pos] != '0') {
        return std::nullopt;  // more fractional digits than the declared scale
      }
      ++pos;
      any = true;
    }
  }
  if (!any || pos != text.size()) return std::nullopt;
  while (digits < scale) {
    frac *= 10;
    ++digits;
  }
  int64_t v = whole * pow10_i64(scale) + frac;
  return neg ? -v : v;
}

double round_sig10(double v) {
  if (v == 0.0 || !std::isfinite(v)) return v;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9e", v);
  return std::strtod(buf, nullptr);
}

namespace {

int64_t checked_add(int64_t a, int64_t b) {
  int64_t r;
  if (__builtin_add_overflow(a, b, &r)) throw ArithmeticError("integer overflow in +");
  return r;
}

int64_t checked_mul(int64_t a, int64_t b) {
  int64_t r;
  if (__builtin_mul_overflow(a, b, &r)) throw ArithmeticError("integer overflow in *");
  return r;
}

}  // namespace

Value value_arith(char op, const Value& l, const Value& r) {
  if (l.is_null() || r.is_null()) return Value::null();
  if (op == '/' || l.tag == Value::Tag::Flt || r.tag == Value::Tag::Flt) {
    auto as_f = [](const Value& v) {
      switch (v.tag) {
        case Value::Tag::Flt:
          return v.f;
        case Value::Tag::Dec:
          return double(v.i) / double(pow10_i64(v.scale));
        default:
          return double(v.i);
      }
    };
    double a = as_f(l), b = as_f(r);
    switch (op) {
      case '+':
        return Value::from_float(a + b);
      case '-':
        return Value::from_float(a - b);
      case '*':
        return Value::from_float(a * b);
      case '/':
        if (b == 0.0) return Value::null();
        return Value::from_float(a / b);
    }
  }
  uint8_t ls = l.tag == Value::Tag::Dec ? l.scale : 0;
  uint8_t rs = r.tag == Value::Tag::Dec ? r.scale : 0;
  if (op == '*') {
    int64_t v = checked_mul(l.i, r.i);
    uint8_t s = uint8_t(ls + rs);
    return s == 0 ? Value::from_int(v) : Value::from_decimal(v, s);
  }
  uint8_t s = std::max(ls, rs);
  int64_t a = checked_mul(l.i, pow10_i64(unsigned(s - ls)));
  int64_t b = checked_mul(r.i, pow10_i64(unsigned(s - rs)));
  int64_t v = op == '+' ? checked_add(a, b) : checked_add(a, -b);
  return s == 0 ? Value::from_int(v) : Value::from_decimal(v, s);
}

}  // namespace bespoke
