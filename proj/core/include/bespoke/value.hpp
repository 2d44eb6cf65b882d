#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace bespoke {

enum class TypeKind : uint8_t { Int64, Decimal, Date, Varchar, Float64 };

// Column type. Decimals carry an explicit scale; all other kinds ignore it.
struct ColumnType {
  TypeKind kind = TypeKind::Int64;
  uint8_t scale = 0;

  bool operator==(const ColumnType&) const = default;
  std::string to_string() const;
  static ColumnType int64() { return {TypeKind::Int64, 0}; }
  static ColumnType decimal(uint8_t scale) { return {TypeKind::Decimal, scale}; }
  static ColumnType date() { return {TypeKind::Date, 0}; }
  static ColumnType varchar() { return {TypeKind::Varchar, 0}; }
  static ColumnType float64() { return {TypeKind::Float64, 0}; }
};

ColumnType parse_column_type(const std::string& text);

// Runtime literal. Int64/Date/Decimal share the integer payload (days since
// 1970-01-01 for dates, scaled integer for decimals); Float64 only appears in
// derived results (AVG, division), never in stored columns.
struct Value {
  enum class Tag : uint8_t { Null, Int, Dec, Date, Str, Flt };

  Tag tag = Tag::Null;
  int64_t i = 0;
  uint8_t scale = 0;
  double f = 0.0;
  std::string s;

  static Value null() { return {}; }
  static Value from_int(int64_t v) { return {Tag::Int, v, 0, 0.0, {}}; }
  static Value from_decimal(int64_t scaled, uint8_t scale) { return {Tag::Dec, scaled, scale, 0.0, {}}; }
  static Value from_date(int32_t days) { return {Tag::Date, days, 0, 0.0, {}}; }
  static Value from_string(std::string v) { return {Tag::Str, 0, 0, 0.0, std::move(v)}; }
  static Value from_float(double v) { return {Tag::Flt, 0, 0, v, {}}; }

  bool is_null() const { return tag == Tag::Null; }

  // Total order with nulls first; decimals compared exactly across scales.
  // Used by canonicalization and by the oracle's sort/group machinery.
  int compare(const Value& other) const;
  bool operator==(const Value& other) const { return compare(other) == 0; }
  bool operator<(const Value& other) const { return compare(other) < 0; }

  // As written in result TSVs: \N for null, ISO dates, exact-scale decimals.
  std::string to_text() const;
  size_t hash() const;
};

struct ValueHash {
  size_t operator()(const Value& v) const { return v.hash(); }
};

// Days since 1970-01-01 <-> calendar date.
int32_t days_from_civil(int year, int month, int day);
void civil_from_days(int32_t days, int& year, int& month, int& day);
std::optional<int32_t> parse_date(const std::string& text);
std::string format_date(int32_t days);

// Exact decimal text with the given scale, e.g. (1234, 2) -> "12.34".
std::string format_decimal(int64_t scaled, uint8_t scale);
std::optional<int64_t> parse_decimal(const std::string& text, uint8_t scale);

int64_t pow10_i64(unsigned exp);

// Round to 10 significant digits; the comparison rule for derived floats.
double round_sig10(double v);

// SQL-typed arithmetic with null propagation; division always yields float64
// and division by zero yields null. Throws ArithmeticError on overflow.
Value value_arith(char op, const Value& l, const Value& r);

}  // namespace bespoke
