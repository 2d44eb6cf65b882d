#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bespoke {

// Base class for all engine errors. Subclasses carry the structured fields
// callers match on; what() always renders a printable message.
class Error : public std::runtime_error {
 public:
  explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
};

class SyntaxError : public Error {
 public:
  SyntaxError(int line, std::string message)
      : Error("syntax error at line " + std::to_string(line) + ": " + message),
        line(line),
        message(std::move(message)) {}
  int line;
  std::string message;
};

class SemanticError : public Error {
 public:
  SemanticError(std::string path, std::string message)
      : Error("semantic error at " + path + ": " + message), path(std::move(path)), message(std::move(message)) {}
  std::string path;
  std::string message;
};

class MissingParam : public Error {
 public:
  explicit MissingParam(std::string name) : Error("missing parameter :" + name), name(std::move(name)) {}
  std::string name;
};

class MissingFile : public Error {
 public:
  explicit MissingFile(std::string table) : Error("missing data file for table " + table), table(std::move(table)) {}
  std::string table;
};

class TypeError : public Error {
 public:
  TypeError(std::string table, std::string column, int64_t row, std::string detail)
      : Error("type error in " + table + "." + column + " at row " + std::to_string(row) + ": " + detail),
        table(std::move(table)),
        column(std::move(column)),
        row(row) {}
  std::string table;
  std::string column;
  int64_t row;
};

class ForeignKeyViolation : public Error {
 public:
  ForeignKeyViolation(std::string table, std::string column, int64_t row)
      : Error("foreign key violation in " + table + "." + column + " at row " + std::to_string(row)),
        table(std::move(table)),
        column(std::move(column)),
        row(row) {}
  std::string table;
  std::string column;
  int64_t row;
};

class DanglingReference : public Error {
 public:
  explicit DanglingReference(std::string detail) : Error("dangling reference: " + detail) {}
};

class UnsupportedFeature : public Error {
 public:
  explicit UnsupportedFeature(std::string node) : Error("unsupported feature: " + node), node(std::move(node)) {}
  std::string node;
};

class ArithmeticError : public Error {
 public:
  explicit ArithmeticError(std::string detail) : Error("arithmetic error: " + detail) {}
};

class EncodingOverflow : public Error {
 public:
  explicit EncodingOverflow(std::string detail) : Error("encoding overflow: " + detail) {}
};

class CorruptStore : public Error {
 public:
  explicit CorruptStore(std::string detail) : Error("corrupt store: " + detail) {}
};

class IncompatibleStrategy : public Error {
 public:
  explicit IncompatibleStrategy(std::string detail) : Error("incompatible strategy: " + detail) {}
};

class EmissionError : public Error {
 public:
  explicit EmissionError(std::string detail) : Error("emission error: " + detail) {}
};

class ToolchainMissing : public Error {
 public:
  ToolchainMissing() : Error("no usable C++ toolchain found") {}
};

struct CompileDiagnostic {
  std::string file;
  int line = 0;
  std::string message;
};

class CompileErrors : public Error {
 public:
  explicit CompileErrors(std::vector<CompileDiagnostic> diags)
      : Error("compilation failed with " + std::to_string(diags.size()) + " diagnostic(s)" +
              (diags.empty() ? "" : ": " + diags.front().file + ":" + std::to_string(diags.front().line) + ": " +
                                        diags.front().message)),
        diagnostics(std::move(diags)) {}
  std::vector<CompileDiagnostic> diagnostics;
};

class SymbolMissing : public Error {
 public:
  explicit SymbolMissing(std::string symbol) : Error("entry symbol not found: " + symbol), symbol(std::move(symbol)) {}
  std::string symbol;
};

class AbiMismatch : public Error {
 public:
  AbiMismatch(uint64_t expected, uint64_t actual)
      : Error("kernel ABI signature mismatch: expected " + std::to_string(expected) + ", got " +
              std::to_string(actual)),
        expected(expected),
        actual(actual) {}
  uint64_t expected;
  uint64_t actual;
};

class NoKernel : public Error {
 public:
  explicit NoKernel(std::string template_id)
      : Error("no kernel loaded for template " + template_id), template_id(std::move(template_id)) {}
  std::string template_id;
};

class KernelPanic : public Error {
 public:
  explicit KernelPanic(std::string diagnostic) : Error("kernel panic: " + diagnostic) {}
};

class PatchRejected : public Error {
 public:
  explicit PatchRejected(std::string detail) : Error("patch rejected: " + detail) {}
};

class UnknownPath : public Error {
 public:
  explicit UnknownPath(std::string path) : Error("unknown path: " + path), path(std::move(path)) {}
  std::string path;
};

class UnknownSnapshot : public Error {
 public:
  explicit UnknownSnapshot(std::string id) : Error("unknown snapshot: " + id), id(std::move(id)) {}
  std::string id;
};

class SchemaChanged : public Error {
 public:
  explicit SchemaChanged(std::string detail) : Error("schema changed: " + detail) {}
};

class FatalSetupError : public Error {
 public:
  explicit FatalSetupError(std::string detail) : Error("fatal setup error: " + detail) {}
};

}  // namespace bespoke
