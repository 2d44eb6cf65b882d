#pragma once

#include <memory>

#include "bespoke/kernel_spec.hpp"
#include "bespoke/oracle.hpp"
#include "bespoke/sql.hpp"
#include "bespoke/store.hpp"

namespace bespoke::kernelgen {

// A KernelSpec instantiated against one BespokeStore: a closed operator
// pipeline over the encoded columns. Construction resolves every column,
// index and threshold; run() only rebinds parameters and executes.
//
// Not reentrant: a kernel instance keeps per-execution scratch (hash tables,
// bitmaps) and must not be invoked concurrently with itself. The store must
// outlive the kernel.
class InterpretedKernel {
 public:
  virtual ~InterpretedKernel() = default;

  virtual oracle::ResultSet run(const contract::ParamBinding& binding, TraceReport* trace = nullptr) const = 0;

  virtual const KernelSpec& spec() const = 0;
  virtual bool tracing() const = 0;

  // Throws IncompatibleStrategy when the spec requires structures the storage
  // plan does not provide.
  static std::unique_ptr<InterpretedKernel> build(const KernelSpec& spec, const sql::QueryAst& ast,
                                                  const planner::BespokeStore& store,
                                                  const contract::Contract& contract, bool tracing);
};

}  // namespace bespoke::kernelgen
