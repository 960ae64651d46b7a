#pragma once

#include <stdexcept>
#include <string>

namespace deepmts {

// Bad input or configuration: shapes, grids, option values. CLI exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Failure discovered while computing (NaN loss, degenerate model, missing
// files). CLI exit code 1.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

class NoEventBatchError : public ValidationError {
 public:
  NoEventBatchError() : ValidationError("no-event batch: cox partial likelihood needs at least one event") {}
};

class NoComparablePairsError : public ValidationError {
 public:
  NoComparablePairsError() : ValidationError("no comparable pairs for concordance index") {}
};

class DegenerateModelError : public RuntimeFailure {
 public:
  explicit DegenerateModelError(const std::string& what) : RuntimeFailure("degenerate model: " + what) {}
};

}  // namespace deepmts
