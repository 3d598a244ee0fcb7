#pragma once

#include <stdexcept>
#include <string>

namespace kgseq {

// Exit codes reported by the CLI. Exceptions below map onto them in main().
enum class ExitCode : int {
  ok = 0,
  internal = 1,
  config = 2,
  data = 3,
  numeric = 4,
};

// Bad configuration: invalid flag/option values, inconsistent settings.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad input data: malformed files, unresolvable names, missing artifacts.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Contract violation at an API boundary: unknown ids, empty inputs, ...
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape mismatch; message names both shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or other numerical failures during training/inference.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kgseq
