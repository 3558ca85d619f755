// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fimlab {

enum class ErrorKind {
  kSpecialTokenInText,
  kInvalidConfig,
  kModelMismatch,
  kTooShort,
  kEmptyInput,
  kNotEnoughExcerpts,
  kEmptyDocument,
  kMissingSentinel,
  kMalformedFim,
  kInvalidRate,
  kContextOverflow,
  kNaNDetected,
  kEmptyLossMask,
  kStreamExhausted,
  kInvalidDistribution,
  kExcerptTooShort,
  kInvalidSplit,
  kUnlabeledPosition,
  kSchemaMismatch,
  kIo,
};

std::string_view to_string(ErrorKind kind);

// Every recoverable failure in the library surfaces as this exception; the
// kind lets callers (and tests) branch on the failure without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fimlab
