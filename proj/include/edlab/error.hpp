#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace edlab {

// Every failure surfaced by the library carries one of these kinds so callers
// (and tests) can distinguish, say, a shape mismatch from a bad config key.
enum class ErrorKind {
  Dimension,
  Vocabulary,
  EmptySupervision,
  TapeReuse,
  NonFinite,
  Config,
  Location,
  Length,
  Generation,
  Sampling,
  Shard,
  Supervision,
  Stream,
  Sweep,
  Selection,
  OutOfRange,
  Argument,
  Evaluation,
  Dependency,
  Parse,
  Format,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace edlab
