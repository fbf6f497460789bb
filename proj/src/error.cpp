#include "edlab/error.hpp"

namespace edlab {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Vocabulary: return "vocabulary error";
    case ErrorKind::EmptySupervision: return "empty-supervision error";
    case ErrorKind::TapeReuse: return "tape-reuse error";
    case ErrorKind::NonFinite: return "non-finite error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Location: return "location error";
    case ErrorKind::Length: return "length error";
    case ErrorKind::Generation: return "generation error";
    case ErrorKind::Sampling: return "sampling error";
    case ErrorKind::Shard: return "shard error";
    case ErrorKind::Supervision: return "supervision error";
    case ErrorKind::Stream: return "stream error";
    case ErrorKind::Sweep: return "sweep error";
    case ErrorKind::Selection: return "selection error";
    case ErrorKind::OutOfRange: return "out-of-range error";
    case ErrorKind::Argument: return "argument error";
    case ErrorKind::Evaluation: return "evaluation error";
    case ErrorKind::Dependency: return "dependency error";
    case ErrorKind::Parse: return "parse error";
    case ErrorKind::Format: return "format error";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace edlab
