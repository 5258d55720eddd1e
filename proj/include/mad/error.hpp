#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mad {

enum class ErrorCode {
  ShapeMismatch,
  NonFinite,
  NotOnTape,
  ZeroNorm,
  IndexOutOfRange,
  VocabOverflow,
  SequenceTooLong,
  TeacherTooWeak,
  EmptyCorpus,
  MTooLarge,
  KTooLarge,
  SpecInvalid,
  CategoryTooSmall,
  ClassTooSmall,
  ParseError,
  BatchTooSmall,
  DegenerateInput,
  Diverged,
  ArchMismatch,
  IoError,
  Usage,
};

std::string_view to_string(ErrorCode code);

// Every recoverable failure in the library surfaces as an Error carrying a
// machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace mad
