#include "mad/error.hpp"

namespace mad {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NotOnTape: return "NotOnTape";
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::VocabOverflow: return "VocabOverflow";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::TeacherTooWeak: return "TeacherTooWeak";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::MTooLarge: return "MTooLarge";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
    case ErrorCode::CategoryTooSmall: return "CategoryTooSmall";
    case ErrorCode::ClassTooSmall: return "ClassTooSmall";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::ArchMismatch: return "ArchMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::Usage: return "Usage";
  }
  return "Unknown";
}

}  // namespace mad
