#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gnnuq {

// One exception type, one code per failure mode. Parse errors carry the byte
// offset of the offending token; everything else leaves it at npos.
enum class errc {
  // smiles parsing
  EmptyInput,
  UnsupportedToken,
  UnclosedRing,
  UnbalancedParen,
  // dataset / featurization
  CapacityExceeded,
  MissingColumn,
  IoError,
  NoValidRows,
  DegenerateTargets,
  // tensor engine
  ShapeMismatch,
  NonScalarLoss,
  // search space / serialization
  MalformedJson,
  VersionMismatch,
  GeneOutOfRange,
  Overflow,
  // training / metrics
  NonPositiveVariance,
  DivergedLoss,
  LengthMismatch,
  EmptyValidation,
  InsufficientRecords,
  DegenerateInput,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::EmptyInput: return "EmptyInput";
    case errc::UnsupportedToken: return "UnsupportedToken";
    case errc::UnclosedRing: return "UnclosedRing";
    case errc::UnbalancedParen: return "UnbalancedParen";
    case errc::CapacityExceeded: return "CapacityExceeded";
    case errc::MissingColumn: return "MissingColumn";
    case errc::IoError: return "IoError";
    case errc::NoValidRows: return "NoValidRows";
    case errc::DegenerateTargets: return "DegenerateTargets";
    case errc::ShapeMismatch: return "ShapeMismatch";
    case errc::NonScalarLoss: return "NonScalarLoss";
    case errc::MalformedJson: return "MalformedJson";
    case errc::VersionMismatch: return "VersionMismatch";
    case errc::GeneOutOfRange: return "GeneOutOfRange";
    case errc::Overflow: return "Overflow";
    case errc::NonPositiveVariance: return "NonPositiveVariance";
    case errc::DivergedLoss: return "DivergedLoss";
    case errc::LengthMismatch: return "LengthMismatch";
    case errc::EmptyValidation: return "EmptyValidation";
    case errc::InsufficientRecords: return "InsufficientRecords";
    case errc::DegenerateInput: return "DegenerateInput";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  Error(errc code, const std::string& what, std::size_t offset = npos)
      : std::runtime_error(format(code, what, offset)),
        code_(code),
        offset_(offset) {}

  errc code() const noexcept { return code_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  static std::string format(errc code, const std::string& what,
                            std::size_t offset) {
    std::string s = errc_name(code);
    s += ": ";
    s += what;
    if (offset != npos) {
      s += " (byte ";
      s += std::to_string(offset);
      s += ")";
    }
    return s;
  }

  errc code_;
  std::size_t offset_;
};

}  // namespace gnnuq
