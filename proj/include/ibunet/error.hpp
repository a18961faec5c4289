#pragma once

#include <stdexcept>
#include <string>

namespace ibunet {

enum class errc {
  non_divisible,
  non_positive,
  out_of_bounds,
  infeasible_profile,
  missing_capacity,
  parse_error,
  bad_magic,
  unsupported_version,
  unsupported_dtype,
  fortran_order_unsupported,
  truncated_data,
  shape_mismatch,
  channel_count_mismatch,
  dim_mismatch,
  config_invalid,
  non_finite,
  degenerate_range,
  too_small,
  single_class,
  io_error,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::non_divisible: return "NonDivisible";
    case errc::non_positive: return "NonPositive";
    case errc::out_of_bounds: return "OutOfBounds";
    case errc::infeasible_profile: return "InfeasibleProfile";
    case errc::missing_capacity: return "MissingCapacity";
    case errc::parse_error: return "ParseError";
    case errc::bad_magic: return "BadMagic";
    case errc::unsupported_version: return "UnsupportedVersion";
    case errc::unsupported_dtype: return "UnsupportedDtype";
    case errc::fortran_order_unsupported: return "FortranOrderUnsupported";
    case errc::truncated_data: return "TruncatedData";
    case errc::shape_mismatch: return "ShapeMismatch";
    case errc::channel_count_mismatch: return "ChannelCountMismatch";
    case errc::dim_mismatch: return "DimMismatch";
    case errc::config_invalid: return "ConfigInvalid";
    case errc::non_finite: return "NonFinite";
    case errc::degenerate_range: return "DegenerateRange";
    case errc::too_small: return "TooSmall";
    case errc::single_class: return "SingleClass";
    case errc::io_error: return "IoError";
  }
  return "UnknownError";
}

/// Library-wide exception; `code()` identifies the contract violation.
class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  errc code() const { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, errc code, const std::string& what) {
  if (!ok) fail(code, what);
}

}  // namespace ibunet
