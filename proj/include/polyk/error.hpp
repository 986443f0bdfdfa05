#pragma once

#include <stdexcept>
#include <string>

namespace polyk {

enum class Errc {
  invalid_argument,
  out_of_range,
  type_mismatch,
  not_in_space,
  not_finite,
  not_closed,
  no_density,
  zero_density,
  cyclic,
  enumeration_limit,
  inadmissible,
  pathwise_inadmissible,
  dimension_mismatch,
  unknown_name,
  parse,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::out_of_range: return "out-of-range";
    case Errc::type_mismatch: return "type-mismatch";
    case Errc::not_in_space: return "not-in-space";
    case Errc::not_finite: return "not-finite";
    case Errc::not_closed: return "not-closed";
    case Errc::no_density: return "pathwise-only kernel";
    case Errc::zero_density: return "zero-density";
    case Errc::cyclic: return "cyclic";
    case Errc::enumeration_limit: return "enumeration-limit";
    case Errc::inadmissible: return "inadmissible";
    case Errc::pathwise_inadmissible: return "pathwise-inadmissible";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::unknown_name: return "unknown-name";
    case Errc::parse: return "parse";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace polyk
