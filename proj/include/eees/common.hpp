#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace eees {

// Error hierarchy. Every failure raised by the library derives from Error so
// front ends can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Invalid user configuration; field() names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

enum class Modality : std::uint8_t { V, R };

inline Modality other(Modality m) { return m == Modality::V ? Modality::R : Modality::V; }

inline std::string_view to_string(Modality m) { return m == Modality::V ? "V" : "R"; }

inline Modality parse_modality(std::string_view s) {
  if (s == "V" || s == "v") return Modality::V;
  if (s == "R" || s == "r") return Modality::R;
  throw ConfigError("modality", "expected V or R, got '" + std::string(s) + "'");
}

}  // namespace eees
