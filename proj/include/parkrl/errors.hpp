/// @file errors.hpp
/// @brief Exception types shared by all modules.

#pragma once

#include <stdexcept>
#include <string>

namespace parkrl {

/// Raised for invalid construction parameters; `field()` names the offending key.
class ConfigError : public std::invalid_argument {
public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), m_field(std::move(field)) {}
  const std::string& field() const noexcept { return m_field; }

private:
  std::string m_field;
};

class RoutingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation did not hold (programming error on the caller side).
class ContractViolation : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

}  // namespace parkrl
