#pragma once

#include <stdexcept>
#include <string>

namespace sfda {

// Every error carries a short machine-parsable class name; the CLI prints it
// as the first token of its one-line failure message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape_error", what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error("contract_error", what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data_error", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

class VersionError : public Error {
 public:
  explicit VersionError(const std::string& what)
      : Error("version_error", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error("numeric_error", what) {}
};

}  // namespace sfda
