#pragma once

#include <stdexcept>
#include <string>

namespace cspec {

// Precondition / postcondition violations on module contracts.
class ContractViolation : public std::runtime_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or inconsistent configuration (unknown spectrum tag, invalid recipe, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset ingestion problems (missing files, malformed manifests, dim mismatch).
class IngestionError : public std::runtime_error {
 public:
  explicit IngestionError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace cspec
