#pragma once

#include <stdexcept>
#include <string>

namespace dmaudit {

// Error taxonomy shared by the library and the CLI. Each class maps to a
// process exit code (see tools/main.cpp): usage/argument -> 2, missing
// artifact -> 3, format/integrity -> 4, property check -> 5.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& msg) : Error(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& msg) : Error(msg) {}
};

class MissingArtifactError : public Error {
 public:
  explicit MissingArtifactError(const std::string& msg) : Error(msg) {}
};

class PropertyCheckError : public Error {
 public:
  explicit PropertyCheckError(const std::string& msg) : Error(msg) {}
};

}  // namespace dmaudit
