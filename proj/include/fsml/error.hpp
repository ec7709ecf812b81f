#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fsml {

enum class ErrorCode {
  Dimension = 1,
  Index,
  Contract,
  Configuration,
  Format,
  Io,
  Sampling,
  Conditioning,
  Load,
  Gate,
};

const char* error_code_name(ErrorCode code) noexcept;

// Base of every exception thrown by the library. The C API maps `code()` onto
// its status enum.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorCode::Dimension, what) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error(ErrorCode::Index, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorCode::Contract, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::Configuration, what) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorCode::Format, what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::Io, what) {}
};

class SamplingError : public Error {
 public:
  explicit SamplingError(const std::string& what) : Error(ErrorCode::Sampling, what) {}
};

class ConditioningError : public Error {
 public:
  explicit ConditioningError(const std::string& what) : Error(ErrorCode::Conditioning, what) {}
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error(ErrorCode::Load, what) {}
};

}  // namespace fsml
