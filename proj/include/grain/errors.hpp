#pragma once

#include <stdexcept>
#include <string>

namespace grain {

// Process exit categories used by the command-line front end.
enum class ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

class GrainError : public std::runtime_error {
 public:
  explicit GrainError(const std::string& what, ExitCode code = ExitCode::kRuntime)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

#define GRAIN_DEFINE_ERROR(Name, Code)                                   \
  class Name : public GrainError {                                       \
   public:                                                               \
    explicit Name(const std::string& what) : GrainError(what, Code) {}   \
  };

GRAIN_DEFINE_ERROR(ConfigError, ExitCode::kConfig)
GRAIN_DEFINE_ERROR(ShapeError, ExitCode::kRuntime)
GRAIN_DEFINE_ERROR(DegenerateBox, ExitCode::kData)
GRAIN_DEFINE_ERROR(ClientFailure, ExitCode::kRuntime)
GRAIN_DEFINE_ERROR(TokenizationError, ExitCode::kData)
GRAIN_DEFINE_ERROR(NormalizationError, ExitCode::kRuntime)
GRAIN_DEFINE_ERROR(NonFiniteLoss, ExitCode::kRuntime)
GRAIN_DEFINE_ERROR(CorruptImage, ExitCode::kData)
GRAIN_DEFINE_ERROR(DataError, ExitCode::kData)
GRAIN_DEFINE_ERROR(CheckpointError, ExitCode::kData)

#undef GRAIN_DEFINE_ERROR

// Malformed shard line; carries the 1-based line number.
class SchemaError : public GrainError {
 public:
  SchemaError(std::size_t line, const std::string& what)
      : GrainError("line " + std::to_string(line) + ": " + what, ExitCode::kData), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace grain
