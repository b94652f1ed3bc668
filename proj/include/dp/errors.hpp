#pragma once
#include <stdexcept>
#include <string>

namespace dp {

// Error taxonomy shared by all modules. Everything derives from dp::Error so
// callers can catch the library as a whole or a specific failure class.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch between tensors.
struct ShapeError : Error {
  using Error::Error;
};

// Input outside an operation's mathematical domain (log of nonpositive, ...).
struct DomainError : Error {
  using Error::Error;
};

// A computation produced a non-finite value.
struct NumericError : Error {
  using Error::Error;
};

// API misuse: violated precondition that is not a shape or domain issue.
struct ContractError : Error {
  using Error::Error;
};

// Invalid configuration value or inconsistent construction parameters.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or incompatible file content.
struct FormatError : Error {
  using Error::Error;
};

// Filesystem-level failure.
struct IoError : Error {
  using Error::Error;
};

// Training aborted on a non-finite loss; carries the last good checkpoint.
struct TrainingDiverged : Error {
  TrainingDiverged(const std::string& msg, std::string ckpt)
      : Error(msg), checkpoint_path(std::move(ckpt)) {}
  std::string checkpoint_path;
};

}  // namespace dp
