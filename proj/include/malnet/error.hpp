#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace malnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Batch statistics requested over a single element per channel.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected in a loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape (non-scalar loss, double backward).
class TapeError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncatedFileError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Tensor table disagrees with the architecture described by the metadata.
class ArchitectureMismatchError : public CheckpointError {
 public:
  ArchitectureMismatchError(const std::string& what, std::vector<std::string> names = {})
      : CheckpointError(what), names_(std::move(names)) {}
  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  std::vector<std::string> names_;
};

// Payload bytes do not match the checksum recorded in the metadata.
class PayloadError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace malnet
