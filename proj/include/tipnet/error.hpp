#pragma once

#include <stdexcept>
#include <string>

namespace tipnet {

enum class ErrorKind {
  Config,
  Format,
  Io,
  Geometry,
  Shape,
  Numerical,
  Reconstruction,
  Data,
};

const char* to_string(ErrorKind kind) noexcept;

/// Base class for every error raised by the library. The kind drives the
/// CLI exit code mapping.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class FormatError : public Error {
 public:
  FormatError(std::string field, const std::string& what)
      : Error(ErrorKind::Format, field + ": " + what), field_(std::move(field)) {}

  /// Name of the header field or payload element that failed validation.
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

class GeometryError : public Error {
 public:
  explicit GeometryError(const std::string& what) : Error(ErrorKind::Geometry, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::Shape, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

class ReconstructionError : public Error {
 public:
  explicit ReconstructionError(const std::string& what)
      : Error(ErrorKind::Reconstruction, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

}  // namespace tipnet
