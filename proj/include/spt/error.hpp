#pragma once

#include <stdexcept>
#include <string>

namespace spt {

// Base for every error raised by the library. The CLI maps the concrete type
// to an exit code (config → 1, everything else → 2).
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
   public:
    using Error::Error;
};

// Input that cannot be used in its geometry (e.g. a non-square image).
class ShapeError : public DimensionError {
   public:
    using DimensionError::DimensionError;
};

class LengthError : public Error {
   public:
    using Error::Error;
};

class UsageError : public Error {
   public:
    using Error::Error;
};

// NaN/Inf produced by a forward op, or a degenerate reduction (empty loss mask).
class NumericError : public Error {
   public:
    using Error::Error;
};

class StabilityError : public NumericError {
   public:
    using NumericError::NumericError;
};

class DiscretizationError : public NumericError {
   public:
    using NumericError::NumericError;
};

class ConfigError : public Error {
   public:
    using Error::Error;
};

class ParseError : public Error {
   public:
    ParseError(const std::string& what, std::size_t position)
        : Error(what + " (at token " + std::to_string(position) + ")"), position_(position) {}
    std::size_t position() const noexcept { return position_; }

   private:
    std::size_t position_;
};

class IoError : public Error {
   public:
    using Error::Error;
};

// Missing or malformed external dataset file.
class IngestError : public IoError {
   public:
    using IoError::IoError;
};

class VocabularyError : public Error {
   public:
    using Error::Error;
};

class ProtocolError : public Error {
   public:
    using Error::Error;
};

class IncompatibleError : public Error {
   public:
    using Error::Error;
};

class MissingArtifactError : public Error {
   public:
    using Error::Error;
};

class UnsupportedFamilyError : public UsageError {
   public:
    using UsageError::UsageError;
};

// Ratio of tail masses with a zero denominator.
class DegenerateProfileError : public NumericError {
   public:
    using NumericError::NumericError;
};

}  // namespace spt
