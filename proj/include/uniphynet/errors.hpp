#pragma once

#include <stdexcept>
#include <string>

namespace uniphynet {

// Input file does not parse. Carries the 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, long line = 0)
      : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// File parses but its layout contradicts the declared modality.
class SchemaError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A value is outside its legal range (ratings, class indices, ...).
class ValidationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inconsistent or unsupported configuration.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform.
class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operation applied in the wrong lifecycle state (e.g. preprocessing twice).
class StateError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filter design request cannot be realized.
class DesignError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training diverged (NaN/Inf in loss or gradients).
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace uniphynet
