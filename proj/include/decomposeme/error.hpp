#pragma once

#include <stdexcept>
#include <string>

namespace decomposeme {

// Every error raised by the library derives from Error. The CLI maps the
// "validation" family to exit code 1 and the "runtime" family to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Validation family: the caller supplied something inconsistent.
class DimensionError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class InputError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class ParseError : public Error {
 public:
  using Error::Error;
};
class InfeasibleError : public Error {
 public:
  using Error::Error;
};
class SemanticError : public Error {
 public:
  using Error::Error;
};

// Runtime family: the inputs were well formed but the run could not complete.
class FormatError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch, long batch)
      : Error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  long batch() const noexcept { return batch_; }

 private:
  int epoch_;
  long batch_;
};

inline bool is_validation_error(const Error& e) {
  return dynamic_cast<const FormatError*>(&e) == nullptr &&
         dynamic_cast<const IoError*>(&e) == nullptr &&
         dynamic_cast<const DivergenceError*>(&e) == nullptr;
}

}  // namespace decomposeme
