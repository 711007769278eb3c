#pragma once

#include <stdexcept>
#include <string>

namespace iteach {

// Every failure raised by the library derives from Error so callers can map
// whole families onto exit codes without enumerating them.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DegenerateMaskError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace iteach
