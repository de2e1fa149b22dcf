#include "amir/errors.hpp"

namespace amir {

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

int Error::exit_code() const noexcept {
  switch (kind_) {
    case ErrorKind::Config:
    case ErrorKind::Parameter:
      return 2;
    case ErrorKind::Data:
    case ErrorKind::Shape:
      return 3;
    case ErrorKind::Numerical:
    case ErrorKind::Invariant:
      return 4;
  }
  return 1;
}

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Invariant: return "invariant";
  }
  return "unknown";
}

void throw_shape(const std::string& what) { throw Error(ErrorKind::Shape, what); }
void throw_parameter(const std::string& what) { throw Error(ErrorKind::Parameter, what); }
void throw_config(const std::string& what) { throw Error(ErrorKind::Config, what); }
void throw_data(const std::string& what) { throw Error(ErrorKind::Data, what); }
void throw_numerical(const std::string& what) { throw Error(ErrorKind::Numerical, what); }
void throw_invariant(const std::string& what) { throw Error(ErrorKind::Invariant, what); }

}  // namespace amir
