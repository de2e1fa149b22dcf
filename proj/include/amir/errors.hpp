#pragma once

#include <stdexcept>
#include <string>

namespace amir {

enum class ErrorKind {
  Shape,      // tensor/image dimensions violate a precondition
  Parameter,  // an operator argument is out of range
  Config,     // configuration file or flag rejected
  Data,       // corpus or image I/O problem
  Numerical,  // non-finite values
  Invariant,  // internal invariant broken
};

/// Single exception type carrying a category; the CLI maps categories to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);

  ErrorKind kind() const noexcept { return kind_; }

  /// 2 config error, 3 data error, 4 numerical failure.
  int exit_code() const noexcept;

 private:
  ErrorKind kind_;
};

const char* to_string(ErrorKind kind) noexcept;

[[noreturn]] void throw_shape(const std::string& what);
[[noreturn]] void throw_parameter(const std::string& what);
[[noreturn]] void throw_config(const std::string& what);
[[noreturn]] void throw_data(const std::string& what);
[[noreturn]] void throw_numerical(const std::string& what);
[[noreturn]] void throw_invariant(const std::string& what);

}  // namespace amir
