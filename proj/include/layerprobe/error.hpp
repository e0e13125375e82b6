#pragma once

#include <stdexcept>
#include <string>

namespace layerprobe {

// Error categories map onto process exit codes in the CLI:
// ConfigError -> 2, InputError -> 3, NumericalError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace layerprobe
