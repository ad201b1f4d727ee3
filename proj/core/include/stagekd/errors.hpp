#ifndef STAGEKD_ERRORS_HPP
#define STAGEKD_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace stagekd {

// Error taxonomy mirrored by the CLI exit codes: configuration and input
// problems exit with 2, runtime training/IO failures with 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : Error {
  using Error::Error;
};

struct ParameterError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct TrainingError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace stagekd

#endif
