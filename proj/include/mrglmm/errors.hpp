#pragma once

#include <stdexcept>
#include <string>

namespace mrglmm {

// Bad shapes, out-of-domain values, malformed files and configs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operation requested for a family that does not support it.
class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite objective, log-density or step-size blow-up.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, int iteration = -1)
      : std::runtime_error(what), iteration_(iteration) {}
  int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mrglmm
