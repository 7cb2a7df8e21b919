#pragma once

#include <stdexcept>
#include <string>

namespace ibtl {

// Thrown on solver breakdown, divergence, non-finite values, failed factorizations.
// The CLI maps this family to exit code 1.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on malformed files, incompatible shapes, bad configuration.
// The CLI maps this family to exit code 2.
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ibtl
