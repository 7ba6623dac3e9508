#pragma once

#include <stdexcept>
#include <string>

namespace dcs {

/// Base class for every error raised by this library. Messages are one line
/// and name the offending operation, shape, key, or line number.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dcs
