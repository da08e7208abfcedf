#pragma once

#include <stdexcept>
#include <string>

namespace fdn {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File could not be opened, read or written.
struct IoError : Error {
  using Error::Error;
};

// Byte-level container is malformed or uses an encoding we do not handle.
struct FormatError : Error {
  using Error::Error;
};

// Dimensions or sample rates of the inputs do not line up.
struct ShapeError : Error {
  using Error::Error;
};

// Input values are outside the operation's domain (zero energy, bad config,
// unreachable target, ...).
struct ValueError : Error {
  using Error::Error;
};

// NaN/Inf showed up, or a matrix that must be invertible is singular.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace fdn
