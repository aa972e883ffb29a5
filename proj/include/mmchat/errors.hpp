#pragma once

#include <stdexcept>
#include <string>

namespace mmchat {

// Base for every error the library raises on bad input or broken contracts.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Loss requested over a mask with no selected position.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

class ContextLengthError : public Error {
 public:
  using Error::Error;
};

class RoleError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class PairingError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmchat
