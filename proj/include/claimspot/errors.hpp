// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace claimspot {

/// Root of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An operation was called in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or insufficient input data.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Unknown label in a dataset file.
class LabelError : public InputError {
 public:
  using InputError::InputError;
};

/// A class is missing from a fold or split.
class StratificationError : public InputError {
 public:
  using InputError::InputError;
};

/// Invalid configuration values or keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint could not be read.
class LoadError : public Error {
 public:
  using Error::Error;
};

class VersionError : public LoadError {
 public:
  using LoadError::LoadError;
};

class TruncatedError : public LoadError {
 public:
  using LoadError::LoadError;
};

class ShapeError : public LoadError {
 public:
  using LoadError::LoadError;
};

}  // namespace claimspot
