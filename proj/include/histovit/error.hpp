#pragma once

#include <stdexcept>
#include <string>

namespace histovit {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or settings (eps <= 0, p >= 1, class too small, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Violated preconditions of an API call.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf detected where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed weight files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Dataset or image decoding failures; the message names the offending path.
class IngestionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Rethrows the in-flight library error as the same type with `prefix`
// prepended to its message. Other exceptions pass through unchanged.
[[noreturn]] inline void rethrow_with_context(const std::string& prefix) {
  try {
    throw;
  } catch (const DimensionError& e) {
    throw DimensionError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const ContractError& e) {
    throw ContractError(prefix + e.what());
  } catch (const IndexError& e) {
    throw IndexError(prefix + e.what());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const FormatError& e) {
    throw FormatError(prefix + e.what());
  } catch (const IngestionError& e) {
    throw IngestionError(prefix + e.what());
  } catch (const IoError& e) {
    throw IoError(prefix + e.what());
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
}

}  // namespace histovit
