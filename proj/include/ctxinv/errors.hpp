#pragma once

#include <stdexcept>
#include <string>

namespace ctxinv {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The embedding dimension cannot host the required orthogonal directions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A pretrained-state parameter violates one of its inequalities. The message
/// names the inequality.
class ParamError : public Error {
 public:
  using Error::Error;
};

class SolveError : public Error {
 public:
  using Error::Error;
};

/// Dataset construction failed: not enough tokens, uniqueness or hygiene
/// violations, or the live state does not realize the requested category.
class DatasetError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or weight.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctxinv
