#pragma once

#include <stdexcept>
#include <string>

namespace kbdial {

// Error taxonomy. The CLI maps these onto exit codes: validation/config
// failures exit 2, everything else thrown at runtime exits 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// Attention masks that block every key of some query row, or carry values
// other than 0 / -inf.
struct MaskError : Error {
  using Error::Error;
};

// Bad hyperparameters or flag combinations.
struct ConfigError : Error {
  using Error::Error;
};

// API used out of order (e.g. optimizer step before backward).
struct StateError : Error {
  using Error::Error;
};

// Out-of-range token ids or indices.
struct IndexError : Error {
  using Error::Error;
};

// Corpus / checkpoint schema violations.
struct ValidationError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace kbdial
