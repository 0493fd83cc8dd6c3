// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ilin {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dimension mismatch between operands.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Coordinate or index outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// A model, dataset or configuration violates a structural invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Non-finite or otherwise unusable numeric value.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed file content.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Activation trace does not fit the layer it is applied to.
class TraceError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace ilin
